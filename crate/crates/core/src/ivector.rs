//! Total-variability matrix training and iVector extraction.
//!
//! A recording's mean supervector is modelled as `s = m + T w` with a
//! standard-normal prior on `w`. Given Baum-Welch statistics the posterior
//! of `w` has precision `L = I + Σ_c n_c T_cᵀ Σ_c⁻¹ T_c` and mean
//! `L⁻¹ Σ_c T_cᵀ Σ_c⁻¹ f_c`; the iVector is that mean.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{BinError, BinReader, BinWriter};
use crate::gmm::{GmmModel, SufficientStats};

const TV_MAGIC: &[u8; 8] = b"ASCTVM\0\0";
const IVEC_MAGIC: &[u8; 8] = b"ASCIVEC\0";
const VERSION: u32 = 1;
/// Recordings per E-step batch; accumulation happens in batch order.
const BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum IvectorError {
    #[error("UBM checksum does not match the one bound to the TV matrix")]
    ChecksumMismatch,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite or negative statistics")]
    InvalidStats,
    #[error("{recordings} recordings cannot initialize rank {rank}")]
    TooFewRecordings { recordings: usize, rank: usize },
    #[error("rank {rank} exceeds supervector dimension {dim}")]
    RankTooLarge { rank: usize, dim: usize },
    #[error("residuals have no spread; cannot initialize TV matrix")]
    Degenerate,
    #[error("posterior precision is not positive definite")]
    NotPositiveDefinite,
    #[error("file: {0}")]
    Container(#[from] BinError),
}

/// What PCA initialization does when the data span no direction at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegeneratePolicy {
    Error,
    RandomOrthonormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvConfig {
    pub rank: usize,
    pub n_iters: usize,
    pub seed: u64,
    pub degenerate: DegeneratePolicy,
    /// Lower bound on `n_c` when normalizing residuals for PCA.
    pub n_floor: f64,
}

impl Default for TvConfig {
    fn default() -> Self {
        Self {
            rank: 150,
            n_iters: 5,
            seed: 0,
            degenerate: DegeneratePolicy::Error,
            n_floor: 1e-2,
        }
    }
}

/// `(C·F) × R` total-variability matrix, row `c·F + f`.
#[derive(Debug, Clone, PartialEq)]
pub struct TvMatrix {
    data: Vec<f64>,
    n_components: usize,
    dim: usize,
    rank: usize,
    ubm_checksum: [u8; 32],
    seed: u64,
}

impl TvMatrix {
    pub fn new(
        data: Vec<f64>,
        n_components: usize,
        dim: usize,
        rank: usize,
        ubm_checksum: [u8; 32],
    ) -> Result<Self, IvectorError> {
        if rank == 0 || n_components == 0 || dim == 0 {
            return Err(IvectorError::Shape("zero-sized TV matrix".into()));
        }
        if rank > n_components * dim {
            return Err(IvectorError::RankTooLarge {
                rank,
                dim: n_components * dim,
            });
        }
        if data.len() != n_components * dim * rank {
            return Err(IvectorError::Shape(format!(
                "{} values for {}x{}",
                data.len(),
                n_components * dim,
                rank
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(IvectorError::Shape("non-finite entry".into()));
        }
        Ok(Self {
            data,
            n_components,
            dim,
            rank,
            ubm_checksum,
            seed: 0,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ubm_checksum(&self) -> &[u8; 32] {
        &self.ubm_checksum
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Row `c·F + f` of T.
    pub fn row(&self, c: usize, f: usize) -> &[f64] {
        let i = c * self.dim + f;
        &self.data[i * self.rank..(i + 1) * self.rank]
    }

    /// Column `k` as a supervector-length vector.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.data.iter().skip(k).step_by(self.rank).copied().collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(TV_MAGIC, VERSION);
        w.u64(self.n_components as u64);
        w.u64(self.dim as u64);
        w.u64(self.rank as u64);
        w.bytes(&self.ubm_checksum);
        w.u64(self.seed);
        w.f64s(&self.data);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IvectorError> {
        let mut r = BinReader::open(bytes, TV_MAGIC, "TV matrix", VERSION)?;
        let c = r.u64()? as usize;
        let f = r.u64()? as usize;
        let rank = r.u64()? as usize;
        let sum = r.bytes()?;
        let seed = r.u64()?;
        let data = r.f64s()?;
        r.finish()?;
        let checksum: [u8; 32] = sum
            .try_into()
            .map_err(|_| BinError::Malformed("checksum length".into()))?;
        let mut tv = Self::new(data, c, f, rank, checksum)?;
        tv.seed = seed;
        Ok(tv)
    }
}

/// MAP point estimate of the total-variability factors of one recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IVector {
    pub w: Vec<f64>,
    /// `ln |L|` of the posterior precision.
    pub posterior_precision_logdet: f64,
}

impl IVector {
    pub fn dim(&self) -> usize {
        self.w.len()
    }
}

/// Posterior of `w` for one recording.
struct Posterior {
    w: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    b: DVector<f64>,
    logdet: f64,
}

/// TV matrix with per-component products precomputed against a UBM.
pub struct IvectorExtractor<'a> {
    tv: &'a TvMatrix,
    /// `T_cᵀ Σ_c⁻¹ T_c` for every component.
    tsit: Vec<DMatrix<f64>>,
    /// `Σ⁻¹ T` row-major like T.
    sit: Vec<f64>,
}

impl<'a> IvectorExtractor<'a> {
    pub fn new(tv: &'a TvMatrix, ubm: &GmmModel) -> Result<Self, IvectorError> {
        if ubm.checksum() != tv.ubm_checksum {
            return Err(IvectorError::ChecksumMismatch);
        }
        Self::unchecked(tv, ubm)
    }

    /// Used during training, where the TV matrix is bound at the end.
    fn unchecked(tv: &'a TvMatrix, ubm: &GmmModel) -> Result<Self, IvectorError> {
        if ubm.n_components() != tv.n_components || ubm.dim() != tv.dim {
            return Err(IvectorError::Shape(format!(
                "UBM is {}x{}, TV expects {}x{}",
                ubm.n_components(),
                ubm.dim(),
                tv.n_components,
                tv.dim
            )));
        }
        let r = tv.rank;
        let f_dim = tv.dim;
        let mut sit = vec![0.0; tv.data.len()];
        for c in 0..tv.n_components {
            let var = ubm.variance(c);
            for f in 0..f_dim {
                let i = c * f_dim + f;
                for k in 0..r {
                    sit[i * r + k] = tv.data[i * r + k] / var[f];
                }
            }
        }
        let tsit = (0..tv.n_components)
            .into_par_iter()
            .map(|c| {
                let mut m = DMatrix::<f64>::zeros(r, r);
                for f in 0..f_dim {
                    let t = tv.row(c, f);
                    let s = &sit[(c * f_dim + f) * r..(c * f_dim + f + 1) * r];
                    for a in 0..r {
                        for b in 0..=a {
                            m[(a, b)] += t[a] * s[b];
                        }
                    }
                }
                m.fill_upper_triangle_with_lower_triangle();
                m
            })
            .collect();
        Ok(Self { tv, tsit, sit })
    }

    pub fn rank(&self) -> usize {
        self.tv.rank
    }

    fn check_stats(&self, stats: &SufficientStats) -> Result<(), IvectorError> {
        if stats.n_components() != self.tv.n_components || stats.dim != self.tv.dim {
            return Err(IvectorError::Shape("statistics do not match TV matrix".into()));
        }
        if !stats.is_finite() || stats.n.iter().any(|n| *n < 0.0) {
            return Err(IvectorError::InvalidStats);
        }
        Ok(())
    }

    fn posterior(&self, stats: &SufficientStats) -> Result<Posterior, IvectorError> {
        self.check_stats(stats)?;
        let r = self.tv.rank;
        let mut l = DMatrix::<f64>::identity(r, r);
        for (c, &n) in stats.n.iter().enumerate() {
            if n != 0.0 {
                add_scaled(&mut l, n, &self.tsit[c]);
            }
        }
        let mut b = DVector::<f64>::zeros(r);
        for (i, &fv) in stats.f.iter().enumerate() {
            if fv != 0.0 {
                let s = &self.sit[i * r..(i + 1) * r];
                for k in 0..r {
                    b[k] += s[k] * fv;
                }
            }
        }
        let chol = Cholesky::new(l).ok_or(IvectorError::NotPositiveDefinite)?;
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let w = chol.solve(&b);
        Ok(Posterior { w, chol, b, logdet })
    }

    pub fn extract(&self, stats: &SufficientStats) -> Result<IVector, IvectorError> {
        let p = self.posterior(stats)?;
        Ok(IVector {
            w: p.w.iter().copied().collect(),
            posterior_precision_logdet: p.logdet,
        })
    }

    /// Extracts iVectors for many recordings in parallel.
    pub fn extract_all(&self, stats: &[SufficientStats]) -> Result<Vec<IVector>, IvectorError> {
        stats.par_iter().map(|s| self.extract(s)).collect()
    }
}

/// One-off extraction; build an [`IvectorExtractor`] for batches.
pub fn extract_ivector(tv: &TvMatrix, ubm: &GmmModel, stats: &SufficientStats) -> Result<IVector, IvectorError> {
    IvectorExtractor::new(tv, ubm)?.extract(stats)
}

/// PCA initialization of T from whitened, count-normalized residuals.
pub fn init_tv_pca(stats: &[SufficientStats], ubm: &GmmModel, cfg: &TvConfig) -> Result<TvMatrix, IvectorError> {
    let c_n = ubm.n_components();
    let f_n = ubm.dim();
    let d = c_n * f_n;
    let r = cfg.rank;
    if r == 0 {
        return Err(IvectorError::Shape("rank must be positive".into()));
    }
    if r > d {
        return Err(IvectorError::RankTooLarge { rank: r, dim: d });
    }
    if stats.len() < r {
        return Err(IvectorError::TooFewRecordings {
            recordings: stats.len(),
            rank: r,
        });
    }
    for s in stats {
        if s.n_components() != c_n || s.dim != f_n {
            return Err(IvectorError::Shape("statistics do not match UBM".into()));
        }
        if !s.is_finite() || s.n.iter().any(|n| *n < 0.0) {
            return Err(IvectorError::InvalidStats);
        }
    }
    let n = stats.len();
    let sd: Vec<f64> = ubm.variances().iter().map(|v| v.sqrt()).collect();
    let mut x = DMatrix::<f64>::zeros(n, d);
    for (i, s) in stats.iter().enumerate() {
        for c in 0..c_n {
            let denom = s.n[c].max(cfg.n_floor);
            for f in 0..f_n {
                let j = c * f_n + f;
                x[(i, j)] = s.f[j] / denom / sd[j];
            }
        }
    }
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }

    // Directions scaled by singular value / √N, via the smaller Gram matrix.
    let (values, dirs): (Vec<f64>, Vec<DVector<f64>>) = if n <= d {
        let g = &x * x.transpose();
        let eig = SymmetricEigen::new(g);
        let order = descending(&eig.eigenvalues);
        order
            .into_iter()
            .map(|k| {
                let u = eig.eigenvectors.column(k);
                (eig.eigenvalues[k].max(0.0), x.transpose() * u / (n as f64).sqrt())
            })
            .unzip()
    } else {
        let cov = x.transpose() * &x;
        let eig = SymmetricEigen::new(cov);
        let order = descending(&eig.eigenvalues);
        order
            .into_iter()
            .map(|k| {
                let lam = eig.eigenvalues[k].max(0.0);
                let v = eig.eigenvectors.column(k).into_owned();
                (lam, v * (lam / n as f64).sqrt())
            })
            .unzip()
    };
    let top = values.first().copied().unwrap_or(0.0);
    let tol = 1e-10 * top.max(f64::MIN_POSITIVE) * d as f64;
    let meaningful = values.iter().take(r).filter(|v| **v > tol && top > 1e-300).count();
    if meaningful == 0 && cfg.degenerate == DegeneratePolicy::Error {
        return Err(IvectorError::Degenerate);
    }
    let mut cols: Vec<DVector<f64>> = dirs.into_iter().take(meaningful).collect();
    if meaningful < r {
        log::warn!("TV init: residuals span {meaningful} of {r} directions; filling the rest randomly");
        let scale = cols.first().map(|c| 1e-3 * c.norm()).unwrap_or(1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut basis: Vec<DVector<f64>> = cols.iter().map(|c| c.normalize()).collect();
        while cols.len() < r {
            let mut v = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            for _ in 0..2 {
                for b in &basis {
                    let p = b.dot(&v);
                    v.axpy(-p, b, 1.0);
                }
            }
            let norm = v.norm();
            if norm < 1e-8 {
                continue;
            }
            let unit = v / norm;
            cols.push(&unit * scale);
            basis.push(unit);
        }
    }
    let mut data = vec![0.0; d * r];
    for (k, col) in cols.iter().enumerate() {
        for j in 0..d {
            data[j * r + k] = col[j] * sd[j];
        }
    }
    let mut tv = TvMatrix::new(data, c_n, f_n, r, ubm.checksum())?;
    tv.seed = cfg.seed;
    Ok(tv)
}

fn add_scaled(dst: &mut DMatrix<f64>, s: f64, src: &DMatrix<f64>) {
    dst.as_mut_slice()
        .iter_mut()
        .zip(src.as_slice())
        .for_each(|(d, v)| *d += s * v);
}

fn descending(values: &DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Result of TV training.
#[derive(Debug, Clone)]
pub struct TvTraining {
    pub tv: TvMatrix,
    /// `Σ_r (½ bᵀL⁻¹b − ½ ln|L|)` for the initial matrix and after each
    /// EM iteration; the marginal log-likelihood up to a constant.
    pub objectives: Vec<f64>,
}

/// Marginal log-likelihood (up to T-independent terms) of `stats` under `tv`.
pub fn tv_objective(tv: &TvMatrix, ubm: &GmmModel, stats: &[SufficientStats]) -> Result<f64, IvectorError> {
    let ex = IvectorExtractor::unchecked(tv, ubm)?;
    let parts: Result<Vec<f64>, IvectorError> = stats
        .par_iter()
        .map(|s| {
            let p = ex.posterior(s)?;
            Ok(0.5 * p.b.dot(&p.w) - 0.5 * p.logdet)
        })
        .collect();
    Ok(parts?.iter().sum())
}

/// PCA initialization followed by `cfg.n_iters` EM iterations.
pub fn train_tv(stats: &[SufficientStats], ubm: &GmmModel, cfg: &TvConfig) -> Result<TvTraining, IvectorError> {
    let mut tv = init_tv_pca(stats, ubm, cfg)?;
    let mut objectives = Vec::with_capacity(cfg.n_iters + 1);
    for it in 0..cfg.n_iters {
        let (next, obj) = em_iteration(&tv, ubm, stats)?;
        log::debug!("TV EM iteration {it}: objective {obj}");
        objectives.push(obj);
        tv = next;
    }
    objectives.push(tv_objective(&tv, ubm, stats)?);
    Ok(TvTraining { tv, objectives })
}

fn em_iteration(tv: &TvMatrix, ubm: &GmmModel, stats: &[SufficientStats]) -> Result<(TvMatrix, f64), IvectorError> {
    let ex = IvectorExtractor::unchecked(tv, ubm)?;
    let r = tv.rank;
    let c_n = tv.n_components;
    let f_n = tv.dim;
    let mut acc_a = vec![DMatrix::<f64>::zeros(r, r); c_n];
    let mut acc_c = vec![DMatrix::<f64>::zeros(f_n, r); c_n];
    let mut objective = 0.0;

    for batch in stats.chunks(BATCH) {
        let posts: Vec<(DVector<f64>, DMatrix<f64>, f64)> = batch
            .par_iter()
            .map(|s| {
                let p = ex.posterior(s)?;
                let ww = p.chol.inverse() + &p.w * p.w.transpose();
                let obj = 0.5 * p.b.dot(&p.w) - 0.5 * p.logdet;
                Ok((p.w, ww, obj))
            })
            .collect::<Result<_, IvectorError>>()?;
        objective += posts.iter().map(|p| p.2).sum::<f64>();
        acc_a
            .par_iter_mut()
            .zip(acc_c.par_iter_mut())
            .enumerate()
            .for_each(|(c, (a, cc))| {
                for (s, (w, ww, _)) in batch.iter().zip(&posts) {
                    let n = s.n[c];
                    if n != 0.0 {
                        add_scaled(a, n, ww);
                    }
                    let f = s.first_order(c);
                    for (fi, fv) in f.iter().enumerate() {
                        if *fv != 0.0 {
                            for k in 0..r {
                                cc[(fi, k)] += fv * w[k];
                            }
                        }
                    }
                }
            });
    }

    let mut data = tv.data.clone();
    let updated: Vec<Option<DMatrix<f64>>> = acc_a
        .par_iter()
        .zip(acc_c.par_iter())
        .map(|(a, cc)| {
            let chol = Cholesky::new(a.clone())?;
            // T_c A_c = C_c  ⇔  A_c T_cᵀ = C_cᵀ (A_c symmetric).
            Some(chol.solve(&cc.transpose()).transpose())
        })
        .collect();
    for (c, t_c) in updated.into_iter().enumerate() {
        match t_c {
            Some(t_c) => {
                for f in 0..f_n {
                    for k in 0..r {
                        data[(c * f_n + f) * r + k] = t_c[(f, k)];
                    }
                }
            }
            None => log::warn!("TV M-step: accumulator for component {c} is singular; keeping previous block"),
        }
    }
    let mut next = TvMatrix::new(data, c_n, f_n, r, tv.ubm_checksum)?;
    next.seed = tv.seed;
    Ok((next, objective))
}

/// Recording id → iVector table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IvectorSet {
    pub items: Vec<(String, IVector)>,
}

impl IvectorSet {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(IVEC_MAGIC, VERSION);
        w.u64(self.items.len() as u64);
        for (id, v) in &self.items {
            w.str(id);
            w.f64(v.posterior_precision_logdet);
            w.f64s(&v.w);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IvectorError> {
        let mut r = BinReader::open(bytes, IVEC_MAGIC, "iVector set", VERSION)?;
        let n = r.u64()? as usize;
        let mut items = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let id = r.str()?;
            let logdet = r.f64()?;
            let w = r.f64s()?;
            items.push((
                id,
                IVector {
                    w,
                    posterior_precision_logdet: logdet,
                },
            ));
        }
        r.finish()?;
        Ok(Self { items })
    }
}
