//! Diagonal-covariance GMM universal background model: k-means++ seeding,
//! EM training and Baum-Welch statistics.
//!
//! E-step work is split into fixed-size frame chunks that are processed in
//! parallel and reduced in chunk order, so results do not depend on the
//! number of worker threads.

use std::f64::consts::PI;
use std::ops::AddAssign;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::binio::{BinError, BinReader, BinWriter};
use crate::features::FeatureMatrix;

const MAGIC: &[u8; 8] = b"ASCUBM\0\0";
const VERSION: u32 = 1;
const CHUNK: usize = 2048;

#[derive(Debug, Error)]
pub enum GmmError {
    #[error("{frames} frames cannot train {components} components")]
    TooFewFrames { frames: usize, components: usize },
    #[error("non-finite feature value in training data")]
    NonFinite,
    #[error("dimension mismatch: model has {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("empty feature matrix")]
    Empty,
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("model file: {0}")]
    Container(#[from] BinError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UbmConfig {
    pub n_components: usize,
    pub n_iters: usize,
    pub seed: u64,
    /// Lloyd iterations after k-means++ seeding.
    pub kmeans_iters: usize,
    /// Variance floor as a fraction of the global per-dimension variance.
    pub var_floor_ratio: f64,
    /// Frames sampled for the k-means initialization.
    pub init_sample: usize,
}

impl Default for UbmConfig {
    fn default() -> Self {
        Self {
            n_components: 256,
            n_iters: 25,
            seed: 0,
            kmeans_iters: 3,
            var_floor_ratio: 1e-3,
            init_sample: 50_000,
        }
    }
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone)]
pub struct GmmModel {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
    var_floor: Vec<f64>,
    dim: usize,
    seed: u64,
    // Derived: ln w_c - ½ Σ ln(2π σ²) and 1/σ².
    log_norm: Vec<f64>,
    inv_var: Vec<f64>,
}

impl PartialEq for GmmModel {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights
            && self.means == other.means
            && self.variances == other.variances
            && self.var_floor == other.var_floor
            && self.dim == other.dim
            && self.seed == other.seed
    }
}

impl GmmModel {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<f64>,
        variances: Vec<f64>,
        dim: usize,
    ) -> Result<Self, GmmError> {
        let floor = vec![0.0; dim];
        Self::with_floor(weights, means, variances, floor, dim, 0)
    }

    fn with_floor(
        weights: Vec<f64>,
        means: Vec<f64>,
        variances: Vec<f64>,
        var_floor: Vec<f64>,
        dim: usize,
        seed: u64,
    ) -> Result<Self, GmmError> {
        let c = weights.len();
        if c == 0 || dim == 0 || means.len() != c * dim || variances.len() != c * dim {
            return Err(GmmError::Invalid("inconsistent parameter shapes".into()));
        }
        if var_floor.len() != dim {
            return Err(GmmError::Invalid("variance floor length".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(GmmError::Invalid("negative weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(GmmError::Invalid(format!("weights sum to {total}")));
        }
        if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(GmmError::Invalid("variances must be positive".into()));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(GmmError::Invalid("non-finite mean".into()));
        }
        let mut m = Self {
            weights,
            means,
            variances,
            var_floor,
            dim,
            seed,
            log_norm: Vec::new(),
            inv_var: Vec::new(),
        };
        m.refresh();
        Ok(m)
    }

    fn refresh(&mut self) {
        let dim = self.dim;
        self.inv_var = self.variances.iter().map(|v| 1.0 / v).collect();
        self.log_norm = self
            .weights
            .iter()
            .enumerate()
            .map(|(c, &w)| {
                let logdet: f64 = self.variances[c * dim..(c + 1) * dim]
                    .iter()
                    .map(|v| (2.0 * PI * v).ln())
                    .sum();
                w.ln() - 0.5 * logdet
            })
            .collect();
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        &self.means[c * self.dim..(c + 1) * self.dim]
    }

    pub fn variance(&self, c: usize) -> &[f64] {
        &self.variances[c * self.dim..(c + 1) * self.dim]
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn var_floor(&self) -> &[f64] {
        &self.var_floor
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Per-component `ln(w_c N(x; μ_c, σ_c²))` written into `out`.
    fn component_log_densities(&self, x: &[f64], out: &mut [f64]) {
        let dim = self.dim;
        for (c, o) in out.iter_mut().enumerate() {
            let mu = &self.means[c * dim..(c + 1) * dim];
            let iv = &self.inv_var[c * dim..(c + 1) * dim];
            let mut q = 0.0;
            for ((xi, mi), vi) in x.iter().zip(mu).zip(iv) {
                let d = xi - mi;
                q += d * d * vi;
            }
            *o = self.log_norm[c] - 0.5 * q;
        }
    }

    /// `ln Σ_c w_c N(x; μ_c, diag σ_c²)`.
    pub fn log_likelihood(&self, frame: &[f64]) -> Result<f64, GmmError> {
        self.check_dim(frame.len())?;
        let mut ld = vec![0.0; self.n_components()];
        self.component_log_densities(frame, &mut ld);
        Ok(log_sum_exp(&ld))
    }

    /// Component posteriors for one frame; returns the frame log-likelihood.
    pub fn posteriors(&self, frame: &[f64], out: &mut [f64]) -> Result<f64, GmmError> {
        self.check_dim(frame.len())?;
        self.component_log_densities(frame, out);
        let lse = log_sum_exp(out);
        out.iter_mut().for_each(|v| *v = (*v - lse).exp());
        Ok(lse)
    }

    fn check_dim(&self, found: usize) -> Result<(), GmmError> {
        if found != self.dim {
            return Err(GmmError::Dimension {
                expected: self.dim,
                found,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(MAGIC, VERSION);
        w.u64(self.n_components() as u64);
        w.u64(self.dim as u64);
        w.u64(self.seed);
        w.f64s(&self.weights);
        w.f64s(&self.means);
        w.f64s(&self.variances);
        w.f64s(&self.var_floor);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GmmError> {
        let mut r = BinReader::open(bytes, MAGIC, "UBM", VERSION)?;
        let c = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let seed = r.u64()?;
        let weights = r.f64s()?;
        let means = r.f64s()?;
        let variances = r.f64s()?;
        let var_floor = r.f64s()?;
        r.finish()?;
        if weights.len() != c {
            return Err(GmmError::Invalid("component count does not match header".into()));
        }
        Self::with_floor(weights, means, variances, var_floor, dim, seed)
    }

    /// SHA-256 of the serialized model; binds dependent artifacts to it.
    pub fn checksum(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Zeroth- and centred first-order Baum-Welch statistics of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    /// Soft counts per component.
    pub n: Vec<f64>,
    /// `Σ_t γ_t(c) (x_t − μ_c)`, row-major `C × F`.
    pub f: Vec<f64>,
    pub dim: usize,
}

impl SufficientStats {
    pub fn zeros(n_components: usize, dim: usize) -> Self {
        Self {
            n: vec![0.0; n_components],
            f: vec![0.0; n_components * dim],
            dim,
        }
    }

    pub fn n_components(&self) -> usize {
        self.n.len()
    }

    pub fn first_order(&self, c: usize) -> &[f64] {
        &self.f[c * self.dim..(c + 1) * self.dim]
    }

    pub fn total_count(&self) -> f64 {
        self.n.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.n.iter().chain(&self.f).all(|v| v.is_finite())
    }

    /// Statistics scaled by `s` (both orders).
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            n: self.n.iter().map(|v| v * s).collect(),
            f: self.f.iter().map(|v| v * s).collect(),
            dim: self.dim,
        }
    }
}

impl AddAssign<&SufficientStats> for SufficientStats {
    fn add_assign(&mut self, rhs: &SufficientStats) {
        self.n.iter_mut().zip(&rhs.n).for_each(|(a, b)| *a += b);
        self.f.iter_mut().zip(&rhs.f).for_each(|(a, b)| *a += b);
    }
}

/// Baum-Welch statistics of `feats` against `model`.
pub fn accumulate_stats(model: &GmmModel, feats: &FeatureMatrix) -> Result<SufficientStats, GmmError> {
    if feats.n_rows() == 0 {
        return Err(GmmError::Empty);
    }
    model.check_dim(feats.dim())?;
    let c = model.n_components();
    let dim = model.dim();
    let partials: Vec<SufficientStats> = feats
        .as_slice()
        .par_chunks(CHUNK * dim)
        .map(|chunk| {
            let mut acc = SufficientStats::zeros(c, dim);
            let mut post = vec![0.0; c];
            for x in chunk.chunks_exact(dim) {
                model.component_log_densities(x, &mut post);
                let lse = log_sum_exp(&post);
                for (k, p) in post.iter().enumerate() {
                    let g = (p - lse).exp();
                    if g == 0.0 {
                        continue;
                    }
                    acc.n[k] += g;
                    let mu = model.mean(k);
                    let f = &mut acc.f[k * dim..(k + 1) * dim];
                    for ((fi, xi), mi) in f.iter_mut().zip(x).zip(mu) {
                        *fi += g * (xi - mi);
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = SufficientStats::zeros(c, dim);
    for p in &partials {
        total += p;
    }
    Ok(total)
}

/// Result of UBM training.
#[derive(Debug, Clone)]
pub struct UbmTraining {
    pub model: GmmModel,
    /// Mean per-frame log-likelihood of the initial model and after each
    /// EM iteration.
    pub log_likelihoods: Vec<f64>,
}

struct EmAccum {
    n: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    ll: f64,
}

impl EmAccum {
    fn zeros(c: usize, dim: usize) -> Self {
        Self {
            n: vec![0.0; c],
            s1: vec![0.0; c * dim],
            s2: vec![0.0; c * dim],
            ll: 0.0,
        }
    }

    fn add(&mut self, o: &EmAccum) {
        self.n.iter_mut().zip(&o.n).for_each(|(a, b)| *a += b);
        self.s1.iter_mut().zip(&o.s1).for_each(|(a, b)| *a += b);
        self.s2.iter_mut().zip(&o.s2).for_each(|(a, b)| *a += b);
        self.ll += o.ll;
    }
}

/// Row slices over a set of feature matrices, split into fixed-size chunks.
fn chunks<'a>(feats: &[&'a FeatureMatrix]) -> Vec<&'a [f64]> {
    feats
        .iter()
        .filter(|f| f.n_rows() > 0)
        .flat_map(|f| f.as_slice().chunks(CHUNK * f.dim()))
        .collect()
}

fn e_step(model: &GmmModel, chunks: &[&[f64]]) -> EmAccum {
    let c = model.n_components();
    let dim = model.dim();
    let partials: Vec<EmAccum> = chunks
        .par_iter()
        .map(|chunk| {
            let mut acc = EmAccum::zeros(c, dim);
            let mut post = vec![0.0; c];
            for x in chunk.chunks_exact(dim) {
                model.component_log_densities(x, &mut post);
                let lse = log_sum_exp(&post);
                acc.ll += lse;
                for (k, p) in post.iter().enumerate() {
                    let g = (p - lse).exp();
                    if g == 0.0 {
                        continue;
                    }
                    acc.n[k] += g;
                    let s1 = &mut acc.s1[k * dim..(k + 1) * dim];
                    let s2 = &mut acc.s2[k * dim..(k + 1) * dim];
                    for ((a, b), xi) in s1.iter_mut().zip(s2.iter_mut()).zip(x) {
                        *a += g * xi;
                        *b += g * xi * xi;
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = EmAccum::zeros(c, dim);
    for p in &partials {
        total.add(p);
    }
    total
}

fn m_step(model: &GmmModel, acc: &EmAccum, n_frames: usize) -> Result<GmmModel, GmmError> {
    let c = model.n_components();
    let dim = model.dim();
    let mut means = model.means.clone();
    let mut vars = model.variances.clone();
    let weights: Vec<f64> = acc.n.iter().map(|n| n / n_frames as f64).collect();
    for k in 0..c {
        let n = acc.n[k];
        if n <= 0.0 {
            continue;
        }
        for d in 0..dim {
            let mu = acc.s1[k * dim + d] / n;
            let var = acc.s2[k * dim + d] / n - mu * mu;
            means[k * dim + d] = mu;
            vars[k * dim + d] = var.max(model.var_floor[d]);
        }
    }
    // Renormalize against rounding so the simplex invariant holds exactly.
    let total: f64 = weights.iter().sum();
    let weights = weights.iter().map(|w| w / total).collect();
    GmmModel::with_floor(weights, means, vars, model.var_floor.clone(), dim, model.seed)
}

/// Trains a UBM on the pooled frames of `feats`.
pub fn train_ubm(feats: &[&FeatureMatrix], cfg: &UbmConfig) -> Result<UbmTraining, GmmError> {
    let dim = feats
        .iter()
        .find(|f| f.n_rows() > 0)
        .map(|f| f.dim())
        .ok_or(GmmError::TooFewFrames {
            frames: 0,
            components: cfg.n_components,
        })?;
    if let Some(bad) = feats.iter().find(|f| f.n_rows() > 0 && f.dim() != dim) {
        return Err(GmmError::Dimension {
            expected: dim,
            found: bad.dim(),
        });
    }
    let n_frames: usize = feats.iter().map(|f| f.n_rows()).sum();
    if n_frames < cfg.n_components || cfg.n_components == 0 {
        return Err(GmmError::TooFewFrames {
            frames: n_frames,
            components: cfg.n_components,
        });
    }
    if feats.iter().any(|f| f.as_slice().iter().any(|v| !v.is_finite())) {
        return Err(GmmError::NonFinite);
    }

    // Global moments for the variance floor and the initial variances.
    let mut mean = vec![0.0; dim];
    for f in feats {
        for row in f.rows() {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_frames as f64);
    let mut var = vec![0.0; dim];
    for f in feats {
        for row in f.rows() {
            var.iter_mut()
                .zip(row.iter().zip(&mean))
                .for_each(|(v, (x, m))| *v += (x - m) * (x - m));
        }
    }
    var.iter_mut().for_each(|v| *v /= n_frames as f64);
    let var_floor: Vec<f64> = var
        .iter()
        .map(|v| (v * cfg.var_floor_ratio).max(f64::MIN_POSITIVE))
        .collect();

    let centers = kmeans_init(feats, n_frames, dim, cfg);
    let c = cfg.n_components;
    let init_var: Vec<f64> = (0..c)
        .flat_map(|_| var.iter().zip(&var_floor).map(|(v, f)| v.max(*f)))
        .collect();
    let mut model = GmmModel::with_floor(
        vec![1.0 / c as f64; c],
        centers,
        init_var,
        var_floor,
        dim,
        cfg.seed,
    )?;

    let chunks = chunks(feats);
    let mut lls = Vec::with_capacity(cfg.n_iters + 1);
    for _ in 0..cfg.n_iters {
        let acc = e_step(&model, &chunks);
        lls.push(acc.ll / n_frames as f64);
        model = m_step(&model, &acc, n_frames)?;
    }
    let fin = e_step(&model, &chunks);
    lls.push(fin.ll / n_frames as f64);
    log::debug!("UBM training log-likelihoods: {lls:?}");
    Ok(UbmTraining {
        model,
        log_likelihoods: lls,
    })
}

/// k-means++ seeding on a seeded subsample, refined by Lloyd iterations.
fn kmeans_init(feats: &[&FeatureMatrix], n_frames: usize, dim: usize, cfg: &UbmConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let all_rows: Vec<&[f64]> = feats.iter().flat_map(|f| f.rows()).collect();
    let sample: Vec<&[f64]> = if n_frames <= cfg.init_sample.max(cfg.n_components) {
        all_rows
    } else {
        let k = cfg.init_sample.max(cfg.n_components);
        rand::seq::index::sample(&mut rng, n_frames, k)
            .into_iter()
            .map(|i| all_rows[i])
            .collect()
    };
    let c = cfg.n_components;
    let dist2 = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };

    let mut centers: Vec<f64> = Vec::with_capacity(c * dim);
    centers.extend_from_slice(sample[rng.random_range(0..sample.len())]);
    let mut d2: Vec<f64> = sample.iter().map(|x| dist2(x, &centers[..dim])).collect();
    for k in 1..c {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = d2.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..sample.len())
        };
        centers.extend_from_slice(sample[idx]);
        let new_c = &centers[k * dim..(k + 1) * dim];
        d2.par_iter_mut()
            .zip(sample.par_iter())
            .for_each(|(d, x)| *d = d.min(dist2(x, new_c)));
    }

    for _ in 0..cfg.kmeans_iters {
        let assign: Vec<usize> = sample
            .par_iter()
            .map(|x| {
                (0..c)
                    .map(|k| (k, dist2(x, &centers[k * dim..(k + 1) * dim])))
                    .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
                    .0
            })
            .collect();
        let mut sums = vec![0.0; c * dim];
        let mut counts = vec![0usize; c];
        for (x, &k) in sample.iter().zip(&assign) {
            counts[k] += 1;
            sums[k * dim..(k + 1) * dim]
                .iter_mut()
                .zip(x.iter())
                .for_each(|(s, v)| *s += v);
        }
        for k in 0..c {
            if counts[k] > 0 {
                for d in 0..dim {
                    centers[k * dim + d] = sums[k * dim + d] / counts[k] as f64;
                }
            }
        }
    }
    centers
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMeta;
    use rand_distr::StandardNormal;

    fn matrix(rows: Vec<Vec<f64>>) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows, FeatureMeta::default()).unwrap()
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    }

    fn random_model(rng: &mut ChaCha8Rng, c: usize, dim: usize) -> GmmModel {
        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let w = raw.iter().map(|x| x / s).collect();
        let means = (0..c * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let vars = (0..c * dim).map(|_| rng.random_range(0.3..2.0)).collect();
        GmmModel::new(w, means, vars, dim).unwrap()
    }

    #[test]
    fn gaussian_at_mean() {
        let m = GmmModel::new(vec![1.0], vec![0.3, -0.7], vec![1.0, 1.0], 2).unwrap();
        let ll = m.log_likelihood(&[0.3, -0.7]).unwrap();
        assert!((ll + (2.0 * PI).ln()).abs() < 1e-12);
        assert!(matches!(m.log_likelihood(&[0.0]), Err(GmmError::Dimension { .. })));
    }

    #[test]
    fn degenerate_weights() {
        let m = GmmModel::new(vec![1.0, 0.0], vec![0.0, 5.0], vec![2.0, 1.0], 1).unwrap();
        let single = GmmModel::new(vec![1.0], vec![0.0], vec![2.0], 1).unwrap();
        for x in [-1.0, 0.0, 2.5] {
            assert_eq!(m.log_likelihood(&[x]).unwrap(), single.log_likelihood(&[x]).unwrap());
        }
    }

    #[test]
    fn log_likelihood_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = random_model(&mut rng, 5, 3);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut total = 0.0;
            for c in 0..5 {
                let mut dens = m.weights()[c];
                for d in 0..3 {
                    let v = m.variance(c)[d];
                    let z = x[d] - m.mean(c)[d];
                    dens *= (-0.5 * z * z / v).exp() / (2.0 * PI * v).sqrt();
                }
                total += dens;
            }
            assert!((m.log_likelihood(&x).unwrap() - total.ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn single_component_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = random_rows(&mut rng, 500, 3)
            .into_iter()
            .map(|r| vec![r[0] * 2.0 + 1.0, r[1] * 0.5 - 3.0, r[2]])
            .collect();
        let n = rows.len() as f64;
        let f = matrix(rows.clone());
        let cfg = UbmConfig {
            n_components: 1,
            n_iters: 3,
            ..UbmConfig::default()
        };
        let t = train_ubm(&[&f], &cfg).unwrap();
        for d in 0..3 {
            let mean = rows.iter().map(|r| r[d]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / n;
            assert!((t.model.mean(0)[d] - mean).abs() < 1e-8);
            assert!((t.model.variance(0)[d] - var).abs() < 1e-8);
        }
    }

    #[test]
    fn two_cluster_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rows = Vec::new();
        for i in 0..4000 {
            let centre = if i % 2 == 0 { 5.0 } else { -5.0 };
            rows.push(vec![
                centre + rng.sample::<f64, _>(StandardNormal),
                centre + rng.sample::<f64, _>(StandardNormal),
            ]);
        }
        let f = matrix(rows);
        let cfg = UbmConfig {
            n_components: 2,
            n_iters: 20,
            seed: 1,
            ..UbmConfig::default()
        };
        let t = train_ubm(&[&f], &cfg).unwrap();
        let mut found: Vec<(f64, f64, f64)> = (0..2)
            .map(|c| (t.model.mean(c)[0], t.model.mean(c)[1], t.model.weights()[c]))
            .collect();
        found.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for ((mx, my, w), truth) in found.iter().zip([-5.0, 5.0]) {
            assert!((mx - truth).abs() < 0.1 && (my - truth).abs() < 0.1);
            assert!((w - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn em_is_monotone_and_floored() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = matrix(random_rows(&mut rng, 3000, 4));
        let cfg = UbmConfig {
            n_components: 8,
            n_iters: 25,
            seed: 2,
            ..UbmConfig::default()
        };
        let t = train_ubm(&[&f], &cfg).unwrap();
        assert_eq!(t.log_likelihoods.len(), 26);
        for w in t.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
        let floor = t.model.var_floor();
        for c in 0..8 {
            for d in 0..4 {
                assert!(t.model.variance(c)[d] >= floor[d]);
            }
        }
        assert!((t.model.weights().iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn training_errors() {
        let f = matrix(vec![vec![0.0, 1.0]; 3]);
        let cfg = UbmConfig {
            n_components: 4,
            ..UbmConfig::default()
        };
        assert!(matches!(train_ubm(&[&f], &cfg), Err(GmmError::TooFewFrames { .. })));
        let bad = matrix(vec![vec![0.0, f64::NAN]; 10]);
        let cfg = UbmConfig {
            n_components: 2,
            ..UbmConfig::default()
        };
        assert!(matches!(train_ubm(&[&bad], &cfg), Err(GmmError::NonFinite)));
    }

    #[test]
    fn stats_single_component() {
        let m = GmmModel::new(vec![1.0], vec![1.0, -1.0], vec![1.0, 4.0], 2).unwrap();
        let f = matrix(vec![vec![2.0, 0.0], vec![0.0, 1.0], vec![3.0, -3.0]]);
        let s = accumulate_stats(&m, &f).unwrap();
        assert_eq!(s.n, vec![3.0]);
        assert!((s.f[0] - 2.0).abs() < 1e-15);
        assert!((s.f[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn stats_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = random_model(&mut rng, 3, 2);
        let rows = random_rows(&mut rng, 50, 2);
        let s = accumulate_stats(&m, &matrix(rows.clone())).unwrap();
        let mut n = [0.0; 3];
        let mut f = [0.0; 6];
        for x in &rows {
            let dens: Vec<f64> = (0..3)
                .map(|c| {
                    let mut p = m.weights()[c];
                    for d in 0..2 {
                        let v = m.variance(c)[d];
                        p *= (-0.5 * (x[d] - m.mean(c)[d]).powi(2) / v).exp() / (2.0 * PI * v).sqrt();
                    }
                    p
                })
                .collect();
            let total: f64 = dens.iter().sum();
            let mut gsum = 0.0;
            for c in 0..3 {
                let g = dens[c] / total;
                gsum += g;
                n[c] += g;
                for d in 0..2 {
                    f[c * 2 + d] += g * (x[d] - m.mean(c)[d]);
                }
            }
            assert!((gsum - 1.0).abs() < 1e-12);
        }
        for c in 0..3 {
            assert!((s.n[c] - n[c]).abs() < 1e-10);
        }
        for i in 0..6 {
            assert!((s.f[i] - f[i]).abs() < 1e-10);
        }
        assert!((s.total_count() - 50.0).abs() < 1e-6);
    }

    #[test]
    fn posteriors_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_model(&mut rng, 6, 3);
        let mut post = vec![0.0; 6];
        for x in random_rows(&mut rng, 20, 3) {
            m.posteriors(&x, &mut post).unwrap();
            assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stats_are_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_model(&mut rng, 4, 3);
        let a = random_rows(&mut rng, 3000, 3);
        let b = random_rows(&mut rng, 1700, 3);
        let joint: Vec<Vec<f64>> = a.iter().chain(&b).cloned().collect();
        let mut sum = accumulate_stats(&m, &matrix(a)).unwrap();
        sum += &accumulate_stats(&m, &matrix(b)).unwrap();
        let whole = accumulate_stats(&m, &matrix(joint)).unwrap();
        for (x, y) in sum.n.iter().zip(&whole.n) {
            assert!((x - y).abs() < 1e-10 * x.abs().max(1.0));
        }
        for (x, y) in sum.f.iter().zip(&whole.f) {
            assert!((x - y).abs() < 1e-10 * x.abs().max(1.0));
        }
    }

    #[test]
    fn model_round_trip_and_checksum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_model(&mut rng, 3, 2);
        let back = GmmModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.checksum(), m.checksum());
        let other = random_model(&mut rng, 3, 2);
        assert_ne!(other.checksum(), m.checksum());
        let mut bytes = m.to_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(GmmModel::from_bytes(&bytes).is_err());
    }

    #[test]
    fn frame_order_invariance_with_fixed_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_model(&mut rng, 4, 2);
        let rows = random_rows(&mut rng, 5000, 2);
        let mut shuffled = rows.clone();
        shuffled.reverse();
        let a = accumulate_stats(&m, &matrix(rows)).unwrap();
        let b = accumulate_stats(&m, &matrix(shuffled)).unwrap();
        for (x, y) in a.n.iter().zip(&b.n).chain(a.f.iter().zip(&b.f)) {
            assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
        }
    }
}
