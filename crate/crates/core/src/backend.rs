//! Gaussian backend over iVectors.
//!
//! Each class gets a mean and a maximum-likelihood covariance `Σ_c`. The
//! shared covariance `Σ_s` is the unweighted average of the `Σ_c`, and the
//! class-dependent model uses the blend `Σ̃_c = α Σ_s + (1 − α) Σ_c`.
//! Class priors are not used.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{BinError, BinReader, BinWriter};

const MAGIC: &[u8; 8] = b"ASCBKND\0";
const VERSION: u32 = 1;
const RIDGE_ATTEMPTS: usize = 10;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("class {label:?} has {count} samples; at least 2 required")]
    TooFewSamples { label: String, count: usize },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("non-finite iVector value")]
    NonFinite,
    #[error("covariance for {0:?} is not positive definite after ridge repair")]
    Degenerate(String),
    #[error("model file: {0}")]
    Container(#[from] BinError),
}

/// Which decision rule to score with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Class-dependent regularized covariances, with log-determinant term.
    #[default]
    Regularized,
    /// Shared covariance only.
    Shared,
}

/// Cholesky factor of `Σ + εI` with its log-determinant.
#[derive(Debug, Clone)]
struct Factor {
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
    ridge: f64,
}

impl Factor {
    fn quad(&self, d: &DVector<f64>) -> f64 {
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(d)
            .expect("Cholesky factor has a positive diagonal");
        y.norm_squared()
    }
}

fn factorize(sigma: &DMatrix<f64>, ridge: Option<f64>, what: &str) -> Result<Factor, BackendError> {
    let chol_of = |eps: f64| {
        let mut m = sigma.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += eps;
        }
        Cholesky::new(m)
    };
    let done = |chol: Cholesky<f64, Dyn>, ridge: f64| {
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Factor { chol, logdet, ridge }
    };
    if let Some(eps) = ridge {
        return chol_of(eps)
            .map(|c| done(c, eps))
            .ok_or_else(|| BackendError::Degenerate(what.to_string()));
    }
    if let Some(c) = chol_of(0.0) {
        return Ok(done(c, 0.0));
    }
    let r = sigma.nrows() as f64;
    let mut eps = 1e-8 * sigma.trace() / r;
    if !(eps > 0.0) {
        return Err(BackendError::Degenerate(what.to_string()));
    }
    for _ in 0..RIDGE_ATTEMPTS {
        if let Some(c) = chol_of(eps) {
            log::warn!("backend: added ridge {eps:e} to covariance of {what}");
            return Ok(done(c, eps));
        }
        eps *= 10.0;
    }
    Err(BackendError::Degenerate(what.to_string()))
}

#[derive(Debug, Clone)]
pub struct BackendModel {
    labels: Vec<String>,
    counts: Vec<usize>,
    alpha: f64,
    dim: usize,
    means: Vec<DVector<f64>>,
    class_cov: Vec<DMatrix<f64>>,
    shared_cov: DMatrix<f64>,
    blended: Vec<DMatrix<f64>>,
    blended_factors: Vec<Factor>,
    shared_factor: Factor,
}

impl PartialEq for BackendModel {
    fn eq(&self, other: &Self) -> bool {
        self.to_bytes() == other.to_bytes()
    }
}

impl BackendModel {
    fn assemble(
        labels: Vec<String>,
        counts: Vec<usize>,
        alpha: f64,
        means: Vec<DVector<f64>>,
        class_cov: Vec<DMatrix<f64>>,
        ridges: Option<(Vec<f64>, f64)>,
    ) -> Result<Self, BackendError> {
        let dim = means[0].len();
        let k = class_cov.len() as f64;
        let mut shared_cov = DMatrix::<f64>::zeros(dim, dim);
        for c in &class_cov {
            shared_cov += c;
        }
        shared_cov /= k;
        let blended: Vec<DMatrix<f64>> = class_cov
            .iter()
            .map(|c| {
                if alpha == 1.0 {
                    shared_cov.clone()
                } else if alpha == 0.0 {
                    c.clone()
                } else {
                    &shared_cov * alpha + c * (1.0 - alpha)
                }
            })
            .collect();
        let blended_factors = blended
            .iter()
            .zip(&labels)
            .enumerate()
            .map(|(i, (s, l))| factorize(s, ridges.as_ref().map(|r| r.0[i]), l))
            .collect::<Result<Vec<_>, _>>()?;
        let shared_factor = factorize(&shared_cov, ridges.as_ref().map(|r| r.1), "shared")?;
        Ok(Self {
            labels,
            counts,
            alpha,
            dim,
            means,
            class_cov,
            shared_cov,
            blended,
            blended_factors,
            shared_factor,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self, class: usize) -> &DVector<f64> {
        &self.means[class]
    }

    pub fn class_covariance(&self, class: usize) -> &DMatrix<f64> {
        &self.class_cov[class]
    }

    pub fn shared_covariance(&self) -> &DMatrix<f64> {
        &self.shared_cov
    }

    /// `Σ̃_c` before any ridge repair.
    pub fn regularized_covariance(&self, class: usize) -> &DMatrix<f64> {
        &self.blended[class]
    }

    /// Ridge added to `Σ̃_c` to make it factorizable (0 when none was needed).
    pub fn ridge(&self, class: usize) -> f64 {
        self.blended_factors[class].ridge
    }

    /// Per-class scores in label order.
    pub fn score(&self, w: &[f64], mode: ScoreMode) -> Result<Vec<f64>, BackendError> {
        if w.len() != self.dim {
            return Err(BackendError::Dimension {
                expected: self.dim,
                found: w.len(),
            });
        }
        let w = DVector::from_column_slice(w);
        Ok(self
            .means
            .iter()
            .enumerate()
            .map(|(c, mu)| {
                let d = &w - mu;
                match mode {
                    ScoreMode::Regularized => {
                        let f = &self.blended_factors[c];
                        -0.5 * f.logdet - 0.5 * f.quad(&d)
                    }
                    ScoreMode::Shared => -0.5 * self.shared_factor.quad(&d),
                }
            })
            .collect())
    }

    /// Index of the best-scoring class; ties go to the earliest label.
    pub fn classify_index(&self, w: &[f64], mode: ScoreMode) -> Result<usize, BackendError> {
        let scores = self.score(w, mode)?;
        Ok(argmax(&scores))
    }

    pub fn classify(&self, w: &[f64], mode: ScoreMode) -> Result<&str, BackendError> {
        Ok(&self.labels[self.classify_index(w, mode)?])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(MAGIC, VERSION);
        w.f64(self.alpha);
        w.u64(self.dim as u64);
        w.u64(self.labels.len() as u64);
        for (i, l) in self.labels.iter().enumerate() {
            w.str(l);
            w.u64(self.counts[i] as u64);
            w.f64s(self.means[i].as_slice());
            w.f64s(self.class_cov[i].as_slice());
            w.f64(self.blended_factors[i].ridge);
        }
        w.f64s(self.shared_cov.as_slice());
        w.f64(self.shared_factor.ridge);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BackendError> {
        let mut r = BinReader::open(bytes, MAGIC, "backend", VERSION)?;
        let alpha = r.f64()?;
        let dim = r.u64()? as usize;
        let k = r.u64()? as usize;
        let malformed = |m: &str| BackendError::Container(BinError::Malformed(m.into()));
        if k < 2 || dim == 0 {
            return Err(malformed("backend shape"));
        }
        let (mut labels, mut counts, mut means, mut covs, mut ridges) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..k {
            labels.push(r.str()?);
            counts.push(r.u64()? as usize);
            let m = r.f64s()?;
            let c = r.f64s()?;
            if m.len() != dim || c.len() != dim * dim {
                return Err(malformed("class parameter length"));
            }
            means.push(DVector::from_vec(m));
            covs.push(DMatrix::from_vec(dim, dim, c));
            ridges.push(r.f64()?);
        }
        let shared = r.f64s()?;
        let shared_ridge = r.f64()?;
        r.finish()?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(BackendError::InvalidAlpha(alpha));
        }
        let model = Self::assemble(labels, counts, alpha, means, covs, Some((ridges, shared_ridge)))?;
        if model.shared_cov.as_slice() != shared.as_slice() {
            return Err(malformed("shared covariance does not match class covariances"));
        }
        Ok(model)
    }
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Fits the backend to labelled iVectors. Labels are ordered lexicographically.
pub fn train_backend<L: AsRef<str>, V: AsRef<[f64]>>(
    samples: &[(L, V)],
    alpha: f64,
) -> Result<BackendModel, BackendError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(BackendError::InvalidAlpha(alpha));
    }
    let mut groups: BTreeMap<&str, Vec<&[f64]>> = BTreeMap::new();
    let dim = samples.first().map(|s| s.1.as_ref().len()).unwrap_or(0);
    for (l, v) in samples {
        let v = v.as_ref();
        if v.len() != dim || dim == 0 {
            return Err(BackendError::Dimension {
                expected: dim,
                found: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(BackendError::NonFinite);
        }
        groups.entry(l.as_ref()).or_default().push(v);
    }
    if groups.len() < 2 {
        return Err(BackendError::TooFewClasses(groups.len()));
    }
    if let Some((l, vs)) = groups.iter().find(|(_, vs)| vs.len() < 2) {
        return Err(BackendError::TooFewSamples {
            label: l.to_string(),
            count: vs.len(),
        });
    }
    let mut labels = Vec::new();
    let mut counts = Vec::new();
    let mut means = Vec::new();
    let mut covs = Vec::new();
    for (l, vs) in &groups {
        let n = vs.len() as f64;
        let mut mu = DVector::<f64>::zeros(dim);
        for v in vs {
            mu += DVector::from_column_slice(v);
        }
        mu /= n;
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for v in vs {
            let d = DVector::from_column_slice(v) - &mu;
            cov.ger(1.0, &d, &d, 1.0);
        }
        cov /= n;
        labels.push(l.to_string());
        counts.push(vs.len());
        means.push(mu);
        covs.push(cov);
    }
    BackendModel::assemble(labels, counts, alpha, means, covs, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cloud(rng: &mut ChaCha8Rng, centre: &[f64], n: usize, spread: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                centre
                    .iter()
                    .map(|c| c + spread * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }

    fn labelled(rng: &mut ChaCha8Rng, k: usize, dim: usize, n: usize, sep: f64) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for c in 0..k {
            let centre: Vec<f64> = (0..dim).map(|d| if d == c % dim { sep } else { 0.0 } * (1 + c / dim) as f64).collect();
            let spread = rng.random_range(0.7..1.3);
            for v in cloud(rng, &centre, n, spread) {
                out.push((format!("class{c}"), v));
            }
        }
        out
    }

    #[test]
    fn alpha_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = labelled(&mut rng, 3, 3, 20, 3.0);
        let one = train_backend(&data, 1.0).unwrap();
        let zero = train_backend(&data, 0.0).unwrap();
        for c in 0..3 {
            assert_eq!(one.regularized_covariance(c), one.shared_covariance());
            assert_eq!(zero.regularized_covariance(c), zero.class_covariance(c));
        }
        let mid = train_backend(&data, 0.7).unwrap();
        for c in 0..3 {
            let expect = mid.shared_covariance() * 0.7 + mid.class_covariance(c) * 0.3;
            assert!((mid.regularized_covariance(c) - expect).amax() < 1e-12);
        }
    }

    #[test]
    fn shared_is_unweighted_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut data: Vec<(String, Vec<f64>)> = cloud(&mut rng, &[0.0, 0.0], 5, 1.0)
            .into_iter()
            .map(|v| ("a".to_string(), v))
            .collect();
        data.extend(cloud(&mut rng, &[3.0, 1.0], 200, 2.0).into_iter().map(|v| ("b".to_string(), v)));
        let m = train_backend(&data, 0.5).unwrap();
        let avg = (m.class_covariance(0) + m.class_covariance(1)) / 2.0;
        assert!((m.shared_covariance() - avg).amax() < 1e-10);
        assert_eq!(m.counts(), &[5, 200]);
    }

    #[test]
    fn score_matches_dense_evaluation() {
        let data = vec![
            ("x", vec![0.0, 0.0]),
            ("x", vec![2.0, 1.0]),
            ("x", vec![1.0, -1.0]),
            ("y", vec![5.0, 5.0]),
            ("y", vec![6.0, 3.0]),
            ("y", vec![4.0, 5.5]),
        ];
        let m = train_backend(&data, 0.7).unwrap();
        let w = [1.5, 2.5];
        let s = m.score(&w, ScoreMode::Regularized).unwrap();
        for c in 0..2 {
            let sig = m.regularized_covariance(c);
            let d = DVector::from_column_slice(&w) - m.mean(c);
            let inv = sig.clone().try_inverse().unwrap();
            let expect = -0.5 * sig.determinant().ln() - 0.5 * (d.transpose() * inv * &d)[(0, 0)];
            assert!((s[c] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn mean_attains_max_with_equal_covariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = labelled(&mut rng, 3, 2, 30, 4.0);
        let m = train_backend(&data, 1.0).unwrap();
        for c in 0..3 {
            let w: Vec<f64> = m.mean(c).iter().copied().collect();
            assert_eq!(m.classify_index(&w, ScoreMode::Regularized).unwrap(), c);
        }
    }

    #[test]
    fn ties_go_to_first_label() {
        let pts = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![-1.0, 0.5]];
        let mut data = Vec::new();
        for l in ["b", "a"] {
            for p in &pts {
                data.push((l.to_string(), p.clone()));
            }
        }
        let m = train_backend(&data, 0.3).unwrap();
        assert_eq!(m.classify(&[0.2, 0.3], ScoreMode::Regularized).unwrap(), "a");
        assert_eq!(m.classify(&[100.0, -50.0], ScoreMode::Shared).unwrap(), "a");
    }

    #[test]
    fn separated_clouds_are_classified() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let centres = [[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 5.0]];
        let mut train = Vec::new();
        for (c, centre) in centres.iter().enumerate() {
            for v in cloud(&mut rng, centre, 100, 1.0) {
                train.push((c.to_string(), v));
            }
        }
        let m = train_backend(&train, 0.7).unwrap();
        let mut correct = 0;
        let mut total = 0;
        for (c, centre) in centres.iter().enumerate() {
            for v in cloud(&mut rng, centre, 250, 1.0) {
                total += 1;
                if m.classify(&v, ScoreMode::Regularized).unwrap() == c.to_string() {
                    correct += 1;
                }
            }
        }
        assert!(correct as f64 / total as f64 >= 0.99);
        assert!(m.classify(&[1e6, -1e6, 1e6], ScoreMode::Regularized).is_ok());
    }

    #[test]
    fn training_errors() {
        let one_class = vec![("a", vec![1.0]), ("a", vec![2.0])];
        assert!(matches!(train_backend(&one_class, 0.5), Err(BackendError::TooFewClasses(1))));
        let thin = vec![("a", vec![1.0]), ("a", vec![2.0]), ("b", vec![0.0])];
        assert!(matches!(train_backend(&thin, 0.5), Err(BackendError::TooFewSamples { .. })));
        let same = vec![("a", vec![1.0, 1.0]); 3]
            .into_iter()
            .chain(vec![("b", vec![1.0, 1.0]); 3])
            .collect::<Vec<_>>();
        assert!(matches!(train_backend(&same, 0.5), Err(BackendError::Degenerate(_))));
        let ok = vec![("a", vec![1.0]), ("a", vec![2.0]), ("b", vec![0.0]), ("b", vec![3.0])];
        assert!(matches!(train_backend(&ok, 1.5), Err(BackendError::InvalidAlpha(_))));
        let m = train_backend(&ok, 0.5).unwrap();
        assert!(matches!(m.score(&[1.0, 2.0], ScoreMode::Shared), Err(BackendError::Dimension { .. })));
    }

    #[test]
    fn rank_deficient_class_is_repaired() {
        // Class "a" lies on a line, so Σ_a is singular; with α = 0 the
        // blended matrix needs a ridge.
        let data = vec![
            ("a", vec![0.0, 0.0]),
            ("a", vec![1.0, 1.0]),
            ("a", vec![2.0, 2.0]),
            ("b", vec![0.0, 1.0]),
            ("b", vec![1.0, 0.0]),
            ("b", vec![2.0, 3.0]),
        ];
        let m = train_backend(&data, 0.0).unwrap();
        assert!(m.ridge(0) > 0.0);
        assert_eq!(m.ridge(1), 0.0);
        assert!(m.score(&[0.5, 0.5], ScoreMode::Regularized).unwrap().iter().all(|s| s.is_finite()));
    }

    #[test]
    fn file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = labelled(&mut rng, 3, 4, 10, 3.0);
        let m = train_backend(&data, 0.7).unwrap();
        let bytes = m.to_bytes();
        let back = BackendModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let w = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(
            back.score(&w, ScoreMode::Regularized).unwrap(),
            m.score(&w, ScoreMode::Regularized).unwrap()
        );
    }

    #[test]
    fn alpha_one_matches_shared_decisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = labelled(&mut rng, 4, 3, 25, 2.0);
        let m = train_backend(&data, 1.0).unwrap();
        for _ in 0..300 {
            let w: Vec<f64> = (0..3).map(|_| rng.random_range(-6.0..6.0)).collect();
            assert_eq!(
                m.classify_index(&w, ScoreMode::Regularized).unwrap(),
                m.classify_index(&w, ScoreMode::Shared).unwrap()
            );
        }
    }
}
