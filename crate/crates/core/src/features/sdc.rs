use serde::{Deserialize, Serialize};

use super::{FeatureError, FeatureMatrix};

/// Shifted-delta-cepstra layout.
///
/// For frame `t`, block `j ∈ {-K..=K}` is the difference
/// `c(t + jP + M) - c(t + jP - M)` over the first `N` static coefficients.
/// Frame indices outside the recording are clamped to its ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdcConfig {
    /// Delta spread in frames.
    pub m: usize,
    /// Context blocks on each side of the current frame.
    pub k: usize,
    /// Leading static coefficients that are differenced.
    pub n: usize,
    /// Shift between successive blocks in frames.
    pub p: usize,
}

impl Default for SdcConfig {
    fn default() -> Self {
        Self {
            m: 2,
            k: 2,
            n: 11,
            p: 3,
        }
    }
}

impl SdcConfig {
    pub fn appended_dim(&self) -> usize {
        (2 * self.k + 1) * self.n
    }

    fn validate(&self, static_dim: usize) -> Result<(), FeatureError> {
        if self.m == 0 || self.k == 0 || self.n == 0 || self.p == 0 {
            return Err(FeatureError::InvalidConfig(
                "SDC parameters must all be positive".into(),
            ));
        }
        if self.n > static_dim {
            return Err(FeatureError::InvalidConfig(format!(
                "SDC N = {} exceeds static dimension {static_dim}",
                self.n
            )));
        }
        Ok(())
    }
}

/// Appends `(2K+1)·N` shifted-delta columns to every row of `feats`.
pub fn append_sdc(feats: &FeatureMatrix, cfg: &SdcConfig) -> Result<FeatureMatrix, FeatureError> {
    let static_dim = feats.dim();
    cfg.validate(static_dim)?;
    let t_len = feats.n_rows();
    if t_len == 0 {
        return Err(FeatureError::Empty);
    }
    let last = t_len as isize - 1;
    let clamp = |i: isize| i.clamp(0, last) as usize;
    let (m, k, p) = (cfg.m as isize, cfg.k as isize, cfg.p as isize);
    let out_dim = static_dim + cfg.appended_dim();

    let mut data = Vec::with_capacity(t_len * out_dim);
    for t in 0..t_len as isize {
        data.extend_from_slice(feats.row(t as usize));
        for j in -k..=k {
            let centre = t + j * p;
            let ahead = feats.row(clamp(centre + m));
            let behind = feats.row(clamp(centre - m));
            data.extend(ahead[..cfg.n].iter().zip(&behind[..cfg.n]).map(|(a, b)| a - b));
        }
    }
    FeatureMatrix::from_flat(data, out_dim, feats.meta().clone())
}
