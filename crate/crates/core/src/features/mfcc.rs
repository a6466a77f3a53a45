use std::f64::consts::PI;

use super::{FeatureError, FeatureMatrix, FeatureMeta, MelFilterBank, Spectrogram};

/// Floor added to mel energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

/// Orthonormal DCT-II basis, `n_out × n_in`.
pub(crate) fn dct2_basis(n_in: usize, n_out: usize) -> Vec<f64> {
    let n = n_in as f64;
    let mut basis = Vec::with_capacity(n_in * n_out);
    for k in 0..n_out {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for m in 0..n_in {
            basis.push(scale * (PI * k as f64 * (m as f64 + 0.5) / n).cos());
        }
    }
    basis
}

/// Cepstral coefficients `c0..c(n_ceps-1)` of every spectrogram frame.
pub fn mfcc(
    spec: &Spectrogram,
    bank: &MelFilterBank,
    n_ceps: usize,
    meta: FeatureMeta,
) -> Result<FeatureMatrix, FeatureError> {
    bank.check_compatible(spec)?;
    let n_filters = bank.n_filters();
    if n_ceps == 0 || n_ceps > n_filters {
        return Err(FeatureError::InvalidConfig(format!(
            "n_ceps {n_ceps} must be in 1..={n_filters}"
        )));
    }
    let basis = dct2_basis(n_filters, n_ceps);
    let mut energies = vec![0.0; n_filters];
    let mut data = Vec::with_capacity(spec.n_frames() * n_ceps);
    for row in spec.rows() {
        bank.apply(row, &mut energies);
        energies.iter_mut().for_each(|e| *e = (*e + LOG_FLOOR).ln());
        for k in 0..n_ceps {
            let b = &basis[k * n_filters..(k + 1) * n_filters];
            data.push(b.iter().zip(&energies).map(|(b, e)| b * e).sum());
        }
    }
    FeatureMatrix::from_flat(data, n_ceps, meta)
}
