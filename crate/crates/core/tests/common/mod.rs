//! Independent reference implementations used by the acceptance suite.
//! Nothing here calls into the library's numerical code.

#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

/// Unit-peak HTK mel triangles over `n_bins` one-sided bins, 0 Hz to Nyquist.
pub fn naive_mel_weights(n_bins: usize, sample_rate: f64, n_filters: usize) -> Vec<Vec<f64>> {
    let n_fft = (n_bins - 1) * 2;
    let to_mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let from_mel = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..n_filters + 2)
        .map(|i| from_mel(top * i as f64 / (n_filters + 1) as f64))
        .collect();
    (0..n_filters)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * sample_rate / n_fft as f64;
                    ((f - lo) / (mid - lo)).min((hi - f) / (hi - mid)).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Log-mel-DCT cepstra of one power spectrum row, written out longhand.
pub fn naive_mfcc(power: &[f64], sample_rate: f64, n_filters: usize, n_ceps: usize) -> Vec<f64> {
    let weights = naive_mel_weights(power.len(), sample_rate, n_filters);
    let log_energy: Vec<f64> = weights
        .iter()
        .map(|w| (w.iter().zip(power).map(|(a, p)| a * p).sum::<f64>() + 1e-10).ln())
        .collect();

    let n = n_filters as f64;
    (0..n_ceps)
        .map(|k| {
            let mut s = 0.0;
            for (m, e) in log_energy.iter().enumerate() {
                s += e * (PI * k as f64 * (2 * m + 1) as f64 / (2.0 * n)).cos();
            }
            s * if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() }
        })
        .collect()
}

/// Periodic Hann window, zero padding to `n_fft`, and an O(N²) DFT.
pub fn naive_periodogram(frame: &[f64], n_fft: usize) -> Vec<f64> {
    let len = frame.len() as f64;
    let windowed: Vec<f64> = frame
        .iter()
        .enumerate()
        .map(|(i, x)| x * (0.5 - 0.5 * (2.0 * PI * i as f64 / len).cos()))
        .collect();
    (0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, x) in windowed.iter().enumerate() {
                let ph = -2.0 * PI * (k * i % n_fft) as f64 / n_fft as f64;
                re += x * ph.cos();
                im += x * ph.sin();
            }
            re * re + im * im
        })
        .collect()
}

/// Sum of squared periodic Hann coefficients.
pub fn hann_energy(len: usize) -> f64 {
    (0..len)
        .map(|i| {
            let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos();
            w * w
        })
        .sum()
}

/// Posterior mean of the latent factor built from explicit supervector
/// matrices: `(I + TᵀΣ⁻¹NT)⁻¹ TᵀΣ⁻¹f`.
pub fn dense_posterior_mean(
    t_rows: &[f64],
    rank: usize,
    variances: &[f64],
    n: &[f64],
    f: &[f64],
    dim: usize,
) -> Vec<f64> {
    let d = variances.len();
    let t = DMatrix::from_row_slice(d, rank, t_rows);
    let sigma = DMatrix::from_diagonal(&DVector::from_column_slice(variances));
    let counts = DMatrix::from_diagonal(&DVector::from_iterator(d, (0..d).map(|j| n[j / dim])));
    let sigma_inv = sigma.try_inverse().unwrap();
    let precision = DMatrix::identity(rank, rank) + t.transpose() * &sigma_inv * counts * &t;
    let rhs = t.transpose() * sigma_inv * DVector::from_column_slice(f);
    let w = precision.lu().solve(&rhs).unwrap();
    w.iter().copied().collect()
}

/// Class means and unweighted average of ML class covariances.
pub fn lda_fit(classes: &[Vec<Vec<f64>>]) -> (Vec<DVector<f64>>, DMatrix<f64>) {
    let dim = classes[0][0].len();
    let mut means = Vec::new();
    let mut shared = DMatrix::zeros(dim, dim);
    for xs in classes {
        let mut mu = DVector::zeros(dim);
        for x in xs {
            mu += DVector::from_column_slice(x);
        }
        mu /= xs.len() as f64;
        let mut cov = DMatrix::zeros(dim, dim);
        for x in xs {
            let d = DVector::from_column_slice(x) - &mu;
            cov += &d * d.transpose();
        }
        shared += cov / xs.len() as f64;
        means.push(mu);
    }
    (means, shared / classes.len() as f64)
}

/// Linear shared-covariance decision: argmax of `wᵀΣ⁻¹μ − ½μᵀΣ⁻¹μ`.
pub fn lda_decide(means: &[DVector<f64>], shared: &DMatrix<f64>, w: &[f64]) -> usize {
    let inv = shared.clone().try_inverse().unwrap();
    let w = DVector::from_column_slice(w);
    let mut best = (0, f64::NEG_INFINITY);
    for (c, mu) in means.iter().enumerate() {
        let a = &inv * mu;
        let s = w.dot(&a) - 0.5 * mu.dot(&a);
        if s > best.1 {
            best = (c, s);
        }
    }
    best.0
}

pub fn rms_db(x: &[f64]) -> f64 {
    10.0 * (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).log10()
}

/// Active level: 10 ms frames whose 16 ms centred running power is within
/// 40 dB of the loudest frame. Direct windowed sums, no prefix tricks.
pub fn naive_active_db(x: &[f64], sample_rate: f64) -> f64 {
    let frame = (0.010 * sample_rate).round() as usize;
    let smooth = (0.016 * sample_rate).round() as usize;
    let half = smooth / 2;
    let n = x.len();
    let mut frames = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + frame).min(n);
        let mut env = 0.0;
        for i in start..end {
            let lo = i.saturating_sub(half);
            let hi = (i + smooth - half).min(n);
            env += x[lo..hi].iter().map(|v| v * v).sum::<f64>() / (hi - lo) as f64;
        }
        frames.push((start, end, env / (end - start) as f64));
        start = end;
    }
    let loudest = frames.iter().map(|f| f.2).fold(0.0, f64::max);
    let threshold = loudest * 1e-4;
    let (mut e, mut c) = (0.0, 0usize);
    for &(s, t, env) in &frames {
        if env >= threshold {
            e += x[s..t].iter().map(|v| v * v).sum::<f64>();
            c += t - s;
        }
    }
    10.0 * (e / c as f64).log10()
}

/// Largest principal angle in degrees between the column spans of `a` and `b`.
pub fn max_principal_angle_deg(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let s = (qa.transpose() * qb).singular_values();
    let smallest = s.iter().copied().fold(f64::INFINITY, f64::min).min(1.0);
    smallest.acos().to_degrees()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}
