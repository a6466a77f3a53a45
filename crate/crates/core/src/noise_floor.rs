//! Per-bin noise power tracking driven by the speech presence probability.
//!
//! Each frame the noise periodogram is estimated as
//! `(1 - P)·|X|² + P·σ̂²` with `P = P(H1 | X)`, then folded into the running
//! estimate by first-order recursive smoothing. A slow average of `P`
//! detects bins where the probability has stuck near one and caps `P`
//! there so the estimate keeps moving.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::Spectrogram;

#[derive(Debug, Error, PartialEq)]
pub enum NoiseFloorError {
    #[error("no frames available for initialization")]
    Empty,
    #[error("spectrogram has {frames} frames; need more than {n_init}")]
    TooFewFrames { frames: usize, n_init: usize },
    #[error("length mismatch: state has {expected} bins, frame has {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("noise PSD must be positive, found {value} at bin {bin}")]
    NonPositivePsd { bin: usize, value: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SppParams {
    /// Fixed a-priori SNR under speech presence, in dB.
    pub xi_h1_db: f64,
    /// Prior probability of speech presence.
    pub prior_h1: f64,
    /// Smoothing constant of the stagnation detector.
    pub spp_smooth: f64,
    /// Smoothing constant of the noise PSD recursion.
    pub psd_smooth: f64,
    /// Cap applied to `P` in bins flagged as stuck.
    pub spp_clamp: f64,
    /// Smoothed probability above which a bin counts as stuck.
    pub stuck_threshold: f64,
    pub psd_floor: f64,
}

impl Default for SppParams {
    fn default() -> Self {
        Self {
            xi_h1_db: 15.0,
            prior_h1: 0.5,
            spp_smooth: 0.9,
            psd_smooth: 0.8,
            spp_clamp: 0.99,
            stuck_threshold: 0.99,
            psd_floor: 1e-12,
        }
    }
}

impl SppParams {
    pub fn validate(&self) -> Result<(), NoiseFloorError> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(NoiseFloorError::InvalidParams(format!("{name} = {v} not in (0, 1)")))
            }
        };
        unit("prior_h1", self.prior_h1)?;
        unit("spp_smooth", self.spp_smooth)?;
        unit("psd_smooth", self.psd_smooth)?;
        unit("spp_clamp", self.spp_clamp)?;
        unit("stuck_threshold", self.stuck_threshold)?;
        if !self.xi_h1_db.is_finite() {
            return Err(NoiseFloorError::InvalidParams("xi_h1_db must be finite".into()));
        }
        if !(self.psd_floor > 0.0) {
            return Err(NoiseFloorError::InvalidParams("psd_floor must be positive".into()));
        }
        Ok(())
    }

    fn xi(&self) -> f64 {
        10f64.powf(self.xi_h1_db / 10.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseFloorConfig {
    pub params: SppParams,
    /// Frames averaged to seed the estimate.
    pub n_init: usize,
}

impl Default for NoiseFloorConfig {
    fn default() -> Self {
        Self {
            params: SppParams::default(),
            n_init: 5,
        }
    }
}

/// `P(H1 | X)` for every bin.
pub fn speech_presence_prob(
    periodogram: &[f64],
    noise_psd: &[f64],
    params: &SppParams,
) -> Result<Vec<f64>, NoiseFloorError> {
    if periodogram.len() != noise_psd.len() {
        return Err(NoiseFloorError::LengthMismatch {
            expected: noise_psd.len(),
            found: periodogram.len(),
        });
    }
    let mut out = vec![0.0; periodogram.len()];
    SppKernel::new(params).eval(periodogram, noise_psd, &mut out)?;
    Ok(out)
}

struct SppKernel {
    /// `(1 - q)/q · (1 + ξ)`
    odds_scale: f64,
    /// `ξ / (1 + ξ)`
    gain: f64,
}

impl SppKernel {
    fn new(params: &SppParams) -> Self {
        let xi = params.xi();
        let q = params.prior_h1;
        Self {
            odds_scale: (1.0 - q) / q * (1.0 + xi),
            gain: xi / (1.0 + xi),
        }
    }

    fn eval(&self, x: &[f64], psd: &[f64], out: &mut [f64]) -> Result<(), NoiseFloorError> {
        for (bin, ((o, &xk), &nk)) in out.iter_mut().zip(x).zip(psd).enumerate() {
            if !(nk > 0.0) {
                return Err(NoiseFloorError::NonPositivePsd { bin, value: nk });
            }
            *o = 1.0 / (1.0 + self.odds_scale * (-(xk / nk) * self.gain).exp());
        }
        Ok(())
    }
}

/// Tracker state for one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseFloorState {
    noise_psd: Vec<f64>,
    smoothed_spp: Vec<f64>,
    frame_index: usize,
}

impl NoiseFloorState {
    /// Seeds the estimate with the per-bin mean of the first `n_init` rows.
    pub fn init<'a>(
        first_frames: impl IntoIterator<Item = &'a [f64]>,
        n_init: usize,
        params: &SppParams,
    ) -> Result<Self, NoiseFloorError> {
        if n_init == 0 {
            return Err(NoiseFloorError::Empty);
        }
        let mut sum: Option<Vec<f64>> = None;
        let mut count = 0usize;
        for row in first_frames.into_iter().take(n_init) {
            match &mut sum {
                None => sum = Some(row.to_vec()),
                Some(acc) => {
                    if acc.len() != row.len() {
                        return Err(NoiseFloorError::LengthMismatch {
                            expected: acc.len(),
                            found: row.len(),
                        });
                    }
                    acc.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                }
            }
            count += 1;
        }
        let sum = sum.ok_or(NoiseFloorError::Empty)?;
        let noise_psd = sum
            .into_iter()
            .map(|s| (s / count as f64).max(params.psd_floor))
            .collect::<Vec<_>>();
        let bins = noise_psd.len();
        Ok(Self {
            noise_psd,
            smoothed_spp: vec![0.5; bins],
            frame_index: 0,
        })
    }

    pub fn noise_psd(&self) -> &[f64] {
        &self.noise_psd
    }

    pub fn smoothed_spp(&self) -> &[f64] {
        &self.smoothed_spp
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    /// Processes one periodogram frame and returns the updated noise PSD.
    pub fn update(&mut self, periodogram: &[f64], params: &SppParams) -> Result<&[f64], NoiseFloorError> {
        let mut spp = vec![0.0; periodogram.len()];
        if periodogram.len() != self.noise_psd.len() {
            return Err(NoiseFloorError::LengthMismatch {
                expected: self.noise_psd.len(),
                found: periodogram.len(),
            });
        }
        SppKernel::new(params).eval(periodogram, &self.noise_psd, &mut spp)?;
        self.apply(periodogram, &mut spp, params);
        Ok(&self.noise_psd)
    }

    /// Update with an externally supplied presence probability, skipping
    /// the stagnation guard.
    pub fn update_with_spp(
        &mut self,
        periodogram: &[f64],
        spp: &[f64],
        params: &SppParams,
    ) -> Result<&[f64], NoiseFloorError> {
        if periodogram.len() != self.noise_psd.len() || spp.len() != self.noise_psd.len() {
            return Err(NoiseFloorError::LengthMismatch {
                expected: self.noise_psd.len(),
                found: periodogram.len().min(spp.len()),
            });
        }
        for ((n, &x), &p) in self.noise_psd.iter_mut().zip(periodogram).zip(spp) {
            let expected = noise_periodogram(x, *n, p);
            *n = (params.psd_smooth * *n + (1.0 - params.psd_smooth) * expected).max(params.psd_floor);
        }
        self.frame_index += 1;
        Ok(&self.noise_psd)
    }

    fn apply(&mut self, periodogram: &[f64], spp: &mut [f64], params: &SppParams) {
        let a_spp = params.spp_smooth;
        let a_psd = params.psd_smooth;
        for (((n, s), p), &x) in self
            .noise_psd
            .iter_mut()
            .zip(self.smoothed_spp.iter_mut())
            .zip(spp.iter_mut())
            .zip(periodogram)
        {
            *s = a_spp * *s + (1.0 - a_spp) * *p;
            if *s > params.stuck_threshold {
                *p = p.min(params.spp_clamp);
            }
            let expected = noise_periodogram(x, *n, *p);
            *n = (a_psd * *n + (1.0 - a_psd) * expected).max(params.psd_floor);
        }
        self.frame_index += 1;
    }
}

/// Conditional expectation of the noise periodogram given the observation.
#[inline]
pub fn noise_periodogram(periodogram: f64, prev_noise_psd: f64, spp: f64) -> f64 {
    (1.0 - spp) * periodogram + spp * prev_noise_psd
}

/// Runs the tracker over a whole spectrogram. Row `t` of the result is the
/// estimate after row `t`; the first `n_init` rows carry the initial
/// estimate.
pub fn noise_floor_spectrogram(
    spec: &Spectrogram,
    params: &SppParams,
    n_init: usize,
) -> Result<Spectrogram, NoiseFloorError> {
    params.validate()?;
    if spec.n_frames() <= n_init {
        return Err(NoiseFloorError::TooFewFrames {
            frames: spec.n_frames(),
            n_init,
        });
    }
    let mut state = NoiseFloorState::init(spec.rows(), n_init, params)?;
    let bins = spec.n_bins();
    let mut out = Vec::with_capacity(spec.n_frames() * bins);
    for _ in 0..n_init {
        out.extend_from_slice(state.noise_psd());
    }
    for row in spec.rows().skip(n_init) {
        out.extend_from_slice(state.update(row, params)?);
    }
    Ok(Spectrogram::from_flat_unchecked(
        out,
        spec.n_frames(),
        bins,
        spec.bin_hz,
        spec.frame_hop_s,
    ))
}
