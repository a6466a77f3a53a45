//! MFCC and shifted-delta-cepstral feature extraction, optionally computed
//! from the tracked noise floor instead of the raw periodogram.

mod io;
mod mel;
mod mfcc;
mod sdc;
mod spectrogram;

pub use io::{read_features, write_features, write_features_csv};
pub use mel::{hz_to_mel, mel_to_hz, MelFilterBank};
pub use mfcc::{mfcc, LOG_FLOOR};
pub use sdc::{append_sdc, SdcConfig};
pub use spectrogram::{power_spectrogram, Spectrogram};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{frame_signal, AudioBuffer, AudioError, FrameConfig};
use crate::binio::BinError;
use crate::noise_floor::{noise_floor_spectrogram, NoiseFloorConfig, NoiseFloorError};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("empty input")]
    Empty,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    NoiseFloor(#[from] NoiseFloorError),
    #[error("feature file: {0}")]
    Container(#[from] BinError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeatureMeta {
    pub recording_id: String,
    pub noise_floor: bool,
}

/// Row-major `n_rows × dim` matrix of per-frame feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    n_rows: usize,
    dim: usize,
    meta: FeatureMeta,
}

impl FeatureMatrix {
    pub fn from_flat(data: Vec<f64>, dim: usize, meta: FeatureMeta) -> Result<Self, FeatureError> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(FeatureError::Dimension(format!(
                "{} values cannot form rows of width {dim}",
                data.len()
            )));
        }
        Ok(Self {
            n_rows: data.len() / dim,
            data,
            dim,
            meta,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, meta: FeatureMeta) -> Result<Self, FeatureError> {
        let dim = rows.first().map(Vec::len).ok_or(FeatureError::Empty)?;
        if rows.iter().any(|r| r.len() != dim) {
            return Err(FeatureError::Dimension("ragged feature rows".into()));
        }
        Self::from_flat(rows.into_iter().flatten().collect(), dim, meta)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn meta(&self) -> &FeatureMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut FeatureMeta {
        &mut self.meta
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Everything needed to turn a waveform into features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub frame: FrameConfig,
    pub n_filters: usize,
    pub fmin_hz: f64,
    /// Upper mel edge; Nyquist when absent.
    pub fmax_hz: Option<f64>,
    pub n_ceps: usize,
    /// Shifted delta cepstra; static MFCCs only when `None`.
    pub sdc: Option<SdcConfig>,
    pub noise_floor: NoiseFloorConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            frame: FrameConfig::default(),
            n_filters: 40,
            fmin_hz: 0.0,
            fmax_hz: None,
            n_ceps: 21,
            sdc: Some(SdcConfig::default()),
            noise_floor: NoiseFloorConfig::default(),
        }
    }
}

impl FeatureConfig {
    pub fn output_dim(&self) -> usize {
        self.n_ceps + self.sdc.map_or(0, |s| s.appended_dim())
    }

    pub fn mel_bank(&self, fft_size: usize) -> Result<MelFilterBank, FeatureError> {
        let fmax = self.fmax_hz.unwrap_or(self.sample_rate as f64 / 2.0);
        MelFilterBank::new(self.n_filters, fft_size, self.sample_rate, self.fmin_hz, fmax)
    }
}

/// Power spectrogram of a mono buffer under `cfg`'s framing.
pub fn spectrogram_of(buf: &AudioBuffer, cfg: &FeatureConfig) -> Result<Spectrogram, FeatureError> {
    if buf.channels() != 1 {
        return Err(FeatureError::InvalidValue("expected mono audio".into()));
    }
    if buf.sample_rate() != cfg.sample_rate {
        return Err(FeatureError::InvalidValue(format!(
            "expected {} Hz audio, got {} Hz",
            cfg.sample_rate,
            buf.sample_rate()
        )));
    }
    let (_, hop) = cfg.frame.frame_and_hop(cfg.sample_rate)?;
    let frames = frame_signal(buf, &cfg.frame)?;
    power_spectrogram(&frames, cfg.sample_rate, hop)
}

/// Features from an already computed spectrogram: optional noise-floor
/// tracking, then mel, MFCC and SDC.
pub fn features_from_spectrogram(
    spec: &Spectrogram,
    use_noise_floor: bool,
    cfg: &FeatureConfig,
    recording_id: &str,
) -> Result<FeatureMatrix, FeatureError> {
    let tracked;
    let source = if use_noise_floor {
        tracked = noise_floor_spectrogram(spec, &cfg.noise_floor.params, cfg.noise_floor.n_init)?;
        &tracked
    } else {
        spec
    };
    let bank = cfg.mel_bank(spec.fft_size())?;
    let meta = FeatureMeta {
        recording_id: recording_id.to_string(),
        noise_floor: use_noise_floor,
    };
    let statics = mfcc(source, &bank, cfg.n_ceps, meta)?;
    match &cfg.sdc {
        Some(sdc) => append_sdc(&statics, sdc),
        None => Ok(statics),
    }
}

/// Full waveform-to-features pipeline.
pub fn extract_features(
    buf: &AudioBuffer,
    use_noise_floor: bool,
    cfg: &FeatureConfig,
    recording_id: &str,
) -> Result<FeatureMatrix, FeatureError> {
    let spec = spectrogram_of(buf, cfg)?;
    features_from_spectrogram(&spec, use_noise_floor, cfg, recording_id)
}
