//! Pipeline configuration, stored as TOML.
//!
//! Every key is optional; missing keys take the defaults below.
//!
//! ```toml
//! seed = 0
//! use_noise_floor = false
//!
//! [features]
//! sample_rate = 16000
//! n_filters = 40
//! n_ceps = 21
//! [features.frame]
//! frame_len_ms = 40.0
//! overlap_fraction = 0.5
//! window = "hann"
//! [features.sdc]
//! m = 2
//! k = 2
//! n = 11
//! p = 3
//!
//! [ubm]
//! n_components = 256
//! n_iters = 25
//!
//! [tv]
//! rank = 150
//! n_iters = 5
//!
//! [backend]
//! alpha = 0.7
//! score_mode = "regularized"
//!
//! [mct]
//! sbr_db = [-5.0]
//! excluded_speakers = ["spk4"]
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::ScoreMode;
use crate::corpus::Condition;
use crate::features::FeatureConfig;
use crate::gmm::UbmConfig;
use crate::ivector::{DegeneratePolicy, TvConfig};
use crate::synth::sub_seed;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serializing config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UbmSection {
    pub n_components: usize,
    pub n_iters: usize,
    pub kmeans_iters: usize,
    pub var_floor_ratio: f64,
    pub init_sample: usize,
}

impl Default for UbmSection {
    fn default() -> Self {
        let d = UbmConfig::default();
        Self {
            n_components: d.n_components,
            n_iters: d.n_iters,
            kmeans_iters: d.kmeans_iters,
            var_floor_ratio: d.var_floor_ratio,
            init_sample: d.init_sample,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TvSection {
    pub rank: usize,
    pub n_iters: usize,
    pub degenerate: DegeneratePolicy,
    pub n_floor: f64,
}

impl Default for TvSection {
    fn default() -> Self {
        let d = TvConfig::default();
        Self {
            rank: d.rank,
            n_iters: d.n_iters,
            degenerate: d.degenerate,
            n_floor: d.n_floor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendSection {
    pub alpha: f64,
    pub score_mode: ScoreMode,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            score_mode: ScoreMode::Regularized,
        }
    }
}

/// Multi-condition training: each training clip is used clean and once per
/// SBR in `sbr_db`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct MctSection {
    pub sbr_db: Vec<f64>,
    /// Speakers never mixed into training data.
    pub excluded_speakers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    /// Root seed; every stage seed is derived from it.
    pub seed: u64,
    pub use_noise_floor: bool,
    pub features: FeatureConfig,
    pub ubm: UbmSection,
    pub tv: TvSection,
    pub backend: BackendSection,
    pub mct: MctSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ConfigError> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()?).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.features.sample_rate == 0 {
            return bad("features.sample_rate must be positive".into());
        }
        self.features
            .frame
            .frame_and_hop(self.features.sample_rate)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.features
            .noise_floor
            .params
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.features.n_ceps == 0 || self.features.n_ceps > self.features.n_filters {
            return bad(format!(
                "features.n_ceps = {} must be in 1..={}",
                self.features.n_ceps, self.features.n_filters
            ));
        }
        if let Some(sdc) = self.features.sdc {
            if sdc.n > self.features.n_ceps {
                return bad(format!("features.sdc.n = {} exceeds n_ceps", sdc.n));
            }
        }
        if self.ubm.n_components == 0 {
            return bad("ubm.n_components must be positive".into());
        }
        if !(self.ubm.var_floor_ratio > 0.0) {
            return bad("ubm.var_floor_ratio must be positive".into());
        }
        if self.tv.rank == 0 {
            return bad("tv.rank must be positive".into());
        }
        if self.tv.rank > self.ubm.n_components * self.features.output_dim() {
            return bad(format!("tv.rank = {} exceeds supervector dimension", self.tv.rank));
        }
        if !(0.0..=1.0).contains(&self.backend.alpha) {
            return bad(format!("backend.alpha = {} not in [0, 1]", self.backend.alpha));
        }
        if self.mct.sbr_db.iter().any(|v| !v.is_finite()) {
            return bad("mct.sbr_db entries must be finite".into());
        }
        Ok(())
    }

    pub fn ubm_config(&self) -> UbmConfig {
        UbmConfig {
            n_components: self.ubm.n_components,
            n_iters: self.ubm.n_iters,
            seed: sub_seed(self.seed, 1, 0),
            kmeans_iters: self.ubm.kmeans_iters,
            var_floor_ratio: self.ubm.var_floor_ratio,
            init_sample: self.ubm.init_sample,
        }
    }

    pub fn tv_config(&self) -> TvConfig {
        TvConfig {
            rank: self.tv.rank,
            n_iters: self.tv.n_iters,
            seed: sub_seed(self.seed, 2, 0),
            degenerate: self.tv.degenerate,
            n_floor: self.tv.n_floor,
        }
    }

    pub fn mct_seed(&self) -> u64 {
        sub_seed(self.seed, 3, 0)
    }

    /// Training conditions: clean plus every MCT SBR.
    pub fn training_conditions(&self) -> Vec<Condition> {
        std::iter::once(Condition::NoSpeech)
            .chain(self.mct.sbr_db.iter().map(|&db| Condition::Sbr(db)))
            .collect()
    }
}
