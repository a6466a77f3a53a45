//! Acoustic scene classification that stays usable when foreground speech
//! is present.
//!
//! The processing chain is: mono 16 kHz audio → (optional) noise-floor
//! tracking on the periodogram → MFCC + shifted delta cepstra → GMM-UBM
//! Baum-Welch statistics → iVectors → regularized Gaussian backend.
//! [`mixer`] builds speech-augmented corpora at controlled
//! speech-to-background ratios for multi-condition training and sweeps.

pub mod audio;
pub mod backend;
pub mod binio;
pub mod corpus;
pub mod features;
pub mod gmm;
pub mod ivector;
pub mod mixer;
pub mod noise_floor;
pub mod pipeline;
pub mod synth;

pub use audio::{AudioBuffer, FrameConfig, Window};
pub use backend::{BackendModel, ScoreMode};
pub use corpus::{Condition, CorpusManifest, ManifestEntry};
pub use features::{FeatureConfig, FeatureMatrix, SdcConfig};
pub use gmm::{GmmModel, SufficientStats};
pub use ivector::{IVector, TvMatrix};
pub use noise_floor::SppParams;
pub use pipeline::{EvalReport, ModelBundle, PipelineConfig};
