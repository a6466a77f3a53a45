//! Train/evaluate orchestration over manifest-described corpora.
//!
//! Stages run in order: features → UBM → statistics → TV → iVectors →
//! backend. Any failure is reported as a [`PipelineError`] naming the stage,
//! and each stage maps to its own process exit code.

mod bundle;
mod config;
mod report;

use std::collections::BTreeSet;
use std::error::Error as StdError;
use std::fmt;

use rayon::prelude::*;

use crate::backend::train_backend;
use crate::corpus::{build_multicondition_corpus, load_entry_audio, Condition, CorpusError, CorpusManifest};
use crate::features::{extract_features, FeatureMatrix};
use crate::gmm::{accumulate_stats, train_ubm, GmmModel, SufficientStats};
use crate::ivector::{train_tv, IVector, IvectorExtractor};

pub use bundle::{ModelBundle, BACKEND_FILE, CONFIG_FILE, TV_FILE, UBM_FILE};
pub use config::{BackendSection, ConfigError, MctSection, PipelineConfig, TvSection, UbmSection};
pub use report::{ConditionReport, EvalReport, Prediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Corpus,
    AudioIo,
    Mixer,
    Features,
    Ubm,
    TotalVariability,
    Ivector,
    Backend,
    Evaluation,
    Bundle,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Corpus => "corpus",
            Stage::AudioIo => "audio-io",
            Stage::Mixer => "mixer",
            Stage::Features => "features",
            Stage::Ubm => "gmm-ubm",
            Stage::TotalVariability => "tv-training",
            Stage::Ivector => "ivector",
            Stage::Backend => "backend",
            Stage::Evaluation => "evaluation",
            Stage::Bundle => "bundle",
        }
    }

    /// Process exit code for a failure in this stage.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Corpus => 3,
            Stage::AudioIo => 4,
            Stage::Mixer => 5,
            Stage::Features => 6,
            Stage::Ubm => 7,
            Stage::TotalVariability => 8,
            Stage::Ivector => 9,
            Stage::Backend => 10,
            Stage::Evaluation => 11,
            Stage::Bundle => 12,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub source: Box<dyn StdError + Send + Sync>,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed: {}", self.stage, self.source)
    }
}

impl StdError for PipelineError {
    fn source(&self) -> Option<&(dyn StdError + 'static)> {
        Some(self.source.as_ref())
    }
}

impl PipelineError {
    pub fn new(stage: Stage, source: impl Into<Box<dyn StdError + Send + Sync>>) -> Self {
        Self {
            stage,
            source: source.into(),
        }
    }

    /// `map_err` adaptor tagging an error with `stage`.
    pub fn at<E: Into<Box<dyn StdError + Send + Sync>>>(stage: Stage) -> impl Fn(E) -> Self {
        move |e| Self::new(stage, e)
    }

    pub fn exit_code(&self) -> i32 {
        self.stage.exit_code()
    }
}

fn corpus_err(e: CorpusError) -> PipelineError {
    let stage = match &e {
        CorpusError::Audio { .. } => Stage::AudioIo,
        CorpusError::Mix { .. } => Stage::Mixer,
        _ => Stage::Corpus,
    };
    PipelineError::new(stage, e)
}

/// Features for every manifest entry, in manifest order.
pub fn extract_manifest_features(
    manifest: &CorpusManifest,
    config: &PipelineConfig,
) -> Result<Vec<FeatureMatrix>, PipelineError> {
    let results: Vec<Result<FeatureMatrix, PipelineError>> = manifest
        .entries
        .par_iter()
        .map(|entry| {
            let (audio, _) = load_entry_audio(manifest, entry, config.features.sample_rate).map_err(corpus_err)?;
            extract_features(&audio, config.use_noise_floor, &config.features, &entry.id)
                .map_err(|e| PipelineError::new(Stage::Features, format!("{}: {e}", entry.id)))
        })
        .collect();
    results.into_iter().collect()
}

pub fn collect_stats(ubm: &GmmModel, feats: &[FeatureMatrix]) -> Result<Vec<SufficientStats>, PipelineError> {
    let results: Vec<_> = feats.par_iter().map(|f| accumulate_stats(ubm, f)).collect();
    results
        .into_iter()
        .collect::<Result<_, _>>()
        .map_err(PipelineError::at(Stage::Ubm))
}

pub fn extract_ivectors(
    extractor: &IvectorExtractor<'_>,
    stats: &[SufficientStats],
) -> Result<Vec<IVector>, PipelineError> {
    extractor.extract_all(stats).map_err(PipelineError::at(Stage::Ivector))
}

/// The training manifest after multi-condition expansion.
pub fn training_manifest(
    config: &PipelineConfig,
    train: &CorpusManifest,
    speech_pool: Option<&CorpusManifest>,
) -> Result<CorpusManifest, PipelineError> {
    if config.mct.sbr_db.is_empty() {
        return Ok(train.clone());
    }
    let pool = speech_pool.ok_or_else(|| {
        PipelineError::new(Stage::Config, "multi-condition training needs a speech pool")
    })?;
    let excluded: BTreeSet<String> = config.mct.excluded_speakers.iter().cloned().collect();
    build_multicondition_corpus(train, &config.training_conditions(), pool, &excluded, config.mct_seed())
        .map_err(corpus_err)
}

/// Trains UBM, TV matrix and backend on `train` (expanded with speech
/// mixtures when `config.mct.sbr_db` is non-empty).
pub fn run_training(
    config: &PipelineConfig,
    train: &CorpusManifest,
    speech_pool: Option<&CorpusManifest>,
) -> Result<ModelBundle, PipelineError> {
    config.validate().map_err(PipelineError::at(Stage::Config))?;
    train.validate().map_err(corpus_err)?;
    if train.entries.iter().any(|e| e.label.is_empty()) {
        return Err(PipelineError::new(Stage::Corpus, "training entries need labels"));
    }
    let manifest = training_manifest(config, train, speech_pool)?;
    log::info!("training on {} recordings", manifest.len());

    let feats = extract_manifest_features(&manifest, config)?;
    let refs: Vec<&FeatureMatrix> = feats.iter().collect();
    let ubm = train_ubm(&refs, &config.ubm_config())
        .map_err(PipelineError::at(Stage::Ubm))?
        .model;
    log::info!("UBM trained: {} components", ubm.n_components());

    let stats = collect_stats(&ubm, &feats)?;
    drop(feats);
    let tv = train_tv(&stats, &ubm, &config.tv_config())
        .map_err(PipelineError::at(Stage::TotalVariability))?
        .tv;
    log::info!("TV matrix trained: rank {}", tv.rank());

    let extractor = IvectorExtractor::new(&tv, &ubm).map_err(PipelineError::at(Stage::Ivector))?;
    let ivectors = extract_ivectors(&extractor, &stats)?;
    let labelled: Vec<(&str, &[f64])> = manifest
        .entries
        .iter()
        .zip(&ivectors)
        .map(|(e, iv)| (e.label.as_str(), iv.w.as_slice()))
        .collect();
    let backend = train_backend(&labelled, config.backend.alpha).map_err(PipelineError::at(Stage::Backend))?;
    drop(extractor);
    Ok(ModelBundle {
        config: config.clone(),
        ubm,
        tv,
        backend,
    })
}

/// Classifies every entry of `manifest` with `bundle`.
pub fn classify_manifest(bundle: &ModelBundle, manifest: &CorpusManifest) -> Result<Vec<Prediction>, PipelineError> {
    manifest.validate().map_err(corpus_err)?;
    let feats = extract_manifest_features(manifest, &bundle.config)?;
    let stats = collect_stats(&bundle.ubm, &feats)?;
    drop(feats);
    let extractor = bundle.extractor()?;
    let ivectors = extract_ivectors(&extractor, &stats)?;
    let mode = bundle.config.backend.score_mode;
    manifest
        .entries
        .iter()
        .zip(&ivectors)
        .map(|(e, iv)| {
            let scores = bundle
                .backend
                .score(&iv.w, mode)
                .map_err(PipelineError::at(Stage::Backend))?;
            let best = bundle
                .backend
                .classify_index(&iv.w, mode)
                .map_err(PipelineError::at(Stage::Backend))?;
            Ok(Prediction {
                id: e.id.clone(),
                label: e.label.clone(),
                condition: e.condition.clone(),
                predicted: bundle.labels()[best].clone(),
                scores,
            })
        })
        .collect()
}

/// Accuracy and confusion per condition tag and pooled.
pub fn run_evaluation(bundle: &ModelBundle, test: &CorpusManifest) -> Result<EvalReport, PipelineError> {
    let known: BTreeSet<&str> = bundle.labels().iter().map(String::as_str).collect();
    if let Some(e) = test.entries.iter().find(|e| !known.contains(e.label.as_str())) {
        return Err(PipelineError::new(
            Stage::Evaluation,
            format!("entry {:?} has label {:?}, which the model does not know", e.id, e.label),
        ));
    }
    let preds = classify_manifest(bundle, test)?;
    EvalReport::from_predictions(bundle.labels(), &preds).map_err(PipelineError::at(Stage::Evaluation))
}

/// Evaluates `clean_test` as is and mixed with speech from `speech_pool` at
/// every SBR in `sbr_list` (speakers in `excluded_speakers` are not used).
pub fn run_sbr_sweep(
    bundle: &ModelBundle,
    clean_test: &CorpusManifest,
    speech_pool: &CorpusManifest,
    sbr_list: &[f64],
    excluded_speakers: &BTreeSet<String>,
    seed: u64,
) -> Result<EvalReport, PipelineError> {
    let conditions: Vec<Condition> = std::iter::once(Condition::NoSpeech)
        .chain(sbr_list.iter().map(|&db| Condition::Sbr(db)))
        .collect();
    let manifest = build_multicondition_corpus(clean_test, &conditions, speech_pool, excluded_speakers, seed)
        .map_err(corpus_err)?;
    run_evaluation(bundle, &manifest)
}
