//! File-based stage commands. A feature directory holds one `.feat` file
//! per recording plus `index.jsonl` mapping ids to labels and files.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use asc_core::backend::train_backend;
use asc_core::corpus::{load_entry_audio, CorpusManifest};
use asc_core::features::{read_features, spectrogram_of, write_features, write_features_csv, FeatureMeta};
use asc_core::gmm::train_ubm;
use asc_core::ivector::{train_tv, IvectorExtractor, IvectorSet};
use asc_core::noise_floor::noise_floor_spectrogram;
use asc_core::pipeline::{collect_stats, extract_ivectors, extract_manifest_features, PipelineConfig, PipelineError, Stage};
use asc_core::{FeatureMatrix, GmmModel, TvMatrix};

pub const INDEX_FILE: &str = "index.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub label: String,
    pub condition: String,
    pub file: String,
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn io(stage: Stage, path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::new(stage, format!("{}: {e}", path.display()))
}

pub fn extract_features_to_dir(
    cfg: &PipelineConfig,
    manifest: &CorpusManifest,
    out_dir: &Path,
    csv: bool,
    dump_spectrograms: bool,
) -> Result<(), PipelineError> {
    fs::create_dir_all(out_dir).map_err(io(Stage::Features, out_dir))?;
    let feats = extract_manifest_features(manifest, cfg)?;
    let mut index = String::new();
    for (entry, f) in manifest.entries.iter().zip(&feats) {
        let stem = file_stem(&entry.id);
        let file = format!("{stem}.feat");
        write_features(out_dir.join(&file), f).map_err(PipelineError::at(Stage::Features))?;
        if csv {
            write_features_csv(out_dir.join(format!("{stem}.csv")), f).map_err(PipelineError::at(Stage::Features))?;
        }
        if dump_spectrograms {
            dump_spectrogram_pair(cfg, manifest, entry, out_dir, &stem)?;
        }
        let line = IndexEntry {
            id: entry.id.clone(),
            label: entry.label.clone(),
            condition: entry.condition.clone(),
            file,
        };
        index.push_str(&serde_json::to_string(&line).expect("index entry serializes"));
        index.push('\n');
    }
    let index_path = out_dir.join(INDEX_FILE);
    fs::write(&index_path, index).map_err(io(Stage::Features, &index_path))?;
    log::info!("wrote features for {} recordings to {}", feats.len(), out_dir.display());
    Ok(())
}

fn dump_spectrogram_pair(
    cfg: &PipelineConfig,
    manifest: &CorpusManifest,
    entry: &asc_core::ManifestEntry,
    out_dir: &Path,
    stem: &str,
) -> Result<(), PipelineError> {
    let (audio, _) = load_entry_audio(manifest, entry, cfg.features.sample_rate).map_err(PipelineError::at(Stage::AudioIo))?;
    let spec = spectrogram_of(&audio, &cfg.features).map_err(PipelineError::at(Stage::Features))?;
    let floor = noise_floor_spectrogram(&spec, &cfg.features.noise_floor.params, cfg.features.noise_floor.n_init)
        .map_err(PipelineError::at(Stage::Features))?;
    for (suffix, s, flag) in [("spec", &spec, false), ("floor", &floor, true)] {
        let meta = FeatureMeta {
            recording_id: entry.id.clone(),
            noise_floor: flag,
        };
        let m = FeatureMatrix::from_flat(s.as_slice().to_vec(), s.n_bins(), meta).map_err(PipelineError::at(Stage::Features))?;
        write_features(out_dir.join(format!("{stem}.{suffix}.feat")), &m).map_err(PipelineError::at(Stage::Features))?;
    }
    Ok(())
}

pub fn load_feature_dir(dir: &Path) -> Result<(Vec<IndexEntry>, Vec<FeatureMatrix>), PipelineError> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(io(Stage::Features, &index_path))?;
    let mut entries = Vec::new();
    let mut feats = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let e: IndexEntry = serde_json::from_str(line)
            .map_err(|err| PipelineError::new(Stage::Features, format!("{}:{}: {err}", index_path.display(), n + 1)))?;
        feats.push(read_features(dir.join(&e.file)).map_err(PipelineError::at(Stage::Features))?);
        entries.push(e);
    }
    if feats.is_empty() {
        return Err(PipelineError::new(Stage::Features, format!("{} lists no recordings", index_path.display())));
    }
    Ok((entries, feats))
}

fn read_ubm(path: &Path) -> Result<GmmModel, PipelineError> {
    let bytes = fs::read(path).map_err(io(Stage::Ubm, path))?;
    GmmModel::from_bytes(&bytes).map_err(PipelineError::at(Stage::Ubm))
}

fn read_tv(path: &Path) -> Result<TvMatrix, PipelineError> {
    let bytes = fs::read(path).map_err(io(Stage::TotalVariability, path))?;
    TvMatrix::from_bytes(&bytes).map_err(PipelineError::at(Stage::TotalVariability))
}

pub fn train_ubm_from_dir(cfg: &PipelineConfig, features: &Path, out: &Path) -> Result<(), PipelineError> {
    let (_, feats) = load_feature_dir(features)?;
    let refs: Vec<&FeatureMatrix> = feats.iter().collect();
    let trained = train_ubm(&refs, &cfg.ubm_config()).map_err(PipelineError::at(Stage::Ubm))?;
    fs::write(out, trained.model.to_bytes()).map_err(io(Stage::Ubm, out))
}

pub fn train_tv_from_dir(cfg: &PipelineConfig, features: &Path, ubm: &Path, out: &Path) -> Result<(), PipelineError> {
    let ubm = read_ubm(ubm)?;
    let (_, feats) = load_feature_dir(features)?;
    let stats = collect_stats(&ubm, &feats)?;
    let trained = train_tv(&stats, &ubm, &cfg.tv_config()).map_err(PipelineError::at(Stage::TotalVariability))?;
    fs::write(out, trained.tv.to_bytes()).map_err(io(Stage::TotalVariability, out))
}

pub fn extract_ivectors_from_dir(features: &Path, ubm: &Path, tv: &Path, out: &Path) -> Result<(), PipelineError> {
    let ubm = read_ubm(ubm)?;
    let tv = read_tv(tv)?;
    let extractor = IvectorExtractor::new(&tv, &ubm).map_err(PipelineError::at(Stage::Ivector))?;
    let (entries, feats) = load_feature_dir(features)?;
    let stats = collect_stats(&ubm, &feats)?;
    let ivectors = extract_ivectors(&extractor, &stats)?;
    let set = IvectorSet {
        items: entries.into_iter().map(|e| e.id).zip(ivectors).collect(),
    };
    fs::write(out, set.to_bytes()).map_err(io(Stage::Ivector, out))
}

/// Labels by id from any JSON-lines file whose records carry `id` and `label`.
fn read_labels(path: &Path) -> Result<HashMap<String, String>, PipelineError> {
    #[derive(Deserialize)]
    struct Labelled {
        id: String,
        label: String,
    }
    let text = fs::read_to_string(path).map_err(io(Stage::Corpus, path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            serde_json::from_str::<Labelled>(line)
                .map(|r| (r.id, r.label))
                .map_err(|e| PipelineError::new(Stage::Corpus, format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

pub fn train_backend_from_file(cfg: &PipelineConfig, ivectors: &Path, labels: &Path, out: &Path) -> Result<(), PipelineError> {
    let bytes = fs::read(ivectors).map_err(io(Stage::Ivector, ivectors))?;
    let set = IvectorSet::from_bytes(&bytes).map_err(PipelineError::at(Stage::Ivector))?;
    let labels = read_labels(labels)?;
    let mut samples = Vec::with_capacity(set.items.len());
    for (id, iv) in &set.items {
        let label = labels
            .get(id)
            .ok_or_else(|| PipelineError::new(Stage::Backend, format!("no label for recording {id:?}")))?;
        samples.push((label.as_str(), iv.w.as_slice()));
    }
    let model = train_backend(&samples, cfg.backend.alpha).map_err(PipelineError::at(Stage::Backend))?;
    fs::write(out, model.to_bytes()).map_err(io(Stage::Backend, out))
}
