//! Corpus manifests (JSON lines) and the multi-condition corpus builder.
//!
//! One record per line:
//!
//! ```text
//! {"id":"bus_003","path":"audio/bus_003.wav","label":"bus","speaker_id":null,
//!  "condition":"clean","fold":1,"seed":null,"gain":null,"mix":null}
//! ```
//!
//! `path` is resolved relative to the manifest's directory. A record with a
//! `mix` recipe describes `path` (the background) with speech from
//! `mix.speech_path` added at `mix.sbr_db`; the audio is produced on load.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, downmix_mono, read_wav, resample, AudioBuffer, AudioError};
use crate::mixer::{mix_at_sbr, MixError, MixSpec};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("manifest i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error("speech pool is empty but a speech condition was requested")]
    EmptySpeechPool,
    #[error("audio for '{id}': {source}")]
    Audio {
        id: String,
        #[source]
        source: AudioError,
    },
    #[error("mixing '{id}': {source}")]
    Mix {
        id: String,
        #[source]
        source: MixError,
    },
}

/// Training/test condition: the original recording, or speech mixed in at
/// a given SBR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Condition {
    NoSpeech,
    Sbr(f64),
}

impl Condition {
    pub fn tag(&self) -> String {
        match self {
            Condition::NoSpeech => "clean".to_string(),
            Condition::Sbr(db) => format!("sbr{db:+}"),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

impl std::str::FromStr for Condition {
    type Err = String;

    /// Accepts `clean`, `none`, `no-speech`, or a number of dB.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        match t.to_ascii_lowercase().as_str() {
            "clean" | "none" | "no-speech" | "nospeech" | "no_speech" => Ok(Condition::NoSpeech),
            other => other
                .trim_start_matches("sbr")
                .trim_end_matches("db")
                .parse::<f64>()
                .map(Condition::Sbr)
                .map_err(|_| format!("unrecognised condition '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixRecipe {
    pub speech_path: String,
    pub speech_id: String,
    #[serde(default)]
    pub speech_speaker: Option<String>,
    pub sbr_db: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub label: String,
    #[serde(default)]
    pub speaker_id: Option<String>,
    #[serde(default = "default_condition")]
    pub condition: String,
    #[serde(default)]
    pub fold: Option<u32>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub gain: Option<f64>,
    #[serde(default)]
    pub mix: Option<MixRecipe>,
}

fn default_condition() -> String {
    "clean".to_string()
}

impl ManifestEntry {
    pub fn new(id: impl Into<String>, path: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            label: label.into(),
            speaker_id: None,
            condition: default_condition(),
            fold: None,
            seed: None,
            gain: None,
            mix: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

impl CorpusManifest {
    pub fn new(entries: Vec<ManifestEntry>, root: impl Into<PathBuf>) -> Self {
        Self {
            entries,
            root: root.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.label.clone()).collect()
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Ids must be unique; fold assignments, when present on any entry,
    /// must be present on all of them.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(CorpusError::Invalid(format!("duplicate id '{}'", e.id)));
            }
            if e.label.is_empty() {
                return Err(CorpusError::Invalid(format!("entry '{}' has no label", e.id)));
            }
        }
        let with_fold = self.entries.iter().filter(|e| e.fold.is_some()).count();
        if with_fold != 0 && with_fold != self.entries.len() {
            return Err(CorpusError::Invalid(
                "fold assignments must cover every entry".into(),
            ));
        }
        Ok(())
    }

    /// Entries of one fold (test side) and the rest (train side).
    pub fn split_fold(&self, fold: u32) -> (CorpusManifest, CorpusManifest) {
        let (test, train): (Vec<_>, Vec<_>) = self
            .entries
            .iter()
            .cloned()
            .partition(|e| e.fold == Some(fold));
        (
            CorpusManifest::new(train, self.root.clone()),
            CorpusManifest::new(test, self.root.clone()),
        )
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, root: impl Into<PathBuf>) -> Result<Self, CorpusError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let entry = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.push(entry);
        }
        let m = Self::new(entries, root);
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut text = String::new();
        for line in io::BufReader::new(file).lines() {
            let line = line.map_err(|source| CorpusError::Io {
                path: path.display().to_string(),
                source,
            })?;
            text.push_str(&line);
            text.push('\n');
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_jsonl(&text, root)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|source| CorpusError::Io {
                path: path.display().to_string(),
                source,
            })
    }

    /// Copy whose paths are absolute, so it can be saved anywhere.
    pub fn with_absolute_paths(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.entries {
            e.path = self.resolve(&e.path).display().to_string();
            if let Some(m) = &mut e.mix {
                m.speech_path = self.resolve(&m.speech_path).display().to_string();
            }
        }
        out
    }

    /// Entries grouped by condition tag, preserving order within a group.
    pub fn by_condition(&self) -> BTreeMap<String, Vec<&ManifestEntry>> {
        let mut out: BTreeMap<String, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in &self.entries {
            out.entry(e.condition.clone()).or_default().push(e);
        }
        out
    }
}

/// Reads, downmixes and resamples one file to `sample_rate`.
pub fn load_mono(path: &Path, sample_rate: u32) -> Result<AudioBuffer, AudioError> {
    let buf = downmix_mono(&read_wav(path)?);
    if buf.sample_rate() == sample_rate {
        Ok(buf)
    } else {
        resample(&buf, sample_rate)
    }
}

/// Produces the audio an entry describes, mixing speech in when the entry
/// carries a recipe.
pub fn load_entry_audio(
    manifest: &CorpusManifest,
    entry: &ManifestEntry,
    sample_rate: u32,
) -> Result<(AudioBuffer, Option<MixSpec>), CorpusError> {
    let audio_err = |source| CorpusError::Audio {
        id: entry.id.clone(),
        source,
    };
    let background = load_mono(&manifest.resolve(&entry.path), sample_rate).map_err(audio_err)?;
    match &entry.mix {
        None => Ok((background, None)),
        Some(recipe) => {
            let speech = load_mono(&manifest.resolve(&recipe.speech_path), sample_rate)
                .map_err(audio_err)?;
            let (mixed, mut spec) = mix_at_sbr(&background, &speech, recipe.sbr_db, recipe.seed)
                .map_err(|source| CorpusError::Mix {
                    id: entry.id.clone(),
                    source,
                })?;
            spec.background_id = entry.path.clone();
            spec.speech_id = recipe.speech_id.clone();
            Ok((mixed, Some(spec)))
        }
    }
}

/// Multi-condition expansion of `background`: every entry once per
/// condition, speech drawn from `speech_pool` (speakers listed in
/// `excluded_speakers` are never used). Conditions form the outer loop.
pub fn build_multicondition_corpus(
    background: &CorpusManifest,
    conditions: &[Condition],
    speech_pool: &CorpusManifest,
    excluded_speakers: &BTreeSet<String>,
    rng_seed: u64,
) -> Result<CorpusManifest, CorpusError> {
    let eligible: Vec<&ManifestEntry> = speech_pool
        .entries
        .iter()
        .filter(|e| {
            e.speaker_id
                .as_ref()
                .is_none_or(|s| !excluded_speakers.contains(s))
        })
        .collect();
    let needs_speech = conditions.iter().any(|c| matches!(c, Condition::Sbr(_)));
    if needs_speech && eligible.is_empty() {
        return Err(CorpusError::EmptySpeechPool);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut entries = Vec::with_capacity(background.len() * conditions.len());
    for cond in conditions {
        for bg in &background.entries {
            match cond {
                Condition::NoSpeech => entries.push(bg.clone()),
                Condition::Sbr(db) => {
                    let pick = eligible[rng.random_range(0..eligible.len())];
                    let seed: u64 = rng.random();
                    let mut e = bg.clone();
                    e.id = format!("{}@{}", bg.id, cond.tag());
                    e.condition = cond.tag();
                    e.seed = Some(seed);
                    e.gain = None;
                    e.mix = Some(MixRecipe {
                        speech_path: speech_pool.resolve(&pick.path).display().to_string(),
                        speech_id: pick.id.clone(),
                        speech_speaker: pick.speaker_id.clone(),
                        sbr_db: *db,
                        seed,
                    });
                    entries.push(e);
                }
            }
        }
    }
    let out = CorpusManifest::new(entries, background.root.clone());
    out.validate()?;
    Ok(out)
}

/// Writes every mixed entry as a 16-bit WAV under `out_dir` and returns a
/// manifest pointing at the rendered files with the applied gains filled in.
pub fn materialize_corpus(
    manifest: &CorpusManifest,
    out_dir: &Path,
    sample_rate: u32,
) -> Result<CorpusManifest, CorpusError> {
    fs::create_dir_all(out_dir).map_err(|source| CorpusError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let mut entries = Vec::with_capacity(manifest.len());
    for entry in &manifest.entries {
        let mut e = entry.clone();
        if entry.mix.is_some() {
            let (audio, spec) = load_entry_audio(manifest, entry, sample_rate)?;
            let file = format!("{}.wav", sanitize(&entry.id));
            audio::write_wav_i16(out_dir.join(&file), &audio).map_err(|source| {
                CorpusError::Audio {
                    id: entry.id.clone(),
                    source,
                }
            })?;
            e.path = file;
            e.gain = spec.map(|s| s.speech_gain * s.headroom_gain);
            e.mix = None;
        } else {
            e.path = manifest.resolve(&entry.path).display().to_string();
        }
        entries.push(e);
    }
    Ok(CorpusManifest::new(entries, out_dir))
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
