mod stages;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use asc_core::audio::{read_wav, write_wav_i16};
use asc_core::corpus::{build_multicondition_corpus, materialize_corpus, Condition, CorpusManifest};
use asc_core::mixer::mix_at_sbr;
use asc_core::pipeline::{
    classify_manifest, run_evaluation, run_sbr_sweep, run_training, EvalReport, ModelBundle, PipelineConfig,
    PipelineError, Stage,
};
use asc_core::synth::{generate_corpus, SynthSpec};
use asc_core::ScoreMode;

#[derive(Parser)]
#[command(name = "asc", version, about = "Speech-robust acoustic scene classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus per-key overrides shared by every model-related command.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML config; defaults apply to missing keys or when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Use noise-floor features.
    #[arg(long, conflicts_with = "no_noise_floor")]
    noise_floor: bool,
    #[arg(long)]
    no_noise_floor: bool,
    #[arg(long)]
    ubm_components: Option<usize>,
    #[arg(long)]
    ubm_iters: Option<usize>,
    #[arg(long)]
    tv_rank: Option<usize>,
    #[arg(long)]
    tv_iters: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// `regularized` or `shared`.
    #[arg(long, value_parser = parse_score_mode)]
    score_mode: Option<ScoreMode>,
    /// Multi-condition training SBRs in dB (comma separated).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    mct_sbr: Option<Vec<f64>>,
    /// Speakers never mixed into training data.
    #[arg(long, value_delimiter = ',')]
    mct_exclude: Option<Vec<String>>,
}

fn parse_score_mode(s: &str) -> Result<ScoreMode, String> {
    match s {
        "regularized" => Ok(ScoreMode::Regularized),
        "shared" => Ok(ScoreMode::Shared),
        other => Err(format!("unknown score mode {other:?}")),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p).map_err(PipelineError::at(Stage::Config))?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.noise_floor {
            cfg.use_noise_floor = true;
        }
        if self.no_noise_floor {
            cfg.use_noise_floor = false;
        }
        if let Some(v) = self.ubm_components {
            cfg.ubm.n_components = v;
        }
        if let Some(v) = self.ubm_iters {
            cfg.ubm.n_iters = v;
        }
        if let Some(v) = self.tv_rank {
            cfg.tv.rank = v;
        }
        if let Some(v) = self.tv_iters {
            cfg.tv.n_iters = v;
        }
        if let Some(v) = self.alpha {
            cfg.backend.alpha = v;
        }
        if let Some(v) = self.score_mode {
            cfg.backend.score_mode = v;
        }
        if let Some(v) = &self.mct_sbr {
            cfg.mct.sbr_db = v.clone();
        }
        if let Some(v) = &self.mct_exclude {
            cfg.mct.excluded_speakers = v.clone();
        }
        cfg.validate().map_err(PipelineError::at(Stage::Config))?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Mix one speech file into one background at a target SBR.
    Mix {
        #[arg(long)]
        background: PathBuf,
        #[arg(long)]
        speech: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        sbr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand a manifest over SBR conditions with speech from a pool.
    BuildCorpus {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        speech_pool: PathBuf,
        /// Conditions: `clean` and/or SBR values in dB (comma separated).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        conditions: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        exclude_speaker: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output manifest (JSON lines).
        #[arg(long)]
        out: PathBuf,
        /// Render mixed entries as WAV files into this directory.
        #[arg(long)]
        render_dir: Option<PathBuf>,
    },
    /// Extract features for every manifest entry.
    ExtractFeatures {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write each matrix as CSV.
        #[arg(long)]
        csv: bool,
        /// Also write the input and noise-floor spectrograms.
        #[arg(long)]
        dump_spectrograms: bool,
    },
    /// Train the UBM on a feature directory.
    TrainUbm {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the total-variability matrix.
    TrainTv {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        ubm: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract iVectors for a feature directory.
    ExtractIvectors {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        ubm: PathBuf,
        #[arg(long)]
        tv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the Gaussian backend on labelled iVectors.
    TrainBackend {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ivectors: PathBuf,
        /// Manifest or feature index providing labels by id.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train UBM, TV matrix and backend in one go and write a bundle.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Speech pool for multi-condition training.
        #[arg(long)]
        speech_pool: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify a manifest; one JSON line per recording.
    Classify {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy and confusion per condition.
    Evaluate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Evaluate clean test data and speech mixtures at several SBRs.
    Sweep {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        speech_pool: PathBuf,
        /// SBR values in dB (comma separated); empty evaluates clean data only.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        sbr: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        exclude_speaker: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Generate the synthetic scene and speech corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        train_per_class: usize,
        #[arg(long, default_value_t = 20)]
        test_per_class: usize,
        #[arg(long, default_value_t = 10.0)]
        clip_secs: f64,
        #[arg(long, default_value_t = 8)]
        speakers: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_manifest(path: &Path) -> Result<CorpusManifest, PipelineError> {
    CorpusManifest::load(path).map_err(PipelineError::at(Stage::Corpus))
}

fn load_bundle(dir: &Path) -> Result<ModelBundle, PipelineError> {
    ModelBundle::load(dir)
}

fn write_report(report: &EvalReport, json: Option<&Path>) -> Result<(), PipelineError> {
    print!("{}", report.to_table());
    if let Some(p) = json {
        fs::write(p, report.to_json()).map_err(PipelineError::at(Stage::Evaluation))?;
    }
    Ok(())
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Mix {
            background,
            speech,
            sbr,
            seed,
            out,
        } => {
            let bg = read_wav(&background).map_err(PipelineError::at(Stage::AudioIo))?;
            let sp = read_wav(&speech).map_err(PipelineError::at(Stage::AudioIo))?;
            let (mixed, mut spec) = mix_at_sbr(&bg, &sp, sbr, seed).map_err(PipelineError::at(Stage::Mixer))?;
            spec.background_id = background.display().to_string();
            spec.speech_id = speech.display().to_string();
            write_wav_i16(&out, &mixed).map_err(PipelineError::at(Stage::AudioIo))?;
            println!("{}", serde_json::to_string(&spec).expect("mix spec serializes"));
            Ok(())
        }
        Command::BuildCorpus {
            manifest,
            speech_pool,
            conditions,
            exclude_speaker,
            seed,
            out,
            render_dir,
        } => {
            let background = load_manifest(&manifest)?;
            let pool = load_manifest(&speech_pool)?;
            let conditions = conditions
                .iter()
                .map(|c| c.parse::<Condition>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(PipelineError::at(Stage::Config))?;
            let excluded: BTreeSet<String> = exclude_speaker.into_iter().collect();
            let built = build_multicondition_corpus(&background, &conditions, &pool, &excluded, seed)
                .map_err(PipelineError::at(Stage::Corpus))?;
            let built = match render_dir {
                Some(dir) => materialize_corpus(&built, &dir, 16000).map_err(PipelineError::at(Stage::Mixer))?,
                None => built.with_absolute_paths(),
            };
            built.save(&out).map_err(PipelineError::at(Stage::Corpus))?;
            log::info!("wrote {} entries to {}", built.len(), out.display());
            Ok(())
        }
        Command::ExtractFeatures {
            config,
            manifest,
            out_dir,
            csv,
            dump_spectrograms,
        } => {
            let cfg = config.resolve()?;
            let manifest = load_manifest(&manifest)?;
            stages::extract_features_to_dir(&cfg, &manifest, &out_dir, csv, dump_spectrograms)
        }
        Command::TrainUbm { config, features, out } => {
            let cfg = config.resolve()?;
            stages::train_ubm_from_dir(&cfg, &features, &out)
        }
        Command::TrainTv {
            config,
            features,
            ubm,
            out,
        } => {
            let cfg = config.resolve()?;
            stages::train_tv_from_dir(&cfg, &features, &ubm, &out)
        }
        Command::ExtractIvectors { features, ubm, tv, out } => stages::extract_ivectors_from_dir(&features, &ubm, &tv, &out),
        Command::TrainBackend {
            config,
            ivectors,
            labels,
            out,
        } => {
            let cfg = config.resolve()?;
            stages::train_backend_from_file(&cfg, &ivectors, &labels, &out)
        }
        Command::Train {
            config,
            manifest,
            speech_pool,
            out,
        } => {
            let cfg = config.resolve()?;
            let train = load_manifest(&manifest)?;
            let pool = speech_pool.as_deref().map(load_manifest).transpose()?;
            let bundle = run_training(&cfg, &train, pool.as_ref())?;
            bundle.save(&out)?;
            log::info!("bundle written to {}", out.display());
            Ok(())
        }
        Command::Classify { bundle, manifest, out } => {
            let bundle = load_bundle(&bundle)?;
            let manifest = load_manifest(&manifest)?;
            let preds = classify_manifest(&bundle, &manifest)?;
            let mut text = String::new();
            for p in &preds {
                let line = serde_json::json!({
                    "id": p.id,
                    "predicted": p.predicted,
                    "scores": bundle.labels().iter().zip(&p.scores).map(|(l, s)| (l.clone(), serde_json::Value::from(*s))).collect::<serde_json::Map<_, _>>(),
                });
                text.push_str(&line.to_string());
                text.push('\n');
            }
            match out {
                Some(p) => fs::write(p, text).map_err(PipelineError::at(Stage::Evaluation)),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Evaluate { bundle, manifest, json } => {
            let bundle = load_bundle(&bundle)?;
            let manifest = load_manifest(&manifest)?;
            let report = run_evaluation(&bundle, &manifest)?;
            write_report(&report, json.as_deref())
        }
        Command::Sweep {
            bundle,
            manifest,
            speech_pool,
            sbr,
            exclude_speaker,
            seed,
            json,
        } => {
            let bundle = load_bundle(&bundle)?;
            let test = load_manifest(&manifest)?;
            let pool = load_manifest(&speech_pool)?;
            let excluded: BTreeSet<String> = exclude_speaker.into_iter().collect();
            let report = run_sbr_sweep(&bundle, &test, &pool, &sbr, &excluded, seed)?;
            write_report(&report, json.as_deref())
        }
        Command::Synth {
            out,
            seed,
            train_per_class,
            test_per_class,
            clip_secs,
            speakers,
        } => {
            let spec = SynthSpec {
                train_per_class,
                test_per_class,
                clip_secs,
                n_speakers: speakers,
                seed,
                ..SynthSpec::default()
            };
            let corpus = generate_corpus(&out, &spec).map_err(PipelineError::at(Stage::Corpus))?;
            log::info!(
                "wrote {} training clips, {} test clips and {} utterances under {}",
                corpus.train.len(),
                corpus.test.len(),
                corpus.speech.len(),
                out.display()
            );
            Ok(())
        }
    }
}
