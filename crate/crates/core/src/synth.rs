//! Synthetic corpora: coloured-noise scene classes and harmonic speech
//! surrogates, so the whole pipeline can run without external data.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav_i16, AudioBuffer};
use crate::corpus::{CorpusError, CorpusManifest, ManifestEntry};

/// Scene class labels in generator order.
pub const SCENE_CLASSES: [&str; 4] = ["band", "brown", "pink", "white"];

/// Derives an independent seed from a root seed and two indices.
pub fn sub_seed(root: u64, a: u64, b: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(root ^ mix(a.wrapping_mul(0x1_0000_0001) ^ mix(b)))
}

/// Power shaping in dB at `f` for class `class`, with per-realization
/// slope jitter and ripple.
fn shape_db(class: usize, f: f64, slope_jitter: f64, ripple: &[(f64, f64, f64)]) -> f64 {
    let oct = (f.max(50.0) / 1000.0).log2();
    let base = match class {
        0 => -3.0 * oct + 10.0 * (-((oct - 0.6) / 0.5).powi(2)).exp(),
        1 => -6.0 * oct,
        2 => -3.0 * oct,
        _ => 0.0,
    };
    let rip: f64 = ripple
        .iter()
        .map(|(centre, width, gain)| gain * (-((oct - centre) / width).powi(2)).exp())
        .sum();
    base + slope_jitter * oct + rip
}

fn random_ripple(rng: &mut ChaCha8Rng) -> Vec<(f64, f64, f64)> {
    (0..3)
        .map(|_| {
            (
                rng.random_range(-3.0..3.0),
                rng.random_range(0.3..1.0),
                rng.random_range(-2.0..2.0),
            )
        })
        .collect()
}

/// Gaussian noise shaped to the class spectrum, scaled to unit RMS.
fn shaped_noise(
    class: usize,
    n: usize,
    sample_rate: u32,
    rng: &mut ChaCha8Rng,
    planner: &mut FftPlanner<f64>,
) -> Vec<f64> {
    let slope_jitter = rng.random_range(-1.5..1.5);
    let ripple = random_ripple(rng);
    let mut spec: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    planner.plan_fft_forward(n).process(&mut spec);
    for (k, v) in spec.iter_mut().enumerate() {
        let bin = k.min(n - k);
        let f = bin as f64 * sample_rate as f64 / n as f64;
        *v *= 10f64.powf(shape_db(class, f, slope_jitter, &ripple) / 20.0);
    }
    spec[0] = Complex::new(0.0, 0.0);
    planner.plan_fft_inverse(n).process(&mut spec);
    let rms = (spec.iter().map(|v| v.re * v.re).sum::<f64>() / n as f64).sqrt();
    spec.iter().map(|v| if rms > 0.0 { v.re / rms } else { 0.0 }).collect()
}

/// One scene clip of `class` (index into [`SCENE_CLASSES`]).
///
/// Two independently jittered realizations of the class spectrum are
/// cross-faded slowly, and the result is amplitude modulated, so the
/// spectrum drifts within the clip.
pub fn scene_clip(class: usize, duration_s: f64, sample_rate: u32, seed: u64) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ((duration_s * sample_rate as f64).round() as usize).max(2);
    let level_db = -30.0 + rng.random_range(-3.0..3.0);
    let am_depth = rng.random_range(0.0..0.5);
    let am_rate = rng.random_range(0.2..1.0);
    let am_phase = rng.random_range(0.0..2.0 * PI);
    let fade_rate = rng.random_range(0.05..0.3);
    let fade_phase = rng.random_range(0.0..2.0 * PI);

    let mut planner = FftPlanner::new();
    let a = shaped_noise(class, n, sample_rate, &mut rng, &mut planner);
    let b = shaped_noise(class, n, sample_rate, &mut rng, &mut planner);
    let mut x: Vec<f64> = a
        .iter()
        .zip(&b)
        .enumerate()
        .map(|(i, (a, b))| {
            let t = i as f64 / sample_rate as f64;
            let fade = 0.5 + 0.5 * (2.0 * PI * fade_rate * t + fade_phase).sin();
            let am = 1.0 + am_depth * (2.0 * PI * am_rate * t + am_phase).sin();
            am * (fade.sqrt() * a + (1.0 - fade).sqrt() * b)
        })
        .collect();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let g = if rms > 0.0 { 10f64.powf(level_db / 20.0) / rms } else { 0.0 };
    x.iter_mut().for_each(|v| *v = (*v * g).clamp(-1.0, 1.0));
    AudioBuffer::mono(x, sample_rate).expect("mono buffer")
}

/// Fundamental-frequency range of speaker `k` among `n` speakers.
pub fn speaker_f0(k: usize, n: usize) -> f64 {
    90.0 + 130.0 * k as f64 / n.max(1) as f64
}

/// Speech-like surrogate: a harmonic complex with a drifting f0, vowel-like
/// formant envelopes, syllabic amplitude modulation and pauses.
pub fn speech_utterance(f0_hz: f64, duration_s: f64, sample_rate: u32, seed: u64) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round() as usize;

    // (start, length, f1, f2) per syllable, grouped into words with pauses.
    let mut syllables = Vec::new();
    let mut t = rng.random_range(0.0..0.2);
    while t < duration_s {
        let n_syl = rng.random_range(2..=5);
        for _ in 0..n_syl {
            let len = rng.random_range(0.12..0.28);
            syllables.push((t, len, rng.random_range(300.0..800.0), rng.random_range(900.0..2500.0)));
            t += len + rng.random_range(0.0..0.03);
        }
        t += rng.random_range(0.08..0.5);
    }

    let vib_rate = rng.random_range(0.3..0.8);
    let vib_phase = rng.random_range(0.0..2.0 * PI);
    let nyq = 0.45 * sr;
    let mut out = vec![0.0; n];
    let mut phase = 0.0;
    let mut syl = 0;
    let mut amps: Vec<f64> = Vec::new();
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let f0 = f0_hz * (1.0 + 0.08 * (2.0 * PI * vib_rate * t + vib_phase).sin());
        phase += 2.0 * PI * f0 / sr;
        if phase > 2.0 * PI {
            phase -= 2.0 * PI;
        }
        while syl < syllables.len() && t >= syllables[syl].0 + syllables[syl].1 {
            syl += 1;
        }
        let Some(&(start, len, f1, f2)) = syllables.get(syl) else {
            continue;
        };
        if t < start {
            continue;
        }
        if i % 32 == 0 || amps.is_empty() {
            let harmonics = ((4000.0f64).min(nyq) / f0) as usize;
            amps = (1..=harmonics)
                .map(|h| {
                    let f = h as f64 * f0;
                    let tilt = 1.0 / (1.0 + (f / 500.0).powi(2)).sqrt();
                    tilt * (1.0
                        + 4.0 * (-((f - f1) / 100.0).powi(2)).exp()
                        + 3.0 * (-((f - f2) / 150.0).powi(2)).exp())
                })
                .collect();
        }
        let env = (PI * (t - start) / len).sin().powi(2);
        let s: f64 = amps
            .iter()
            .enumerate()
            .map(|(h, a)| a * ((h + 1) as f64 * phase).sin())
            .sum();
        *o = env * s;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    AudioBuffer::mono(out, sample_rate).expect("mono buffer")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub clip_secs: f64,
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub utterance_secs: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            train_per_class: 30,
            test_per_class: 20,
            clip_secs: 10.0,
            n_speakers: 8,
            utterances_per_speaker: 4,
            utterance_secs: 4.0,
            sample_rate: 16000,
            seed: 0,
        }
    }
}

/// Manifests of a generated corpus.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub train: CorpusManifest,
    pub test: CorpusManifest,
    pub speech: CorpusManifest,
}

impl SynthCorpus {
    /// Speakers of the first half, used for training-side mixing.
    pub fn train_speakers(&self) -> Vec<String> {
        self.speakers(true)
    }

    /// Speakers of the second half, held out for evaluation mixing.
    pub fn test_speakers(&self) -> Vec<String> {
        self.speakers(false)
    }

    fn speakers(&self, first_half: bool) -> Vec<String> {
        let mut all: Vec<String> = self
            .speech
            .entries
            .iter()
            .filter_map(|e| e.speaker_id.clone())
            .collect();
        all.sort_by_key(|s| s.trim_start_matches("spk").parse::<usize>().unwrap_or(0));
        all.dedup();
        let half = all.len() / 2;
        if first_half {
            all[..half].to_vec()
        } else {
            all[half..].to_vec()
        }
    }
}

fn write(path: &Path, buf: &AudioBuffer, id: &str) -> Result<(), CorpusError> {
    write_wav_i16(path, buf).map_err(|source| CorpusError::Audio {
        id: id.to_string(),
        source,
    })
}

/// Writes scene clips, speech utterances and their manifests
/// (`train.jsonl`, `test.jsonl`, `speech.jsonl`) under `out_dir`.
pub fn generate_corpus(out_dir: &Path, spec: &SynthSpec) -> Result<SynthCorpus, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: out_dir.display().to_string(),
        source,
    };
    fs::create_dir_all(out_dir.join("scenes")).map_err(io_err)?;
    fs::create_dir_all(out_dir.join("speech")).map_err(io_err)?;

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, label) in SCENE_CLASSES.iter().enumerate() {
        for (split, count, sink) in [
            ("train", spec.train_per_class, &mut train),
            ("test", spec.test_per_class, &mut test),
        ] {
            for i in 0..count {
                let id = format!("{label}_{split}_{i:03}");
                let split_idx = if split == "train" { 0 } else { 1 };
                let seed = sub_seed(spec.seed, (c * 2 + split_idx) as u64, i as u64);
                let buf = scene_clip(c, spec.clip_secs, spec.sample_rate, seed);
                let rel = format!("scenes/{id}.wav");
                write(&out_dir.join(&rel), &buf, &id)?;
                let mut e = ManifestEntry::new(id, rel, *label);
                if split == "train" {
                    e.fold = Some((i % 4) as u32);
                }
                sink.push(e);
            }
        }
    }

    let mut speech = Vec::new();
    for k in 0..spec.n_speakers {
        let f0 = speaker_f0(k, spec.n_speakers);
        for j in 0..spec.utterances_per_speaker {
            let id = format!("spk{k}_{j:02}");
            let seed = sub_seed(spec.seed, 1000 + k as u64, j as u64);
            let jittered = f0 * (1.0 + 0.05 * ((seed % 1000) as f64 / 1000.0 - 0.5));
            let buf = speech_utterance(jittered, spec.utterance_secs, spec.sample_rate, seed);
            let rel = format!("speech/{id}.wav");
            write(&out_dir.join(&rel), &buf, &id)?;
            let mut e = ManifestEntry::new(id, rel, "speech");
            e.speaker_id = Some(format!("spk{k}"));
            speech.push(e);
        }
    }

    let corpus = SynthCorpus {
        train: CorpusManifest::new(train, out_dir),
        test: CorpusManifest::new(test, out_dir),
        speech: CorpusManifest::new(speech, out_dir),
    };
    corpus.train.save(out_dir.join("train.jsonl"))?;
    corpus.test.save(out_dir.join("test.jsonl"))?;
    corpus.speech.save(out_dir.join("speech.jsonl"))?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixer::{active_speech_level, rms_level};

    #[test]
    fn scene_clips_are_deterministic_and_levelled() {
        let a = scene_clip(2, 1.0, 16000, 7);
        let b = scene_clip(2, 1.0, 16000, 7);
        assert_eq!(a, b);
        assert_eq!(a.frames(), 16000);
        let level = rms_level(&a).unwrap().level_db;
        assert!((-37.0..-23.0).contains(&level), "{level}");
        assert_ne!(scene_clip(2, 1.0, 16000, 8), a);
    }

    #[test]
    fn classes_have_distinct_tilt() {
        // Low/high band energy ratio orders the tilted classes.
        let ratio = |c: usize| {
            let x = scene_clip(c, 2.0, 16000, 3);
            let s = x.samples();
            let lp: Vec<f64> = s.windows(8).map(|w| w.iter().sum::<f64>() / 8.0).collect();
            let low: f64 = lp.iter().map(|v| v * v).sum();
            let total: f64 = s.iter().map(|v| v * v).sum();
            low / total
        };
        assert!(ratio(1) > ratio(2));
        assert!(ratio(2) > ratio(3));
    }

    #[test]
    fn utterance_has_pauses_and_activity() {
        let u = speech_utterance(120.0, 3.0, 16000, 1);
        assert_eq!(u.frames(), 48000);
        assert!(u.peak() <= 0.5 + 1e-12 && u.peak() > 0.4);
        let silent = u.samples().chunks(160).filter(|c| c.iter().all(|v| *v == 0.0)).count();
        assert!(silent > 10);
        assert!(active_speech_level(&u).is_ok());
    }

    #[test]
    fn sub_seeds_differ() {
        assert_ne!(sub_seed(1, 0, 0), sub_seed(1, 0, 1));
        assert_ne!(sub_seed(1, 0, 1), sub_seed(1, 1, 0));
        assert_eq!(sub_seed(5, 2, 3), sub_seed(5, 2, 3));
    }

    #[test]
    fn corpus_layout() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            train_per_class: 2,
            test_per_class: 1,
            clip_secs: 0.5,
            n_speakers: 4,
            utterances_per_speaker: 1,
            utterance_secs: 1.0,
            ..SynthSpec::default()
        };
        let c = generate_corpus(dir.path(), &spec).unwrap();
        assert_eq!(c.train.len(), 8);
        assert_eq!(c.test.len(), 4);
        assert_eq!(c.speech.len(), 4);
        assert_eq!(c.train_speakers(), vec!["spk0", "spk1"]);
        assert_eq!(c.test_speakers(), vec!["spk2", "spk3"]);
        let loaded = CorpusManifest::load(dir.path().join("train.jsonl")).unwrap();
        assert_eq!(loaded.entries, c.train.entries);
        assert!(dir.path().join("speech/spk3_00.wav").exists());
    }
}
