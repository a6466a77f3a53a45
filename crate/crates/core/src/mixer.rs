//! Level measurement and speech-to-background-ratio (SBR) mixing.
//!
//! SBR is the active speech level of the speech track minus the RMS level of
//! the background, both in dB relative to full scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;

#[derive(Debug, Error, PartialEq)]
pub enum MixError {
    #[error("empty signal")]
    Empty,
    #[error("signal is digitally silent; level undefined")]
    Silent,
    #[error("no active speech frames")]
    NoActivity,
    #[error("sample rate mismatch: background {background} Hz, speech {speech} Hz")]
    RateMismatch { background: u32, speech: u32 },
    #[error("mixing requires mono buffers")]
    NotMono,
    #[error("non-finite target SBR")]
    InvalidTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelMethod {
    Rms,
    ActiveSpeech,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelMeasurement {
    pub level_db: f64,
    pub method: LevelMethod,
}

fn power_db(p: f64) -> f64 {
    10.0 * p.log10()
}

/// `20·log10(rms)` over all samples.
pub fn rms_level(buf: &AudioBuffer) -> Result<LevelMeasurement, MixError> {
    rms_level_of(buf.samples())
}

pub(crate) fn rms_level_of(samples: &[f64]) -> Result<LevelMeasurement, MixError> {
    if samples.is_empty() {
        return Err(MixError::Empty);
    }
    let ms = samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64;
    if ms == 0.0 {
        return Err(MixError::Silent);
    }
    Ok(LevelMeasurement {
        level_db: power_db(ms),
        method: LevelMethod::Rms,
    })
}

/// Activity detector settings for [`active_speech_level`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivityConfig {
    pub frame_ms: f64,
    pub smoothing_ms: f64,
    /// Frames whose smoothed energy is within this many dB of the loudest
    /// frame count as active.
    pub margin_db: f64,
}

impl Default for ActivityConfig {
    fn default() -> Self {
        Self {
            frame_ms: 10.0,
            smoothing_ms: 16.0,
            margin_db: 40.0,
        }
    }
}

/// RMS level over active frames only.
pub fn active_speech_level(buf: &AudioBuffer) -> Result<LevelMeasurement, MixError> {
    active_speech_level_with(buf.samples(), buf.sample_rate(), &ActivityConfig::default())
}

pub fn active_speech_level_with(
    samples: &[f64],
    sample_rate: u32,
    cfg: &ActivityConfig,
) -> Result<LevelMeasurement, MixError> {
    if samples.is_empty() {
        return Err(MixError::Empty);
    }
    let sr = sample_rate as f64;
    let frame = ((cfg.frame_ms * sr / 1000.0).round() as usize).max(1);
    let smooth = ((cfg.smoothing_ms * sr / 1000.0).round() as usize).max(1);

    // Centred moving average of the instantaneous power via a prefix sum.
    let mut prefix = Vec::with_capacity(samples.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for s in samples {
        acc += s * s;
        prefix.push(acc);
    }
    let half = smooth / 2;
    let n = samples.len();
    let envelope = |i: usize| {
        let lo = i.saturating_sub(half);
        let hi = (i + smooth - half).min(n);
        (prefix[hi] - prefix[lo]) / (hi - lo) as f64
    };

    let frames: Vec<(usize, usize, f64)> = (0..n)
        .step_by(frame)
        .map(|start| {
            let end = (start + frame).min(n);
            let env = (start..end).map(envelope).sum::<f64>() / (end - start) as f64;
            (start, end, env)
        })
        .collect();
    let loudest = frames.iter().fold(0.0f64, |m, f| m.max(f.2));
    if loudest == 0.0 {
        return Err(MixError::NoActivity);
    }
    let threshold = loudest * 10f64.powf(-cfg.margin_db / 10.0);
    let (energy, count) = frames
        .iter()
        .filter(|f| f.2 >= threshold)
        .fold((0.0, 0usize), |(e, c), &(s, t, _)| {
            (e + (prefix[t] - prefix[s]), c + (t - s))
        });
    if count == 0 || energy == 0.0 {
        return Err(MixError::NoActivity);
    }
    Ok(LevelMeasurement {
        level_db: power_db(energy / count as f64),
        method: LevelMethod::ActiveSpeech,
    })
}

/// Record of one mix, sufficient to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub background_id: String,
    pub speech_id: String,
    pub target_sbr_db: f64,
    /// Linear gain applied to the placed speech before summation.
    pub speech_gain: f64,
    /// Joint attenuation applied to the sum to keep the peak within
    /// full scale; 1 when no scaling was needed.
    pub headroom_gain: f64,
    /// Start offset into the speech clip, in samples.
    pub speech_offset: usize,
    pub rng_seed: u64,
}

/// The two scaled components of a mix; their sum is the output signal.
#[derive(Debug, Clone)]
pub struct MixComponents {
    pub background: Vec<f64>,
    pub speech: Vec<f64>,
}

/// Speech track placed over `len` samples: looped from a seeded random
/// offset when shorter than `len`, cut from a seeded random offset when
/// longer.
pub fn place_speech(speech: &[f64], len: usize, rng_seed: u64) -> (Vec<f64>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    if speech.is_empty() {
        return (vec![0.0; len], 0);
    }
    if speech.len() >= len {
        let offset = rng.random_range(0..=speech.len() - len);
        (speech[offset..offset + len].to_vec(), offset)
    } else {
        let offset = rng.random_range(0..speech.len());
        let placed = (0..len).map(|i| speech[(offset + i) % speech.len()]).collect();
        (placed, offset)
    }
}

pub fn speech_gain_for(target_sbr_db: f64, background_db: f64, speech_active_db: f64) -> f64 {
    10f64.powf((target_sbr_db + background_db - speech_active_db) / 20.0)
}

/// Mixes speech into a background at `target_sbr_db`.
pub fn mix_at_sbr(
    background: &AudioBuffer,
    speech: &AudioBuffer,
    target_sbr_db: f64,
    rng_seed: u64,
) -> Result<(AudioBuffer, MixSpec), MixError> {
    let (components, spec) = mix_components(background, speech, target_sbr_db, rng_seed)?;
    let samples = components
        .background
        .iter()
        .zip(&components.speech)
        .map(|(b, s)| (b + s).clamp(-1.0, 1.0))
        .collect();
    let out = AudioBuffer::mono(samples, background.sample_rate()).expect("valid mono buffer");
    Ok((out, spec))
}

/// Like [`mix_at_sbr`] but returns the scaled components separately.
pub fn mix_components(
    background: &AudioBuffer,
    speech: &AudioBuffer,
    target_sbr_db: f64,
    rng_seed: u64,
) -> Result<(MixComponents, MixSpec), MixError> {
    if background.channels() != 1 || speech.channels() != 1 {
        return Err(MixError::NotMono);
    }
    if background.sample_rate() != speech.sample_rate() {
        return Err(MixError::RateMismatch {
            background: background.sample_rate(),
            speech: speech.sample_rate(),
        });
    }
    if !target_sbr_db.is_finite() {
        return Err(MixError::InvalidTarget);
    }
    let bg_db = rms_level(background)?.level_db;
    if speech.is_empty() {
        return Err(MixError::Empty);
    }
    let (placed, offset) = place_speech(speech.samples(), background.frames(), rng_seed);
    let speech_db = match active_speech_level_with(
        &placed,
        speech.sample_rate(),
        &ActivityConfig::default(),
    ) {
        Ok(level) => level.level_db,
        Err(MixError::NoActivity) | Err(MixError::Silent) => return Err(MixError::Silent),
        Err(e) => return Err(e),
    };
    let gain = speech_gain_for(target_sbr_db, bg_db, speech_db);

    let peak = background
        .samples()
        .iter()
        .zip(&placed)
        .fold(0.0f64, |m, (b, s)| m.max((b + gain * s).abs()));
    let headroom = if peak > 1.0 { 1.0 / peak } else { 1.0 };

    let components = MixComponents {
        background: background.samples().iter().map(|b| headroom * b).collect(),
        speech: placed.iter().map(|s| headroom * gain * s).collect(),
    };
    let spec = MixSpec {
        background_id: String::new(),
        speech_id: String::new(),
        target_sbr_db,
        speech_gain: gain,
        headroom_gain: headroom,
        speech_offset: offset,
        rng_seed,
    };
    Ok((components, spec))
}

/// SBR re-measured from mix components.
pub fn measured_sbr(components: &MixComponents, sample_rate: u32) -> Result<f64, MixError> {
    let speech = active_speech_level_with(&components.speech, sample_rate, &ActivityConfig::default())?;
    let bg = rms_level_of(&components.background)?;
    Ok(speech.level_db - bg.level_db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn mono(s: Vec<f64>) -> AudioBuffer {
        AudioBuffer::mono(s, 16000).unwrap()
    }

    fn tone(len: usize, amp: f64, f: f64) -> Vec<f64> {
        (0..len)
            .map(|i| amp * (2.0 * PI * f * i as f64 / 16000.0).sin())
            .collect()
    }

    #[test]
    fn rms_cases() {
        assert_eq!(rms_level(&mono(vec![1.0; 100])).unwrap().level_db, 0.0);
        let sine = rms_level(&mono(tone(16000, 1.0, 1000.0))).unwrap();
        assert!((sine.level_db + 3.0103).abs() < 1e-4);
        assert_eq!(rms_level(&mono(vec![0.0; 10])), Err(MixError::Silent));
    }

    #[test]
    fn active_level_of_steady_tone_equals_rms() {
        let s = mono(tone(16000, 0.3, 440.0));
        let a = active_speech_level(&s).unwrap().level_db;
        let r = rms_level(&s).unwrap().level_db;
        assert!((a - r).abs() < 0.1);
    }

    #[test]
    fn active_level_half_silence() {
        let mut s = Vec::new();
        for _ in 0..5 {
            s.extend(tone(16000, 0.2, 300.0));
            s.extend(vec![0.0; 16000]);
        }
        let buf = mono(s);
        let a = active_speech_level(&buf).unwrap().level_db;
        let r = rms_level(&buf).unwrap().level_db;
        assert!((a - (r + 3.0103)).abs() < 0.2, "active {a} rms {r}");
    }

    #[test]
    fn active_level_silence_errors() {
        assert_eq!(active_speech_level(&mono(vec![0.0; 1600])), Err(MixError::NoActivity));
    }

    #[test]
    fn gain_formula() {
        assert_eq!(speech_gain_for(0.0, -20.0, -20.0), 1.0);
        assert!((speech_gain_for(-5.0, -20.0, -20.0) - 0.562341).abs() < 1e-6);
    }

    #[test]
    fn equal_levels_unit_gain() {
        let bg = mono(vec![0.1; 16000]);
        let sp = mono(vec![0.1; 16000]);
        let (_, spec) = mix_at_sbr(&bg, &sp, 0.0, 1).unwrap();
        assert!((spec.speech_gain - 1.0).abs() < 1e-12);
        assert_eq!(spec.headroom_gain, 1.0);
    }

    #[test]
    fn mixing_is_linear_without_headroom() {
        let bg = mono(tone(8000, 0.05, 97.0));
        let sp = mono(tone(3000, 0.2, 211.0));
        let (out, spec) = mix_at_sbr(&bg, &sp, -3.0, 9).unwrap();
        assert_eq!(spec.headroom_gain, 1.0);
        let (placed, _) = place_speech(sp.samples(), bg.frames(), 9);
        for ((o, b), s) in out.samples().iter().zip(bg.samples()).zip(&placed) {
            assert!(((o - b) - spec.speech_gain * s).abs() < 1e-15);
        }
    }

    #[test]
    fn headroom_preserves_sbr_and_peak() {
        let bg = mono(tone(16000, 0.9, 50.0));
        let sp = mono(tone(4000, 0.5, 400.0));
        let (out, spec) = mix_at_sbr(&bg, &sp, 20.0, 3).unwrap();
        assert!(spec.headroom_gain < 1.0);
        assert!(out.peak() <= 1.0);
        let (comp, _) = mix_components(&bg, &sp, 20.0, 3).unwrap();
        assert!((measured_sbr(&comp, 16000).unwrap() - 20.0).abs() < 0.2);
    }

    #[test]
    fn errors() {
        let bg = mono(vec![0.1; 100]);
        let sp8k = AudioBuffer::mono(vec![0.1; 100], 8000).unwrap();
        assert_eq!(
            mix_at_sbr(&bg, &sp8k, 0.0, 0).unwrap_err(),
            MixError::RateMismatch { background: 16000, speech: 8000 }
        );
        assert_eq!(mix_at_sbr(&bg, &mono(vec![0.0; 50]), 0.0, 0).unwrap_err(), MixError::Silent);
        assert_eq!(mix_at_sbr(&mono(vec![0.0; 50]), &bg, 0.0, 0).unwrap_err(), MixError::Silent);
    }

    #[test]
    fn placement_loops_and_truncates() {
        let speech: Vec<f64> = (0..10).map(f64::from).collect();
        let (placed, off) = place_speech(&speech, 25, 4);
        assert_eq!(placed.len(), 25);
        for (i, v) in placed.iter().enumerate() {
            assert_eq!(*v, speech[(off + i) % 10]);
        }
        let (cut, off) = place_speech(&speech, 4, 4);
        assert_eq!(cut, speech[off..off + 4].to_vec());
        assert_eq!(place_speech(&speech, 25, 4), place_speech(&speech, 25, 4));
    }
}
