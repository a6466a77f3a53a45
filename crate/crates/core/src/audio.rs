//! Audio ingestion: PCM WAV I/O, mono downmix, band-limited resampling and
//! windowed framing.
//!
//! Every downstream stage works on mono `f64` samples in `[-1, 1]` at a
//! single fixed rate. Integer PCM is normalized by `2^(bits-1)`.

use std::f64::consts::PI;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("audio file not found: {0}")]
    NotFound(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("unsupported codec in {path}: {detail}")]
    UnsupportedCodec { path: String, detail: String },
    #[error("corrupt or truncated WAV header in {path}: {detail}")]
    CorruptHeader { path: String, detail: String },
    #[error("sample {value} at index {index} lies outside [-1, 1]")]
    Clipping { index: usize, value: f64 },
    #[error("invalid audio buffer: {0}")]
    InvalidBuffer(String),
    #[error("invalid sample rate {0}")]
    InvalidRate(u32),
    #[error("invalid frame configuration: {0}")]
    InvalidFrameConfig(String),
    #[error("signal of {len} samples is shorter than one frame of {frame_len}")]
    TooShort { len: usize, frame_len: usize },
}

/// Interleaved sampled waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
    channels: u16,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32, channels: u16) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidRate(sample_rate));
        }
        if channels == 0 {
            return Err(AudioError::InvalidBuffer("zero channels".into()));
        }
        if samples.len() % channels as usize != 0 {
            return Err(AudioError::InvalidBuffer(format!(
                "{} samples not divisible by {} channels",
                samples.len(),
                channels
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
            channels,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        Self::new(samples, sample_rate, 1)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channels(&self) -> u16 {
        self.channels
    }

    /// Number of sample frames (samples per channel).
    pub fn frames(&self) -> usize {
        self.samples.len() / self.channels as usize
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }
}

fn classify_hound_error(path: &Path, err: hound::Error) -> AudioError {
    let p = path.display().to_string();
    match err {
        hound::Error::IoError(e) if e.kind() == io::ErrorKind::NotFound => AudioError::NotFound(p),
        hound::Error::IoError(e)
            if e.kind() == io::ErrorKind::UnexpectedEof
                || e.to_string().contains("enough bytes") =>
        {
            AudioError::CorruptHeader {
                path: p,
                detail: "unexpected end of file".into(),
            }
        }
        hound::Error::IoError(e) => AudioError::Io { path: p, source: e },
        hound::Error::FormatError(msg) => AudioError::CorruptHeader {
            path: p,
            detail: msg.to_string(),
        },
        hound::Error::Unsupported => AudioError::UnsupportedCodec {
            path: p,
            detail: "format not supported".into(),
        },
        other => AudioError::CorruptHeader {
            path: p,
            detail: other.to_string(),
        },
    }
}

/// Reads a PCM WAV file (16/24/32-bit integer or 32-bit float).
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(AudioError::NotFound(path.display().to_string()));
    }
    let reader = hound::WavReader::open(path).map_err(|e| classify_hound_error(path, e))?;
    let spec = reader.spec();
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let scale = (1i64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(|e| classify_hound_error(path, e))?
        }
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(|e| classify_hound_error(path, e))?,
        (fmt, bits) => {
            return Err(AudioError::UnsupportedCodec {
                path: path.display().to_string(),
                detail: format!("{fmt:?} with {bits} bits per sample"),
            })
        }
    };
    let frames = samples.len() / spec.channels.max(1) as usize;
    let mut samples = samples;
    // A truncated data chunk can leave a partial trailing frame.
    samples.truncate(frames * spec.channels.max(1) as usize);
    AudioBuffer::new(samples, spec.sample_rate, spec.channels)
}

/// Writes a 16-bit PCM WAV. Samples outside `[-1, 1]` are rejected;
/// `+1.0` saturates to the largest positive code.
pub fn write_wav_i16(path: impl AsRef<Path>, buf: &AudioBuffer) -> Result<(), AudioError> {
    let path = path.as_ref();
    if let Some((index, &value)) = buf
        .samples
        .iter()
        .enumerate()
        .find(|(_, s)| !(s.abs() <= 1.0))
    {
        return Err(AudioError::Clipping { index, value });
    }
    let spec = hound::WavSpec {
        channels: buf.channels,
        sample_rate: buf.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| classify_hound_error(path, e))?;
    for &s in &buf.samples {
        let code = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(code)
            .map_err(|e| classify_hound_error(path, e))?;
    }
    writer.finalize().map_err(|e| classify_hound_error(path, e))
}

/// Writes a 32-bit float WAV. Samples outside `[-1, 1]` are rejected.
pub fn write_wav_f32(path: impl AsRef<Path>, buf: &AudioBuffer) -> Result<(), AudioError> {
    let path = path.as_ref();
    if let Some((index, &value)) = buf
        .samples
        .iter()
        .enumerate()
        .find(|(_, s)| !(s.abs() <= 1.0))
    {
        return Err(AudioError::Clipping { index, value });
    }
    let spec = hound::WavSpec {
        channels: buf.channels,
        sample_rate: buf.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| classify_hound_error(path, e))?;
    for &s in &buf.samples {
        writer
            .write_sample(s as f32)
            .map_err(|e| classify_hound_error(path, e))?;
    }
    writer.finalize().map_err(|e| classify_hound_error(path, e))
}

/// Averages interleaved channels into one.
pub fn downmix_mono(buf: &AudioBuffer) -> AudioBuffer {
    if buf.channels == 1 {
        return buf.clone();
    }
    let ch = buf.channels as usize;
    let samples = buf
        .samples
        .chunks_exact(ch)
        .map(|frame| frame.iter().sum::<f64>() / ch as f64)
        .collect();
    AudioBuffer {
        samples,
        sample_rate: buf.sample_rate,
        channels: 1,
    }
}

/// Windowed-sinc resampler parameters. The low-pass cutoff is expressed as
/// a fraction of the lower of the two sample rates.
#[derive(Debug, Clone, Copy)]
pub struct ResamplerConfig {
    pub cutoff_fraction: f64,
    pub zero_crossings: usize,
    pub kaiser_beta: f64,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        Self {
            cutoff_fraction: 0.45,
            zero_crossings: 32,
            kaiser_beta: 8.6,
        }
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Resamples a mono buffer to `target_rate`.
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer, AudioError> {
    resample_with(buf, target_rate, ResamplerConfig::default())
}

pub fn resample_with(
    buf: &AudioBuffer,
    target_rate: u32,
    cfg: ResamplerConfig,
) -> Result<AudioBuffer, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::InvalidRate(target_rate));
    }
    if buf.channels != 1 {
        return Err(AudioError::InvalidBuffer(
            "resampling requires a mono buffer".into(),
        ));
    }
    if target_rate == buf.sample_rate {
        return Ok(buf.clone());
    }
    let in_rate = buf.sample_rate as f64;
    let out_rate = target_rate as f64;
    let input = &buf.samples;
    let out_len = (input.len() as f64 * out_rate / in_rate).round() as usize;

    // Cutoff in cycles per input sample.
    let fc = cfg.cutoff_fraction * in_rate.min(out_rate) / in_rate;
    let half_width = cfg.zero_crossings as f64 / (2.0 * fc);
    let i0_beta = bessel_i0(cfg.kaiser_beta);
    let ratio = in_rate / out_rate;

    let samples = (0..out_len)
        .map(|n| {
            let t = n as f64 * ratio;
            let lo = ((t - half_width).ceil().max(0.0)) as usize;
            let hi = ((t + half_width).floor() as isize).min(input.len() as isize - 1);
            if hi < lo as isize {
                return 0.0;
            }
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (k, &x) in input.iter().enumerate().take(hi as usize + 1).skip(lo) {
                let tau = k as f64 - t;
                let r = tau / half_width;
                let win = bessel_i0(cfg.kaiser_beta * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
                let h = 2.0 * fc * sinc(2.0 * fc * tau) * win;
                acc += h * x;
                wsum += h;
            }
            if wsum.abs() > 1e-12 {
                acc / wsum
            } else {
                acc
            }
        })
        .collect();
    AudioBuffer::new(samples, target_rate, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hann,
    Hamming,
    Rect,
}

impl Window {
    /// Periodic window coefficients of length `len`.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        let n = len as f64;
        (0..len)
            .map(|i| {
                let phase = 2.0 * PI * i as f64 / n;
                match self {
                    Window::Hann => 0.5 - 0.5 * phase.cos(),
                    Window::Hamming => 0.54 - 0.46 * phase.cos(),
                    Window::Rect => 1.0,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameConfig {
    pub frame_len_ms: f64,
    pub overlap_fraction: f64,
    pub window: Window,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            frame_len_ms: 40.0,
            overlap_fraction: 0.5,
            window: Window::Hann,
        }
    }
}

impl FrameConfig {
    /// Frame length and hop in samples at `sample_rate`.
    pub fn frame_and_hop(&self, sample_rate: u32) -> Result<(usize, usize), AudioError> {
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(AudioError::InvalidFrameConfig(format!(
                "overlap fraction {} not in [0, 1)",
                self.overlap_fraction
            )));
        }
        let exact = self.frame_len_ms * sample_rate as f64 / 1000.0;
        let frame_len = exact.round();
        if frame_len < 1.0 || (exact - frame_len).abs() > 1e-9 {
            return Err(AudioError::InvalidFrameConfig(format!(
                "{} ms at {} Hz is not a whole number of samples",
                self.frame_len_ms, sample_rate
            )));
        }
        let frame_len = frame_len as usize;
        let hop = ((frame_len as f64) * (1.0 - self.overlap_fraction)).round().max(1.0) as usize;
        Ok((frame_len, hop))
    }
}

/// Number of whole frames that fit in `len` samples.
pub fn frame_count(len: usize, frame_len: usize, hop: usize) -> usize {
    if len < frame_len {
        0
    } else {
        (len - frame_len) / hop + 1
    }
}

/// Splits a mono buffer into windowed frames; the trailing partial frame is
/// dropped.
pub fn frame_signal(buf: &AudioBuffer, cfg: &FrameConfig) -> Result<Vec<Vec<f64>>, AudioError> {
    if buf.channels != 1 {
        return Err(AudioError::InvalidBuffer("framing requires a mono buffer".into()));
    }
    let (frame_len, hop) = cfg.frame_and_hop(buf.sample_rate)?;
    let n = frame_count(buf.samples.len(), frame_len, hop);
    if n == 0 {
        return Err(AudioError::TooShort {
            len: buf.samples.len(),
            frame_len,
        });
    }
    let window = cfg.window.coefficients(frame_len);
    Ok((0..n)
        .map(|i| {
            buf.samples[i * hop..i * hop + frame_len]
                .iter()
                .zip(&window)
                .map(|(s, w)| s * w)
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, len: usize, amp: f64) -> Vec<f64> {
        (0..len)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / rate as f64).sin())
            .collect()
    }

    #[test]
    fn silence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("silence.wav");
        let buf = AudioBuffer::mono(vec![0.0; 16000], 16000).unwrap();
        write_wav_i16(&path, &buf).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 16000);
        assert_eq!(back.frames(), 16000);
        assert!(back.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn pcm16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(16384i16).unwrap();
        w.write_sample(-32768i16).unwrap();
        w.finalize().unwrap();
        let back = read_wav(&path).unwrap();
        assert!((back.samples()[0] - 0.5).abs() <= 1.0 / 32768.0);
        assert_eq!(back.samples()[1], -1.0);
    }

    #[test]
    fn read_24_bit_and_float() {
        let dir = tempfile::tempdir().unwrap();
        let p24 = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p24, spec).unwrap();
        w.write_sample(1 << 22).unwrap();
        w.write_sample(-(1 << 22)).unwrap();
        w.finalize().unwrap();
        let b = read_wav(&p24).unwrap();
        assert_eq!(b.channels(), 2);
        assert_eq!(b.samples(), &[0.5, -0.5]);

        let pf = dir.path().join("f.wav");
        let buf = AudioBuffer::mono(vec![0.25, -0.75], 22050).unwrap();
        write_wav_f32(&pf, &buf).unwrap();
        assert_eq!(read_wav(&pf).unwrap(), buf);
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.wav");
        assert!(matches!(read_wav(&missing), Err(AudioError::NotFound(_))));

        let path = dir.path().join("bad.wav");
        let buf = AudioBuffer::mono(vec![0.1; 100], 16000).unwrap();
        write_wav_i16(&path, &buf).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[..4].copy_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_wav(&path), Err(AudioError::CorruptHeader { .. })));

        // Rewrite the format tag to an A-law code (6).
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[..4].copy_from_slice(b"RIFF");
        bytes[20] = 6;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_wav(&path),
            Err(AudioError::UnsupportedCodec { .. }) | Err(AudioError::CorruptHeader { .. })
        ));

        let trunc = dir.path().join("trunc.wav");
        std::fs::write(&trunc, b"RIFF\x24\x00\x00\x00WAVEfmt ").unwrap();
        assert!(matches!(read_wav(&trunc), Err(AudioError::CorruptHeader { .. })));
    }

    #[test]
    fn clipping_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let buf = AudioBuffer::mono(vec![0.0, 1.5], 16000).unwrap();
        let err = write_wav_i16(dir.path().join("c.wav"), &buf).unwrap_err();
        assert!(matches!(err, AudioError::Clipping { index: 1, .. }));
    }

    #[test]
    fn downmix_cases() {
        let mono = AudioBuffer::mono(vec![0.1, 0.2, 0.3], 16000).unwrap();
        assert_eq!(downmix_mono(&mono), mono);

        let anti = AudioBuffer::new([0.5, -0.5].repeat(10), 16000, 2).unwrap();
        let m = downmix_mono(&anti);
        assert_eq!(m.channels(), 1);
        assert_eq!(m.frames(), 10);
        assert!(m.samples().iter().all(|&s| s == 0.0));

        let left = AudioBuffer::new([1.0, 0.0].repeat(10), 16000, 2).unwrap();
        assert!(downmix_mono(&left).samples().iter().all(|&s| s == 0.5));
    }

    #[test]
    fn resample_length_and_dc() {
        let buf = AudioBuffer::mono(vec![0.3; 44100], 44100).unwrap();
        let out = resample(&buf, 16000).unwrap();
        assert_eq!(out.frames(), 16000);
        assert_eq!(out.sample_rate(), 16000);
        for &s in &out.samples()[200..15800] {
            assert!((s - 0.3).abs() < 1e-3);
        }
        assert!(matches!(resample(&buf, 0), Err(AudioError::InvalidRate(0))));
    }

    #[test]
    fn resample_sine_matches_analytic() {
        let input = AudioBuffer::mono(sine(1000.0, 44100, 44100, 0.8), 44100).unwrap();
        let out = resample(&input, 16000).unwrap();
        let expected = sine(1000.0, 16000, 16000, 0.8);
        for i in 200..15800 {
            assert!(
                (out.samples()[i] - expected[i]).abs() < 1e-2,
                "sample {i}: {} vs {}",
                out.samples()[i],
                expected[i]
            );
        }
    }

    #[test]
    fn resample_round_trip_band_limited() {
        let n = 16000;
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / 16000.0;
                0.4 * (2.0 * PI * 440.0 * t).sin() + 0.3 * (2.0 * PI * 3100.0 * t + 0.3).sin()
            })
            .collect();
        let buf = AudioBuffer::mono(x.clone(), 16000).unwrap();
        let up = resample(&buf, 44100).unwrap();
        let back = resample(&up, 16000).unwrap();
        assert_eq!(back.frames(), n);
        let err: f64 = x[400..n - 400]
            .iter()
            .zip(&back.samples()[400..n - 400])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / (n - 800) as f64;
        assert!(err.sqrt() < 1e-2, "rms error {}", err.sqrt());
    }

    #[test]
    fn framing() {
        let buf = AudioBuffer::mono(vec![1.0; 16000], 16000).unwrap();
        let cfg = FrameConfig::default();
        let frames = frame_signal(&buf, &cfg).unwrap();
        assert_eq!(frames.len(), 49);
        assert!(frames.iter().all(|f| f.len() == 640));
        assert_eq!(cfg.frame_and_hop(16000).unwrap(), (640, 320));

        let rect = FrameConfig {
            window: Window::Rect,
            ..cfg
        };
        let frames = frame_signal(&buf, &rect).unwrap();
        assert!(frames.iter().flatten().all(|&s| s == 1.0));

        let short = AudioBuffer::mono(vec![0.0; 100], 16000).unwrap();
        assert!(matches!(
            frame_signal(&short, &cfg),
            Err(AudioError::TooShort { len: 100, frame_len: 640 })
        ));
    }

    #[test]
    fn non_integer_frame_length_rejected() {
        let cfg = FrameConfig {
            frame_len_ms: 40.0,
            ..Default::default()
        };
        assert!(cfg.frame_and_hop(44100).is_ok());
        let cfg = FrameConfig {
            frame_len_ms: 25.0,
            ..Default::default()
        };
        assert!(cfg.frame_and_hop(22050).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn frame_count_formula(len in 640usize..20000, ov in prop::sample::select(vec![0.0, 0.25, 0.5, 0.75])) {
                let cfg = FrameConfig { frame_len_ms: 40.0, overlap_fraction: ov, window: Window::Rect };
                let (flen, hop) = cfg.frame_and_hop(16000).unwrap();
                let buf = AudioBuffer::mono(vec![0.0; len], 16000).unwrap();
                let frames = frame_signal(&buf, &cfg).unwrap();
                prop_assert_eq!(frames.len(), (len - flen) / hop + 1);
            }

            #[test]
            fn pcm16_round_trip(codes in prop::collection::vec(any::<i16>(), 1..200)) {
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("rt.wav");
                let buf = AudioBuffer::mono(codes.iter().map(|&c| c as f64 / 32768.0).collect(), 16000).unwrap();
                write_wav_i16(&path, &buf).unwrap();
                let once = read_wav(&path).unwrap();
                prop_assert_eq!(&once, &buf);
                write_wav_i16(&path, &once).unwrap();
                prop_assert_eq!(read_wav(&path).unwrap(), buf);
            }

            #[test]
            fn downmix_idempotent(xs in prop::collection::vec(-1.0f64..1.0, 0..64)) {
                let buf = AudioBuffer::new(xs, 8000, 1).unwrap();
                let once = downmix_mono(&buf);
                prop_assert_eq!(downmix_mono(&once), once);
            }
        }
    }
}
