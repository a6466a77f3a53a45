use rustfft::{num_complex::Complex, FftPlanner};

use super::FeatureError;

/// Frame-by-bin power spectrogram, row-major (`n_frames × n_bins`).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Vec<f64>,
    n_frames: usize,
    n_bins: usize,
    pub bin_hz: f64,
    pub frame_hop_s: f64,
}

impl Spectrogram {
    pub fn from_rows(
        rows: Vec<Vec<f64>>,
        bin_hz: f64,
        frame_hop_s: f64,
    ) -> Result<Self, FeatureError> {
        let n_frames = rows.len();
        if n_frames == 0 {
            return Err(FeatureError::Empty);
        }
        let n_bins = rows[0].len();
        if rows.iter().any(|r| r.len() != n_bins) {
            return Err(FeatureError::Dimension("ragged spectrogram rows".into()));
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if data.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(FeatureError::InvalidValue(
                "spectrogram entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            data,
            n_frames,
            n_bins,
            bin_hz,
            frame_hop_s,
        })
    }

    pub(crate) fn from_flat_unchecked(
        data: Vec<f64>,
        n_frames: usize,
        n_bins: usize,
        bin_hz: f64,
        frame_hop_s: f64,
    ) -> Self {
        debug_assert_eq!(data.len(), n_frames * n_bins);
        Self {
            data,
            n_frames,
            n_bins,
            bin_hz,
            frame_hop_s,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn fft_size(&self) -> usize {
        (self.n_bins - 1) * 2
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_bins)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Multiplies every entry by `gain`.
    pub fn scaled(&self, gain: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= gain);
        out
    }
}

/// Periodogram `|X_k|^2` for bins `0..=fft/2` of each frame, with the FFT
/// size rounded up to the next power of two.
pub fn power_spectrogram(
    frames: &[Vec<f64>],
    sample_rate: u32,
    hop: usize,
) -> Result<Spectrogram, FeatureError> {
    let first = frames.first().ok_or(FeatureError::Empty)?;
    let frame_len = first.len();
    if frame_len == 0 || frames.iter().any(|f| f.len() != frame_len) {
        return Err(FeatureError::Dimension(
            "frames must be non-empty and of uniform length".into(),
        ));
    }
    let fft_size = frame_len.next_power_of_two();
    let n_bins = fft_size / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut data = Vec::with_capacity(frames.len() * n_bins);
    for frame in frames {
        for (b, &s) in buf.iter_mut().zip(frame.iter()) {
            *b = Complex::new(s, 0.0);
        }
        buf[frame_len..].fill(Complex::new(0.0, 0.0));
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend(buf[..n_bins].iter().map(|c| c.norm_sqr()));
    }
    Ok(Spectrogram::from_flat_unchecked(
        data,
        frames.len(),
        n_bins,
        sample_rate as f64 / fft_size as f64,
        hop as f64 / sample_rate as f64,
    ))
}
