use super::{FeatureError, Spectrogram};

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over the bins of a one-sided spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterBank {
    weights: Vec<f64>,
    n_filters: usize,
    n_bins: usize,
    center_freqs_hz: Vec<f64>,
    /// All `n_filters + 2` triangle vertices, including the outer edges.
    vertices_hz: Vec<f64>,
}

impl MelFilterBank {
    /// Unit-peak triangles whose vertices sit at `n_filters + 2` points spaced
    /// evenly on the HTK mel scale between `fmin` and `fmax`.
    pub fn new(
        n_filters: usize,
        fft_size: usize,
        sample_rate: u32,
        fmin: f64,
        fmax: f64,
    ) -> Result<Self, FeatureError> {
        let nyquist = sample_rate as f64 / 2.0;
        if n_filters == 0 || fft_size < 2 {
            return Err(FeatureError::InvalidConfig(
                "mel bank needs at least one filter and fft_size >= 2".into(),
            ));
        }
        if !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist) {
            return Err(FeatureError::InvalidConfig(format!(
                "invalid mel range [{fmin}, {fmax}] for Nyquist {nyquist}"
            )));
        }
        let n_bins = fft_size / 2 + 1;
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let (mel_lo, mel_hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let step = (mel_hi - mel_lo) / (n_filters + 1) as f64;
        let vertices_hz: Vec<f64> = (0..n_filters + 2)
            .map(|i| mel_to_hz(mel_lo + step * i as f64))
            .collect();

        let mut weights = vec![0.0; n_filters * n_bins];
        for m in 0..n_filters {
            let (lo, center, hi) = (vertices_hz[m], vertices_hz[m + 1], vertices_hz[m + 2]);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                *w = if f > lo && f <= center {
                    (f - lo) / (center - lo)
                } else if f > center && f < hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
            }
        }
        Ok(Self {
            weights,
            n_filters,
            n_bins,
            center_freqs_hz: vertices_hz[1..=n_filters].to_vec(),
            vertices_hz,
        })
    }

    pub fn n_filters(&self) -> usize {
        self.n_filters
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn center_freqs_hz(&self) -> &[f64] {
        &self.center_freqs_hz
    }

    pub fn vertices_hz(&self) -> &[f64] {
        &self.vertices_hz
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Filter-bank energies for one power spectrum row.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate().take(self.n_filters) {
            *o = self
                .row(m)
                .iter()
                .zip(power)
                .map(|(w, p)| w * p)
                .sum();
        }
    }

    pub fn check_compatible(&self, spec: &Spectrogram) -> Result<(), FeatureError> {
        if spec.n_bins() != self.n_bins {
            return Err(FeatureError::Dimension(format!(
                "spectrogram has {} bins but the mel bank expects {}",
                spec.n_bins(),
                self.n_bins
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forty_filters_at_16k() {
        let bank = MelFilterBank::new(40, 1024, 16000, 0.0, 8000.0).unwrap();
        assert_eq!(bank.n_filters(), 40);
        assert_eq!(bank.n_bins(), 513);
        let c = bank.center_freqs_hz();
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        // Even spacing on the mel scale.
        let mels: Vec<f64> = bank.vertices_hz().iter().map(|&f| hz_to_mel(f)).collect();
        let d0 = mels[1] - mels[0];
        assert!(mels.windows(2).all(|w| ((w[1] - w[0]) - d0).abs() < 1e-9));
    }

    #[test]
    fn rows_are_unimodal_triangles() {
        let bank = MelFilterBank::new(40, 1024, 16000, 0.0, 8000.0).unwrap();
        for m in 0..40 {
            let row = bank.row(m);
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            let peak = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert!(row[..=peak].windows(2).all(|w| w[0] <= w[1]));
            assert!(row[peak..].windows(2).all(|w| w[0] >= w[1]));
            assert!(row[peak] > 0.0);
        }
    }

    #[test]
    fn interior_bins_covered() {
        let bank = MelFilterBank::new(40, 1024, 16000, 0.0, 8000.0).unwrap();
        let bin_hz = 16000.0 / 1024.0;
        let (first, last) = (bank.vertices_hz()[0], *bank.vertices_hz().last().unwrap());
        for k in 0..bank.n_bins() {
            let f = k as f64 * bin_hz;
            if f <= first || f >= last {
                continue;
            }
            // Direct summation over all filters.
            let mut total = 0.0;
            for m in 0..40 {
                total += bank.row(m)[k];
            }
            assert!(total > 0.0 && total <= 1.0001, "bin {k}: {total}");
        }
    }

    #[test]
    fn invalid_ranges() {
        assert!(MelFilterBank::new(40, 1024, 16000, 4000.0, 4000.0).is_err());
        assert!(MelFilterBank::new(40, 1024, 16000, 5000.0, 100.0).is_err());
        assert!(MelFilterBank::new(40, 1024, 16000, 0.0, 9000.0).is_err());
    }

    #[test]
    fn mel_scale_inverse() {
        for f in [0.0, 100.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
    }
}
