use std::sync::OnceLock;

use super::{N_MELS, SAMPLE_RATE, STFT_WINDOW};

/// Triangular mel filterbank, 80 x (window/2 + 1), rows peak-normalized
/// to 1. Filter centers are spaced uniformly on the HTK mel scale from 0 Hz
/// to Nyquist.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Vec<f64>, // row-major n_mels x n_bins
    n_mels: usize,
    n_bins: usize,
    sample_rate: u32,
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10.0_f64.powf(mel / 2595.0) - 1.0)
}

impl MelFilterbank {
    pub fn new(n_mels: usize, window: usize, sample_rate: u32) -> Self {
        let n_bins = window / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let mel_max = hz_to_mel(nyquist);
        // n_mels + 2 edge points on the mel scale
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz: Vec<f64> = (0..n_bins)
            .map(|k| k as f64 * sample_rate as f64 / window as f64)
            .collect();
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, center, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = bin_hz[k];
                if f > lo && f < center {
                    *w = (f - lo) / (center - lo);
                } else if f >= center && f < hi {
                    *w = (hi - f) / (hi - center);
                }
            }
            // peak-normalize; every row must keep at least one positive entry
            let peak = row.iter().copied().fold(0.0_f64, f64::max);
            assert!(peak > 0.0, "mel row {m} has no coverage");
            row.iter_mut().for_each(|w| *w /= peak);
        }
        MelFilterbank { weights, n_mels, n_bins, sample_rate }
    }

    /// The filterbank for the project configuration (80 mels, window 1024,
    /// 22050 Hz), built once.
    pub fn shared() -> &'static MelFilterbank {
        static BANK: OnceLock<MelFilterbank> = OnceLock::new();
        BANK.get_or_init(|| MelFilterbank::new(N_MELS, STFT_WINDOW, SAMPLE_RATE))
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// `out[m] = sum_k weights[m][k] * mag[k]`.
    pub fn project(&self, mag: &[f64], out: &mut [f64]) {
        assert_eq!(mag.len(), self.n_bins);
        assert_eq!(out.len(), self.n_mels);
        for (m, o) in out.iter_mut().enumerate() {
            let row = self.row(m);
            let mut acc = 0.0;
            for (&w, &x) in row.iter().zip(mag) {
                acc += w * x;
            }
            *o = acc;
        }
    }
}
