//! Deterministic audio signal processing: framing, STFT, mel projection,
//! mel inversion, F0/RMS measurement, and the two prosody transforms.
//!
//! Everything here is a pure function of its inputs (no hidden randomness),
//! computed in f64.

mod augment;
mod griffin;
mod melbank;
mod pitch;
mod wav;

pub use augment::{
    resample_by_ratio, tau_to_gain_db, tau_to_semitones, transform_pitch, transform_volume,
    transform_volume_counted,
};
pub use griffin::griffin_lim;
pub use melbank::MelFilterbank;
pub use pitch::{estimate_f0, frame_rms, F0Track};
pub use wav::{read_wav, write_wav};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Project-wide sample rate in Hz.
pub const SAMPLE_RATE: u32 = 22050;
/// STFT window length in samples.
pub const STFT_WINDOW: usize = 1024;
/// Mel-spectrogram hop in samples (a 5.8 ms hop rounded to a power of two).
pub const MEL_HOP: usize = 128;
/// Number of mel bins.
pub const N_MELS: usize = 80;
/// Linear-magnitude floor applied before the log.
pub const MEL_FLOOR: f64 = 1e-5;
/// Frame/hop used by the F0 and RMS measurement tools.
pub const MEASURE_FRAME: usize = 1024;
pub const MEASURE_HOP: usize = 256;

/// Time-domain audio. Samples are dimensionless amplitudes, nominally in
/// [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Root mean square of the whole signal.
    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let e: f64 = self.samples.iter().map(|s| s * s).sum();
        (e / self.samples.len() as f64).sqrt()
    }
}

/// T x 80 matrix of log-mel magnitudes, row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    frames: Vec<f64>, // row-major T x n_mels
    n_mels: usize,
    pub hop_samples: usize,
    pub window_samples: usize,
}

impl MelSpectrogram {
    pub fn from_frames(
        frames: Vec<f64>,
        n_mels: usize,
        hop_samples: usize,
        window_samples: usize,
    ) -> Self {
        assert_eq!(frames.len() % n_mels, 0);
        MelSpectrogram { frames, n_mels, hop_samples, window_samples }
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len() / self.n_mels
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn data(&self) -> &[f64] {
        &self.frames
    }

    /// Rows `[from, to)`.
    pub fn crop(&self, from: usize, to: usize) -> MelSpectrogram {
        assert!(from <= to && to <= self.n_frames());
        MelSpectrogram {
            frames: self.frames[from * self.n_mels..to * self.n_mels].to_vec(),
            n_mels: self.n_mels,
            hop_samples: self.hop_samples,
            window_samples: self.window_samples,
        }
    }

    /// Concatenate along time; mel configuration must match.
    pub fn concat(&self, other: &MelSpectrogram) -> MelSpectrogram {
        assert_eq!(self.n_mels, other.n_mels);
        let mut frames = self.frames.clone();
        frames.extend_from_slice(&other.frames);
        MelSpectrogram {
            frames,
            n_mels: self.n_mels,
            hop_samples: self.hop_samples,
            window_samples: self.window_samples,
        }
    }
}

/// Complex spectrogram, T rows of `window/2 + 1` bins.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub bins: Vec<Complex<f64>>, // row-major T x n_bins
    pub n_bins: usize,
    pub window: usize,
    pub hop: usize,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.bins.len() / self.n_bins
    }

    pub fn frame(&self, t: usize) -> &[Complex<f64>] {
        &self.bins[t * self.n_bins..(t + 1) * self.n_bins]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.norm()).collect()
    }
}

/// Periodic Hann window of length `n`.
pub(crate) fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Short-time Fourier transform. Frames start at 0, hop, 2*hop, ... with no
/// center padding; an incomplete tail frame is dropped, so
/// `T = 1 + floor((len - window) / hop)`.
pub fn stft(w: &Waveform, window: usize, hop: usize) -> Result<Spectrogram> {
    if w.samples.len() < window {
        return Err(Error::InputTooShort { got: w.samples.len(), need: window });
    }
    let n_frames = 1 + (w.samples.len() - window) / hop;
    let n_bins = window / 2 + 1;
    let win = hann_window(window);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(window);
    let mut bins = vec![Complex::new(0.0, 0.0); n_frames * n_bins];
    let mut buf = vec![Complex::new(0.0, 0.0); window];
    for f in 0..n_frames {
        let start = f * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(w.samples[start + i] * win[i], 0.0);
        }
        fft.process(&mut buf);
        bins[f * n_bins..(f + 1) * n_bins].copy_from_slice(&buf[..n_bins]);
    }
    Ok(Spectrogram { bins, n_bins, window, hop })
}

/// Inverse STFT by weighted overlap-add with window-square normalization.
/// The one-sided spectrum is expanded to a full conjugate-symmetric frame
/// before the inverse FFT.
pub fn istft(spec: &Spectrogram, out_len: usize) -> Vec<f64> {
    let window = spec.window;
    let hop = spec.hop;
    let n_bins = spec.n_bins;
    let win = hann_window(window);
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(window);
    let total = (spec.n_frames().saturating_sub(1)) * hop + window;
    let mut acc = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut buf = vec![Complex::new(0.0, 0.0); window];
    for f in 0..spec.n_frames() {
        let row = spec.frame(f);
        buf[..n_bins].copy_from_slice(row);
        for k in n_bins..window {
            buf[k] = row[window - k].conj();
        }
        ifft.process(&mut buf);
        let start = f * hop;
        for i in 0..window {
            // rustfft's inverse is unnormalized; divide by window length
            let s = buf[i].re / window as f64;
            acc[start + i] += s * win[i];
            norm[start + i] += win[i] * win[i];
        }
    }
    let mut out = vec![0.0; out_len];
    for i in 0..out_len.min(total) {
        if norm[i] > 1e-9 {
            out[i] = acc[i] / norm[i];
        }
    }
    out
}

/// 80-bin log-mel spectrogram with the project STFT configuration
/// (window 1024, hop 128) and natural-log compression floored at 1e-5.
pub fn mel_spectrogram(w: &Waveform) -> Result<MelSpectrogram> {
    mel_spectrogram_with(w, MelFilterbank::shared())
}

pub fn mel_spectrogram_with(w: &Waveform, bank: &MelFilterbank) -> Result<MelSpectrogram> {
    let spec = stft(w, STFT_WINDOW, MEL_HOP)?;
    let t = spec.n_frames();
    let mags = spec.magnitudes();
    let mut frames = vec![0.0; t * N_MELS];
    for f in 0..t {
        let mag = &mags[f * spec.n_bins..(f + 1) * spec.n_bins];
        let row = &mut frames[f * N_MELS..(f + 1) * N_MELS];
        bank.project(mag, row);
        for v in row.iter_mut() {
            *v = v.max(MEL_FLOOR).ln();
        }
    }
    Ok(MelSpectrogram::from_frames(frames, N_MELS, MEL_HOP, STFT_WINDOW))
}
