//! Fundamental-frequency and frame-energy measurement.

use super::{Waveform, MEASURE_FRAME, MEASURE_HOP};

/// Search band for voiced F0, in Hz.
pub const F0_MIN_HZ: f64 = 50.0;
pub const F0_MAX_HZ: f64 = 600.0;
/// A frame is voiced when its peak normalized autocorrelation exceeds this.
pub const VOICING_THRESHOLD: f64 = 0.3;

/// Per-frame fundamental frequency track. `hz = 0` marks unvoiced frames;
/// `confidence` is the peak normalized autocorrelation in [0, 1].
#[derive(Debug, Clone, Default)]
pub struct F0Track {
    pub hz: Vec<f64>,
    pub confidence: Vec<f64>,
}

impl F0Track {
    pub fn len(&self) -> usize {
        self.hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hz.is_empty()
    }

    pub fn voiced_hz(&self) -> impl Iterator<Item = f64> + '_ {
        self.hz.iter().copied().filter(|&f| f > 0.0)
    }

    /// Median over voiced frames, or None when everything is unvoiced.
    pub fn voiced_median(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.voiced_hz().collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Some(v[v.len() / 2])
    }

    /// Mean over voiced frames.
    pub fn voiced_mean(&self) -> Option<f64> {
        let v: Vec<f64> = self.voiced_hz().collect();
        if v.is_empty() {
            return None;
        }
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Frame-wise F0 by normalized autocorrelation (frame 1024, hop 256).
/// Searches lags in the [50, 600] Hz band, picks the shortest strong peak to
/// avoid octave-down errors, and refines it by parabolic interpolation.
pub fn estimate_f0(w: &Waveform) -> F0Track {
    let n = MEASURE_FRAME;
    if w.samples.len() < n {
        return F0Track::default();
    }
    let sr = w.sample_rate as f64;
    let lag_min = (sr / F0_MAX_HZ).floor().max(2.0) as usize;
    let lag_max = ((sr / F0_MIN_HZ).ceil() as usize).min(n - 2);
    let n_frames = 1 + (w.samples.len() - n) / MEASURE_HOP;
    let mut hz = vec![0.0; n_frames];
    let mut confidence = vec![0.0; n_frames];

    let mut frame = vec![0.0; n];
    let mut corr = vec![0.0; lag_max + 2];
    for fi in 0..n_frames {
        let start = fi * MEASURE_HOP;
        frame.copy_from_slice(&w.samples[start..start + n]);
        let mean = frame.iter().sum::<f64>() / n as f64;
        frame.iter_mut().for_each(|s| *s -= mean);

        // cumulative energies for per-lag normalization
        let sq: Vec<f64> = frame.iter().map(|s| s * s).collect();
        let mut prefix = vec![0.0; n + 1];
        for i in 0..n {
            prefix[i + 1] = prefix[i] + sq[i];
        }
        let total = prefix[n];
        if total < 1e-12 {
            continue; // silence
        }

        for lag in lag_min..=lag_max.min(n - 1) {
            let m = n - lag;
            let mut acc = 0.0;
            for i in 0..m {
                acc += frame[i] * frame[i + lag];
            }
            let e1 = prefix[m];
            let e2 = total - prefix[lag];
            corr[lag] = if e1 > 0.0 && e2 > 0.0 { acc / (e1 * e2).sqrt() } else { 0.0 };
        }

        let peak = best_lag(&corr, lag_min, lag_max.min(n - 1));
        let Some((lag, r)) = peak else { continue };
        confidence[fi] = r.clamp(0.0, 1.0);
        if r > VOICING_THRESHOLD {
            let refined = parabolic_refine(&corr, lag, lag_min, lag_max.min(n - 1));
            let f = sr / refined;
            hz[fi] = f.clamp(F0_MIN_HZ, F0_MAX_HZ);
        }
    }
    F0Track { hz, confidence }
}

/// Among local maxima of the normalized autocorrelation, prefer the shortest
/// lag whose value is within 10% of the global maximum — multiples of the
/// true period correlate equally well, so the global argmax alone is prone
/// to octave-down errors.
fn best_lag(corr: &[f64], lag_min: usize, lag_max: usize) -> Option<(usize, f64)> {
    let mut global = 0.0_f64;
    for lag in lag_min..=lag_max {
        if corr[lag] > global {
            global = corr[lag];
        }
    }
    if global <= 0.0 {
        return None;
    }
    let floor = 0.9 * global;
    for lag in lag_min..=lag_max {
        let v = corr[lag];
        let left = if lag > lag_min { corr[lag - 1] } else { f64::NEG_INFINITY };
        let right = if lag < lag_max { corr[lag + 1] } else { f64::NEG_INFINITY };
        if v >= floor && v >= left && v >= right {
            return Some((lag, v));
        }
    }
    // fall back to the global argmax
    (lag_min..=lag_max)
        .max_by(|&a, &b| corr[a].partial_cmp(&corr[b]).unwrap())
        .map(|lag| (lag, corr[lag]))
}

fn parabolic_refine(corr: &[f64], lag: usize, lag_min: usize, lag_max: usize) -> f64 {
    if lag <= lag_min || lag >= lag_max {
        return lag as f64;
    }
    let (a, b, c) = (corr[lag - 1], corr[lag], corr[lag + 1]);
    let denom = a - 2.0 * b + c;
    if denom.abs() < 1e-12 {
        return lag as f64;
    }
    let delta = 0.5 * (a - c) / denom;
    lag as f64 + delta.clamp(-0.5, 0.5)
}

/// Root-mean-square per frame (frame 1024, hop 256, tail dropped).
pub fn frame_rms(w: &Waveform) -> Vec<f64> {
    let n = MEASURE_FRAME;
    if w.samples.len() < n {
        return Vec::new();
    }
    let n_frames = 1 + (w.samples.len() - n) / MEASURE_HOP;
    (0..n_frames)
        .map(|fi| {
            let start = fi * MEASURE_HOP;
            let e: f64 = w.samples[start..start + n].iter().map(|s| s * s).sum();
            (e / n as f64).sqrt()
        })
        .collect()
}
