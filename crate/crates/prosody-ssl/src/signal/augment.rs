//! The two prosody augmentation transforms and their supporting machinery
//! (phase-vocoder time stretch, windowed-sinc resampling).
//!
//! The intensity parameter `tau` in (0, 1) maps symmetrically around the
//! identity at 0.5: semitone shift `s = 4*(2*tau - 1)` for pitch and gain
//! `g = 12*(2*tau - 1)` dB for volume.

use rustfft::num_complex::Complex;

use super::{stft, Spectrogram, Waveform};
use crate::error::{Error, Result};

const PV_WINDOW: usize = 1024;
const PV_HOP: usize = 256;
/// Half-width of the sinc interpolation kernel, in input samples.
const SINC_TAPS: usize = 32;

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) || !tau.is_finite() {
        return Err(Error::InvalidIntensity(tau));
    }
    Ok(())
}

/// Semitone shift encoded by `tau`.
pub fn tau_to_semitones(tau: f64) -> f64 {
    4.0 * (2.0 * tau - 1.0)
}

/// Gain in dB encoded by `tau`.
pub fn tau_to_gain_db(tau: f64) -> f64 {
    12.0 * (2.0 * tau - 1.0)
}

/// Scale amplitude by `10^(g/20)` with `g = 12*(2*tau - 1)` dB, hard-clipping
/// at +-1. Returns the output and the number of clipped samples.
pub fn transform_volume_counted(w: &Waveform, tau: f64) -> Result<(Waveform, usize)> {
    check_tau(tau)?;
    let gain = 10.0_f64.powf(tau_to_gain_db(tau) / 20.0);
    let mut clipped = 0usize;
    let samples = w
        .samples
        .iter()
        .map(|&s| {
            let v = s * gain;
            if v > 1.0 {
                clipped += 1;
                1.0
            } else if v < -1.0 {
                clipped += 1;
                -1.0
            } else {
                v
            }
        })
        .collect();
    Ok((Waveform::new(samples, w.sample_rate), clipped))
}

pub fn transform_volume(w: &Waveform, tau: f64) -> Result<Waveform> {
    transform_volume_counted(w, tau).map(|(w, _)| w)
}

/// Shift the fundamental frequency by `2^(s/12)` with `s = 4*(2*tau - 1)`
/// semitones, preserving duration: phase-vocoder time stretch by the pitch
/// ratio followed by resampling with the exact inverse factor, then
/// trimmed/zero-padded to the input length. `tau = 0.5` returns the input
/// unchanged, bit for bit.
pub fn transform_pitch(w: &Waveform, tau: f64) -> Result<Waveform> {
    check_tau(tau)?;
    let semitones = tau_to_semitones(tau);
    if semitones == 0.0 {
        return Ok(w.clone());
    }
    let ratio = 2.0_f64.powf(semitones / 12.0);
    let stretched = time_stretch(&w.samples, w.sample_rate, ratio)?;
    let mut shifted = resample_by_ratio(&stretched, ratio);
    match shifted.len().cmp(&w.samples.len()) {
        std::cmp::Ordering::Greater => shifted.truncate(w.samples.len()),
        std::cmp::Ordering::Less => shifted.resize(w.samples.len(), 0.0),
        std::cmp::Ordering::Equal => {}
    }
    Ok(Waveform::new(shifted, w.sample_rate))
}

/// Phase-vocoder time stretch: output duration is `stretch` times the input
/// duration, frequencies unchanged. Steps through the analysis frames at a
/// fractional rate, interpolating magnitudes and accumulating phase from the
/// per-bin instantaneous frequency.
fn time_stretch(samples: &[f64], sample_rate: u32, stretch: f64) -> Result<Vec<f64>> {
    assert!(stretch > 0.0);
    if samples.len() < PV_WINDOW + PV_HOP {
        return Err(Error::InputTooShort { got: samples.len(), need: PV_WINDOW + PV_HOP });
    }
    // pad the tail so the last samples are covered by analysis frames
    let mut padded = samples.to_vec();
    padded.resize(samples.len() + PV_WINDOW, 0.0);
    let spec = stft(&Waveform::new(padded, sample_rate), PV_WINDOW, PV_HOP)?;
    let n_frames = spec.n_frames();
    let n_bins = spec.n_bins;

    let out_frames = ((n_frames - 2) as f64 * stretch).floor() as usize + 1;
    let mut out_bins = vec![Complex::new(0.0, 0.0); out_frames * n_bins];

    let omega: Vec<f64> = (0..n_bins)
        .map(|k| 2.0 * std::f64::consts::PI * k as f64 / PV_WINDOW as f64 * PV_HOP as f64)
        .collect();
    let mut phase: Vec<f64> = spec.frame(0).iter().map(|c| c.arg()).collect();

    for j in 0..out_frames {
        let pos = j as f64 / stretch;
        let i = (pos.floor() as usize).min(n_frames - 2);
        let frac = pos - i as f64;
        let cur = spec.frame(i);
        let next = spec.frame(i + 1);
        let row = &mut out_bins[j * n_bins..(j + 1) * n_bins];
        for k in 0..n_bins {
            let mag = (1.0 - frac) * cur[k].norm() + frac * next[k].norm();
            row[k] = Complex::from_polar(mag, phase[k]);
        }
        // advance the synthesis phase by the instantaneous frequency
        // measured between analysis frames i and i+1
        for k in 0..n_bins {
            let dphi = next[k].arg() - cur[k].arg() - omega[k];
            let wrapped = dphi - 2.0 * std::f64::consts::PI * (dphi / (2.0 * std::f64::consts::PI)).round();
            phase[k] += omega[k] + wrapped;
        }
    }

    let stretched = Spectrogram { bins: out_bins, n_bins, window: PV_WINDOW, hop: PV_HOP };
    let target_len = (samples.len() as f64 * stretch).round() as usize;
    Ok(super::istft(&stretched, target_len))
}

/// Windowed-sinc resampler: `out[n] = x(n * ratio)`, so all frequencies are
/// multiplied by `ratio`. Output length is `ceil(len / ratio)`. For
/// downsampling in time (ratio > 1) the kernel cutoff is lowered to
/// anti-alias.
pub fn resample_by_ratio(x: &[f64], ratio: f64) -> Vec<f64> {
    assert!(ratio > 0.0);
    let out_len = (x.len() as f64 / ratio).ceil() as usize;
    let cutoff = (1.0 / ratio).min(1.0) * 0.97;
    let taps = SINC_TAPS as isize;
    let mut out = vec![0.0; out_len];
    for (n, o) in out.iter_mut().enumerate() {
        let pos = n as f64 * ratio;
        let center = pos.floor() as isize;
        let mut acc = 0.0;
        let mut ksum = 0.0;
        for j in (center - taps + 1)..=(center + taps) {
            let u = pos - j as f64;
            let k = windowed_sinc(u, cutoff, taps as f64);
            ksum += k;
            if j >= 0 && (j as usize) < x.len() {
                acc += x[j as usize] * k;
            }
        }
        if ksum.abs() > 1e-12 {
            *o = acc / ksum;
        }
    }
    out
}

fn windowed_sinc(u: f64, cutoff: f64, taps: f64) -> f64 {
    if u.abs() >= taps {
        return 0.0;
    }
    let sinc = if u == 0.0 {
        1.0
    } else {
        let z = std::f64::consts::PI * u * cutoff;
        z.sin() / z
    };
    // Hann window over [-taps, taps]
    let w = 0.5 + 0.5 * (std::f64::consts::PI * u / taps).cos();
    cutoff * sinc * w
}

/// Resample a waveform to a target rate (used for WAV ingestion).
pub fn resample_to_rate(w: &Waveform, dst_rate: u32) -> Waveform {
    if w.sample_rate == dst_rate {
        return w.clone();
    }
    let ratio = w.sample_rate as f64 / dst_rate as f64;
    Waveform::new(resample_by_ratio(&w.samples, ratio), dst_rate)
}
