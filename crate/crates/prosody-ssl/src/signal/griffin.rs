//! Griffin-Lim mel inversion: mel -> linear magnitude by a clipped
//! pseudo-inverse of the filterbank, then iterative phase retrieval.

use rustfft::num_complex::Complex;

use super::{istft, stft, MelFilterbank, MelSpectrogram, Spectrogram, Waveform, MEL_FLOOR};
use crate::error::Result;

/// Invert a log-mel spectrogram to a waveform. The linear spectrogram is
/// recovered per frame as `clip(pinv(M) * exp(mel), 0)` with
/// `pinv(M) = M^T (M M^T + lambda I)^-1`, then Griffin-Lim iterates
/// magnitude-consistent phase starting from zero phase (deterministic).
pub fn griffin_lim(mel: &MelSpectrogram, iters: usize) -> Result<Waveform> {
    griffin_lim_with(mel, iters, MelFilterbank::shared())
}

pub fn griffin_lim_with(
    mel: &MelSpectrogram,
    iters: usize,
    bank: &MelFilterbank,
) -> Result<Waveform> {
    assert!(iters >= 1, "griffin_lim: iters must be >= 1");
    assert_eq!(mel.n_mels(), bank.n_mels(), "griffin_lim: mel/bank mismatch");
    let t = mel.n_frames();
    let n_bins = bank.n_bins();
    let window = mel.window_samples;
    let hop = mel.hop_samples;

    let pinv = pseudo_inverse(bank);
    // target magnitudes, clipped at zero
    let mut target = vec![0.0; t * n_bins];
    let mut melrow = vec![0.0; mel.n_mels()];
    for f in 0..t {
        for (dst, &v) in melrow.iter_mut().zip(mel.frame(f)) {
            // undo the log; entries at the floor decode to (near) zero energy
            *dst = v.exp();
            if *dst <= MEL_FLOOR * 1.0000001 {
                *dst = 0.0;
            }
        }
        let out = &mut target[f * n_bins..(f + 1) * n_bins];
        for (k, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (m, &mv) in melrow.iter().enumerate() {
                acc += pinv[k * bank.n_mels() + m] * mv;
            }
            *o = acc.max(0.0);
        }
    }

    let out_len = (t.saturating_sub(1)) * hop + window;
    // zero initial phase
    let mut spec = Spectrogram {
        bins: target.iter().map(|&m| Complex::new(m, 0.0)).collect(),
        n_bins,
        window,
        hop,
    };
    let mut wave = istft(&spec, out_len);
    for _ in 1..iters {
        let re = stft(&Waveform::new(wave.clone(), super::SAMPLE_RATE), window, hop)?;
        let frames = re.n_frames().min(t);
        for f in 0..frames {
            let row = re.frame(f);
            let dst = &mut spec.bins[f * n_bins..(f + 1) * n_bins];
            for k in 0..n_bins {
                let m = row[k].norm();
                let phase = if m > 1e-12 { row[k] / m } else { Complex::new(1.0, 0.0) };
                dst[k] = phase * target[f * n_bins + k];
            }
        }
        wave = istft(&spec, out_len);
    }
    Ok(Waveform::new(wave, super::SAMPLE_RATE))
}

/// `pinv = M^T (M M^T + lambda I)^-1`, returned as n_bins x n_mels
/// row-major. The 80x80 system is solved by Gaussian elimination with
/// partial pivoting.
fn pseudo_inverse(bank: &MelFilterbank) -> Vec<f64> {
    let nm = bank.n_mels();
    let nb = bank.n_bins();
    let lambda = 1e-8;
    // A = M M^T + lambda I
    let mut a = vec![0.0; nm * nm];
    for i in 0..nm {
        for j in i..nm {
            let mut acc = 0.0;
            for (x, y) in bank.row(i).iter().zip(bank.row(j)) {
                acc += x * y;
            }
            a[i * nm + j] = acc;
            a[j * nm + i] = acc;
        }
        a[i * nm + i] += lambda;
    }
    let inv = invert(&mut a, nm);
    // pinv[k][m] = sum_j M[j][k] * inv[j][m]
    let mut pinv = vec![0.0; nb * nm];
    for j in 0..nm {
        let row = bank.row(j);
        for k in 0..nb {
            let w = row[k];
            if w == 0.0 {
                continue;
            }
            for m in 0..nm {
                pinv[k * nm + m] += w * inv[j * nm + m];
            }
        }
    }
    pinv
}

fn invert(a: &mut [f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        // partial pivot
        let mut piv = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
                inv.swap(col * n + k, piv * n + k);
            }
        }
        let d = a[col * n + col];
        assert!(d.abs() > 1e-14, "filterbank normal matrix is singular");
        for k in 0..n {
            a[col * n + k] /= d;
            inv[col * n + k] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f == 0.0 {
                continue;
            }
            for k in 0..n {
                a[r * n + k] -= f * a[col * n + k];
                inv[r * n + k] -= f * inv[col * n + k];
            }
        }
    }
    inv
}
