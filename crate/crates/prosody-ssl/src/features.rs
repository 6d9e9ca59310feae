//! Conversions between signal-domain mel spectrograms and model tensors.
//!
//! Models consume log-mel through a fixed affine map `(v + 5) / 3` and the
//! decoder predicts in the same units; synthesis inverts it. The map is a
//! global constant (identical for every utterance), so no per-utterance
//! statistics leak into the representation.

use crate::grad::{Real, Tensor};
use crate::signal::{MelSpectrogram, MEL_HOP, N_MELS, STFT_WINDOW};

pub const MEL_NORM_OFFSET: f64 = 5.0;
pub const MEL_NORM_SCALE: f64 = 3.0;

pub fn norm_mel(v: f64) -> f64 {
    (v + MEL_NORM_OFFSET) / MEL_NORM_SCALE
}

pub fn denorm_mel(u: f64) -> f64 {
    u * MEL_NORM_SCALE - MEL_NORM_OFFSET
}

/// `[B, T, 80]` tensor from a raw f32 batch (as produced by the corpus
/// batchers), normalized.
pub fn batch_to_tensor<T: Real>(data: &[f32], batch: usize, crop: usize) -> Tensor<T> {
    assert_eq!(data.len(), batch * crop * N_MELS);
    let v: Vec<T> = data.iter().map(|&x| T::of_f64(norm_mel(x as f64))).collect();
    Tensor::from_vec(&[batch, crop, N_MELS], v).unwrap()
}

/// `[1, T, 80]` tensor from one mel spectrogram, normalized.
pub fn mel_to_tensor<T: Real>(mel: &MelSpectrogram) -> Tensor<T> {
    let v: Vec<T> = mel.data().iter().map(|&x| T::of_f64(norm_mel(x))).collect();
    Tensor::from_vec(&[1, mel.n_frames(), N_MELS], v).unwrap()
}

/// Mel spectrogram from a `[1, T, 80]` or `[T, 80]` model output tensor,
/// denormalized back to log-mel units.
pub fn tensor_to_mel<T: Real>(t: &Tensor<T>) -> MelSpectrogram {
    let shape = t.shape();
    let n_mels = *shape.last().unwrap();
    assert_eq!(n_mels, N_MELS, "expected {N_MELS} mel bins, got {n_mels}");
    let frames: Vec<f64> = t.data().iter().map(|&v| denorm_mel(v.into_f64())).collect();
    MelSpectrogram::from_frames(frames, N_MELS, MEL_HOP, STFT_WINDOW)
}
