//! Augmentation pairs and seeded batch iterators for training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Manifest, ManifestEntry};
use crate::error::Result;
use crate::signal::{
    mel_spectrogram, read_wav, transform_pitch, transform_volume, MelSpectrogram, Waveform,
    N_MELS,
};

/// A training pair: the original mel-spectrogram plus the mel of a transform
/// of exactly one prosody (the other label stays at the identity 0.5).
#[derive(Debug, Clone)]
pub struct ProsodyPair {
    pub mel_i: MelSpectrogram,
    pub mel_j: MelSpectrogram,
    pub tau_p: f64,
    pub tau_v: f64,
}

/// Draw a prosody type uniformly, an intensity `tau ~ U[0.05, 0.95]`, apply
/// the transform to the waveform, and label the untouched prosody with 0.5.
pub fn make_prosody_pair(w: &Waveform, rng: &mut ChaCha8Rng) -> Result<ProsodyPair> {
    let pitch = rng.random_bool(0.5);
    let tau: f64 = rng.random_range(0.05..0.95);
    let aug = if pitch { transform_pitch(w, tau)? } else { transform_volume(w, tau)? };
    let mel_i = mel_spectrogram(w)?;
    let mel_j = mel_spectrogram(&aug)?;
    Ok(ProsodyPair {
        mel_i,
        mel_j,
        tau_p: if pitch { tau } else { 0.5 },
        tau_v: if pitch { 0.5 } else { tau },
    })
}

/// An utterance with its waveform and mel cached in memory.
#[derive(Debug, Clone)]
pub struct LoadedUtterance {
    pub entry: ManifestEntry,
    pub waveform: Waveform,
    pub mel: MelSpectrogram,
}

/// Whole corpus resident in memory for training and evaluation.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub utterances: Vec<LoadedUtterance>,
}

impl LoadedCorpus {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let utterances: Vec<Result<LoadedUtterance>> = manifest
            .entries
            .par_iter()
            .map(|entry| {
                let waveform = read_wav(&entry.path)?;
                let mel = mel_spectrogram(&waveform)?;
                Ok(LoadedUtterance { entry: entry.clone(), waveform, mel })
            })
            .collect();
        Ok(LoadedCorpus { utterances: utterances.into_iter().collect::<Result<_>>()? })
    }

    pub fn indices_of_split(&self, split: super::Split) -> Vec<usize> {
        self.utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.entry.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn indices_of_speaker(&self, speaker: &str) -> Vec<usize> {
        self.utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.entry.speaker == speaker)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Crop (or edge-pad) `mel` to exactly `crop` frames starting at `start`,
/// writing f32 into `out`. Returns true when padding was needed.
fn crop_into(mel: &MelSpectrogram, start: usize, crop: usize, out: &mut [f32]) -> bool {
    let t = mel.n_frames();
    let mut padded = false;
    for k in 0..crop {
        // repeat the last frame past the end
        let src = if start + k < t {
            start + k
        } else {
            padded = true;
            t - 1
        };
        let frame = mel.frame(src);
        for (o, &v) in out[k * N_MELS..(k + 1) * N_MELS].iter_mut().zip(frame) {
            *o = v as f32;
        }
    }
    padded
}

/// A batch of mel crops, `[batch, crop, 80]` row-major f32.
#[derive(Debug, Clone)]
pub struct MelBatch {
    pub data: Vec<f32>,
    pub batch: usize,
    pub crop: usize,
    pub item_indices: Vec<usize>,
    pub any_padded: bool,
}

/// Seeded sampler of random mel crops, with replacement.
pub struct MelBatcher<'c> {
    corpus: &'c LoadedCorpus,
    pool: Vec<usize>,
    batch_size: usize,
    crop: usize,
    rng: ChaCha8Rng,
}

impl<'c> MelBatcher<'c> {
    pub fn new(
        corpus: &'c LoadedCorpus,
        pool: Vec<usize>,
        batch_size: usize,
        crop: usize,
        seed: u64,
    ) -> Self {
        assert!(!pool.is_empty(), "empty utterance pool");
        MelBatcher { corpus, pool, batch_size, crop, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn next_batch(&mut self) -> MelBatch {
        let mut data = vec![0.0f32; self.batch_size * self.crop * N_MELS];
        let mut item_indices = Vec::with_capacity(self.batch_size);
        let mut any_padded = false;
        for b in 0..self.batch_size {
            let idx = self.pool[self.rng.random_range(0..self.pool.len())];
            let mel = &self.corpus.utterances[idx].mel;
            let t = mel.n_frames();
            let start = if t > self.crop { self.rng.random_range(0..=t - self.crop) } else { 0 };
            let out = &mut data[b * self.crop * N_MELS..(b + 1) * self.crop * N_MELS];
            any_padded |= crop_into(mel, start, self.crop, out);
            item_indices.push(idx);
        }
        MelBatch { data, batch: self.batch_size, crop: self.crop, item_indices, any_padded }
    }
}

/// A batch of augmentation pairs. `mel_i`/`mel_j` are `[batch, crop, 80]`
/// f32; both members of a pair share the same crop window.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub mel_i: Vec<f32>,
    pub mel_j: Vec<f32>,
    pub tau_p: Vec<f64>,
    pub tau_v: Vec<f64>,
    pub batch: usize,
    pub crop: usize,
}

/// Seeded sampler of augmentation pairs. Draws are made sequentially from
/// one stream; the transform work runs in parallel per item.
pub struct PairBatcher<'c> {
    corpus: &'c LoadedCorpus,
    pool: Vec<usize>,
    batch_size: usize,
    crop: usize,
    rng: ChaCha8Rng,
}

impl<'c> PairBatcher<'c> {
    pub fn new(
        corpus: &'c LoadedCorpus,
        pool: Vec<usize>,
        batch_size: usize,
        crop: usize,
        seed: u64,
    ) -> Self {
        assert!(!pool.is_empty(), "empty utterance pool");
        PairBatcher { corpus, pool, batch_size, crop, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn next_batch(&mut self) -> Result<PairBatch> {
        struct Draw {
            utt: usize,
            pitch: bool,
            tau: f64,
            start: usize,
        }
        let draws: Vec<Draw> = (0..self.batch_size)
            .map(|_| {
                let utt = self.pool[self.rng.random_range(0..self.pool.len())];
                let pitch = self.rng.random_bool(0.5);
                let tau = self.rng.random_range(0.05..0.95);
                let t = self.corpus.utterances[utt].mel.n_frames();
                let start =
                    if t > self.crop { self.rng.random_range(0..=t - self.crop) } else { 0 };
                Draw { utt, pitch, tau, start }
            })
            .collect();

        let frame = self.crop * N_MELS;
        let mut mel_i = vec![0.0f32; self.batch_size * frame];
        let mut mel_j = vec![0.0f32; self.batch_size * frame];
        let results: Vec<Result<()>> = draws
            .par_iter()
            .zip(mel_i.par_chunks_mut(frame).zip(mel_j.par_chunks_mut(frame)))
            .map(|(d, (out_i, out_j))| {
                let u = &self.corpus.utterances[d.utt];
                let aug = if d.pitch {
                    transform_pitch(&u.waveform, d.tau)?
                } else {
                    transform_volume(&u.waveform, d.tau)?
                };
                let mel_aug = mel_spectrogram(&aug)?;
                crop_into(&u.mel, d.start, self.crop, out_i);
                crop_into(&mel_aug, d.start, self.crop, out_j);
                Ok(())
            })
            .collect();
        results.into_iter().collect::<Result<Vec<_>>>()?;

        Ok(PairBatch {
            mel_i,
            mel_j,
            tau_p: draws.iter().map(|d| if d.pitch { d.tau } else { 0.5 }).collect(),
            tau_v: draws.iter().map(|d| if d.pitch { 0.5 } else { d.tau }).collect(),
            batch: self.batch_size,
            crop: self.crop,
        })
    }
}
