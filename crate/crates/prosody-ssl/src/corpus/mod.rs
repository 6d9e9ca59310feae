//! Synthetic multi-speaker corpus with exact prosody ground truth, plus
//! ingestion of real WAV directories.
//!
//! Synthetic utterances are harmonic-source renderings of token sequences:
//! each token selects a formant-emphasis pattern, each speaker contributes a
//! base pitch, pitch spread, gain, and formant placement. Pitch and energy
//! ground truths are therefore known exactly at generation time.

mod batch;

pub use batch::{
    make_prosody_pair, LoadedCorpus, LoadedUtterance, MelBatch, MelBatcher, PairBatch,
    PairBatcher, ProsodyPair,
};

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{estimate_f0, frame_rms, read_wav, write_wav, Waveform, SAMPLE_RATE};

/// Token vocabulary size.
pub const VOCAB_SIZE: u16 = 16;
/// Samples per content token (just under 0.25 s at 22050 Hz).
pub const TOKEN_SAMPLES: usize = 5512;
/// Crossfade between adjacent token segments (10 ms).
pub const FADE_SAMPLES: usize = 220;
/// RMS of a 0 dB speaker.
const REF_RMS: f64 = 0.08;
/// Speakers with base F0 below this are the low-pitch group.
pub const GROUP_SPLIT_HZ: f64 = 165.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PitchGroup {
    LowPitch,
    HighPitch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Seen,
    Unseen,
}

/// Parameters of one synthetic voice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpeaker {
    pub id: String,
    /// Median pitch in Hz.
    pub base_f0: f64,
    /// Log-std of the per-utterance pitch draw.
    pub f0_spread: f64,
    /// Speaker loudness in dB relative to the reference level.
    pub base_gain_db: f64,
    pub group: PitchGroup,
    /// Three formant center frequencies in Hz.
    pub formants: [f64; 3],
}

/// One rendered utterance with its exact prosody ground truth.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub speaker_id: String,
    pub content: Vec<u16>,
    pub waveform: Waveform,
    /// Mean of the realized per-segment source F0s.
    pub f0_mean_hz: f64,
    /// RMS of the rendered waveform.
    pub rms: f64,
}

/// One manifest record (JSON-lines on disk).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub speaker: String,
    pub split: Split,
    pub f0_mean_hz: f64,
    pub rms: f64,
    pub group: PitchGroup,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut entries = Vec::new();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        Ok(Manifest { entries })
    }

    pub fn speakers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.speaker) {
                out.push(e.speaker.clone());
            }
        }
        out
    }

    pub fn split_speakers(&self, split: Split) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if e.split == split && !out.contains(&e.speaker) {
                out.push(e.speaker.clone());
            }
        }
        out
    }
}

/// Per-token synthesis parameters, fixed for the lifetime of the project so
/// the same token id means the same spectral shape for every speaker.
#[derive(Debug, Clone, Copy)]
struct TokenTimbre {
    emphasis: [f64; 3],
    formant_scale: [f64; 3],
    rolloff: f64,
}

fn token_table() -> Vec<TokenTimbre> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x746f6b_656e); // fixed table seed
    (0..VOCAB_SIZE)
        .map(|_| TokenTimbre {
            emphasis: [
                rng.random_range(0.35..1.0),
                rng.random_range(0.35..1.0),
                rng.random_range(0.35..1.0),
            ],
            formant_scale: [
                rng.random_range(0.9..1.1),
                rng.random_range(0.9..1.1),
                rng.random_range(0.9..1.1),
            ],
            rolloff: rng.random_range(0.6..0.9),
        })
        .collect()
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Render one utterance. Each token becomes a ~0.25 s harmonic segment at a
/// per-utterance F0 (log-normal around the speaker's base), shaped by the
/// token's formant emphasis, scaled to the speaker's gain, and crossfaded
/// 10 ms into its neighbor. Deterministic given (speaker, content, seed).
pub fn render_utterance(
    spk: &SyntheticSpeaker,
    content: &[u16],
    rng_seed: u64,
) -> Result<Utterance> {
    let table = token_table();
    for &tok in content {
        if tok >= VOCAB_SIZE {
            return Err(Error::UnknownToken(tok, VOCAB_SIZE));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    // one pitch/gain draw per utterance, micro-jitter per segment
    let utt_f0 = spk.base_f0 * (spk.f0_spread * standard_normal(&mut rng)).exp();
    let utt_gain_db = spk.base_gain_db + rng.random_range(-1.5..1.5);

    let n = content.len();
    let total = n * TOKEN_SAMPLES + FADE_SAMPLES;
    let mut samples = vec![0.0; total];
    let mut f0_sum = 0.0;
    for (k, &tok) in content.iter().enumerate() {
        let timbre = &table[tok as usize];
        let f0 = utt_f0 * (0.01 * standard_normal(&mut rng)).exp();
        f0_sum += f0;
        let gain_db = utt_gain_db + rng.random_range(-0.3..0.3);
        let target_rms = REF_RMS * 10.0_f64.powf(gain_db / 20.0);
        let seg_len = TOKEN_SAMPLES + FADE_SAMPLES;
        let seg = render_segment(spk, timbre, f0, target_rms, seg_len, &mut rng);
        let offset = k * TOKEN_SAMPLES;
        for (i, &s) in seg.iter().enumerate() {
            // linear crossfade over the overlap regions
            let mut v = s;
            if k > 0 && i < FADE_SAMPLES {
                v *= i as f64 / FADE_SAMPLES as f64;
            }
            if k + 1 < n && i >= TOKEN_SAMPLES {
                v *= (seg_len - i) as f64 / FADE_SAMPLES as f64;
            }
            samples[offset + i] += v;
        }
    }
    let waveform = Waveform::new(samples, SAMPLE_RATE);
    let rms = waveform.rms();
    Ok(Utterance {
        speaker_id: spk.id.clone(),
        content: content.to_vec(),
        waveform,
        f0_mean_hz: f0_sum / n as f64,
        rms,
    })
}

fn render_segment(
    spk: &SyntheticSpeaker,
    timbre: &TokenTimbre,
    f0: f64,
    target_rms: f64,
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    const MAX_HZ: f64 = 5000.0;
    const BW: f64 = 160.0;
    let n_harm = (MAX_HZ / f0).floor() as usize;
    let mut amps = Vec::with_capacity(n_harm);
    let mut phases = Vec::with_capacity(n_harm);
    for h in 1..=n_harm {
        let f = f0 * h as f64;
        let mut emphasis = 0.12; // broadband floor so every harmonic exists
        for j in 0..3 {
            let center = spk.formants[j] * timbre.formant_scale[j];
            let d = (f - center) / BW;
            emphasis += timbre.emphasis[j] * (-0.5 * d * d).exp();
        }
        amps.push(emphasis / (h as f64).powf(timbre.rolloff));
        phases.push(rng.random_range(0.0..2.0 * std::f64::consts::PI));
    }
    let mut seg = vec![0.0; len];
    let w = 2.0 * std::f64::consts::PI * f0 / SAMPLE_RATE as f64;
    for (i, s) in seg.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (h, (&a, &p)) in amps.iter().zip(&phases).enumerate() {
            acc += a * (w * (h + 1) as f64 * i as f64 + p).sin();
        }
        *s = acc;
    }
    let e: f64 = seg.iter().map(|s| s * s).sum();
    let rms = (e / len as f64).sqrt();
    if rms > 0.0 {
        let scale = target_rms / rms;
        seg.iter_mut().for_each(|s| *s *= scale);
    }
    seg
}

/// Draw `n_speakers` synthetic voices, alternating low-pitch and high-pitch
/// so the trailing unseen split stays balanced across groups.
pub fn draw_speakers(n_speakers: usize, rng: &mut ChaCha8Rng) -> Vec<SyntheticSpeaker> {
    (0..n_speakers)
        .map(|i| {
            let low = i % 2 == 0;
            let base_f0 = if low {
                rng.random_range(90.0..150.0)
            } else {
                rng.random_range(180.0..320.0)
            };
            SyntheticSpeaker {
                id: format!("spk{i:03}"),
                base_f0,
                f0_spread: rng.random_range(0.06..0.12),
                base_gain_db: rng.random_range(-12.0..0.0),
                group: if low { PitchGroup::LowPitch } else { PitchGroup::HighPitch },
                formants: [
                    rng.random_range(350.0..800.0),
                    rng.random_range(1000.0..2200.0),
                    rng.random_range(2400.0..3200.0),
                ],
            }
        })
        .collect()
}

/// Number of trailing speakers marked unseen: `ceil(20%)`.
pub fn unseen_count(n_speakers: usize) -> usize {
    n_speakers.div_ceil(5)
}

/// Generate a corpus on disk: one WAV per utterance under `out_dir/wav/`,
/// a JSON-lines manifest, and a `speakers.json` sidecar with the voice
/// parameters. Fully reproducible from the seed.
pub fn gen_corpus(
    out_dir: &Path,
    n_speakers: usize,
    utts_per_speaker: usize,
    seed: u64,
) -> Result<Manifest> {
    assert!(n_speakers >= 2, "need at least two speakers");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speakers = draw_speakers(n_speakers, &mut rng);
    let n_unseen = unseen_count(n_speakers);

    // pre-draw all contents and seeds so rendering can run in parallel
    struct Job {
        spk_idx: usize,
        utt_idx: usize,
        content: Vec<u16>,
        seed: u64,
    }
    let mut jobs = Vec::with_capacity(n_speakers * utts_per_speaker);
    for spk_idx in 0..n_speakers {
        for utt_idx in 0..utts_per_speaker {
            let len = rng.random_range(4..=8usize);
            let content: Vec<u16> = (0..len).map(|_| rng.random_range(0..VOCAB_SIZE)).collect();
            jobs.push(Job { spk_idx, utt_idx, content, seed: rng.random() });
        }
    }

    std::fs::create_dir_all(out_dir.join("wav"))?;
    let rendered: Vec<Result<ManifestEntry>> = jobs
        .par_iter()
        .map(|job| {
            let spk = &speakers[job.spk_idx];
            let utt = render_utterance(spk, &job.content, job.seed)?;
            let dir = out_dir.join("wav").join(&spk.id);
            std::fs::create_dir_all(&dir)?;
            let path = dir.join(format!("utt{:04}.wav", job.utt_idx));
            write_wav(&path, &utt.waveform)?;
            Ok(ManifestEntry {
                path,
                speaker: spk.id.clone(),
                split: if job.spk_idx >= n_speakers - n_unseen {
                    Split::Unseen
                } else {
                    Split::Seen
                },
                f0_mean_hz: utt.f0_mean_hz,
                rms: utt.rms,
                group: spk.group,
            })
        })
        .collect();
    let entries = rendered.into_iter().collect::<Result<Vec<_>>>()?;

    let manifest = Manifest { entries };
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    let sidecar = serde_json::to_string_pretty(&speakers)?;
    std::fs::write(out_dir.join("speakers.json"), sidecar)?;
    Ok(manifest)
}

pub fn load_speakers(corpus_dir: &Path) -> Result<Vec<SyntheticSpeaker>> {
    let text = std::fs::read_to_string(corpus_dir.join("speakers.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Build a manifest from a directory of WAV files. Speaker ids come from the
/// parent directory name unless `speaker_map` (a JSON object mapping file
/// names to speaker ids) says otherwise. Unreadable files are skipped with a
/// warning on stderr.
pub fn ingest_wav_dir(dir: &Path, speaker_map: Option<&Path>) -> Result<Manifest> {
    let map: BTreeMap<String, String> = match speaker_map {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => BTreeMap::new(),
    };
    let mut wavs = Vec::new();
    collect_wavs(dir, &mut wavs)?;
    wavs.sort();

    let mut raw = Vec::new();
    for path in wavs {
        let w = match read_wav(&path) {
            Ok(w) if w.len() >= crate::signal::MEASURE_FRAME => w,
            Ok(_) => {
                eprintln!("warning: {} too short, skipping", path.display());
                continue;
            }
            Err(e) => {
                eprintln!("warning: {e}, skipping");
                continue;
            }
        };
        let fname = path.file_name().unwrap_or_default().to_string_lossy().to_string();
        let speaker = map
            .get(&fname)
            .cloned()
            .or_else(|| {
                path.parent()
                    .and_then(|p| p.file_name())
                    .map(|n| n.to_string_lossy().to_string())
            })
            .unwrap_or_else(|| "unknown".to_string());
        let track = estimate_f0(&w);
        let f0_mean = track.voiced_mean().unwrap_or(0.0);
        let rms_frames = frame_rms(&w);
        let rms = if rms_frames.is_empty() {
            w.rms()
        } else {
            rms_frames.iter().sum::<f64>() / rms_frames.len() as f64
        };
        raw.push((path, speaker, f0_mean, rms));
    }
    if raw.is_empty() {
        return Err(Error::NoUsableAudio(dir.to_path_buf()));
    }

    // speaker-level split: last ceil(20%) of sorted speaker ids are unseen
    let mut speaker_ids: Vec<String> = raw.iter().map(|r| r.1.clone()).collect();
    speaker_ids.sort();
    speaker_ids.dedup();
    let n_unseen = unseen_count(speaker_ids.len());
    let unseen: Vec<&String> = speaker_ids.iter().skip(speaker_ids.len() - n_unseen).collect();

    let entries = raw
        .into_iter()
        .map(|(path, speaker, f0_mean, rms)| {
            let split = if unseen.iter().any(|s| **s == speaker) {
                Split::Unseen
            } else {
                Split::Seen
            };
            ManifestEntry {
                path,
                group: if f0_mean < GROUP_SPLIT_HZ {
                    PitchGroup::LowPitch
                } else {
                    PitchGroup::HighPitch
                },
                speaker,
                split,
                f0_mean_hz: f0_mean,
                rms,
            }
        })
        .collect();
    Ok(Manifest { entries })
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_wavs(&path, out)?;
        } else if path
            .extension()
            .map(|e| e.to_string_lossy().eq_ignore_ascii_case("wav"))
            .unwrap_or(false)
        {
            out.push(path);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
