//! WAV read/write. Reads mono PCM 16-bit or IEEE float32 at any sample
//! rate (resampled to 22050 Hz); always writes 22050 Hz float32.

use std::path::Path;

use super::augment::resample_to_rate;
use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bad = |reason: String| Error::BadWav { path: path.to_path_buf(), reason };
    let mut reader = hound::WavReader::open(path).map_err(|e| bad(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(bad(format!("expected mono, got {} channels", spec.channels)));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(e.to_string()))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(e.to_string()))?,
        (fmt, bits) => {
            return Err(bad(format!("unsupported format {fmt:?} at {bits} bits")));
        }
    };
    let w = Waveform::new(samples, spec.sample_rate);
    if !w.samples.iter().all(|s| s.is_finite()) {
        return Err(bad("non-finite samples".into()));
    }
    Ok(resample_to_rate(&w, SAMPLE_RATE))
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let source = if w.sample_rate == SAMPLE_RATE {
        w.clone()
    } else {
        resample_to_rate(w, SAMPLE_RATE)
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::BadWav {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    for &s in &source.samples {
        writer.write_sample(s as f32).map_err(|e| Error::BadWav {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    }
    writer.finalize().map_err(|e| Error::BadWav {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(())
}
