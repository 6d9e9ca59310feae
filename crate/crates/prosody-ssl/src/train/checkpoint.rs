//! Binary checkpoint format:
//!
//! ```text
//! 8-byte magic "PSSLCKPT"
//! u32 LE version (currently 1)
//! u32 LE json length, then the JSON metadata block
//! per-tensor records:
//!   u32 LE name length + name bytes (UTF-8)
//!   u32 LE rank
//!   u64 LE per dimension
//!   f32 LE data (product of dims)
//! u32 LE CRC32 of everything above
//! ```
//!
//! Records run until 4 bytes before the end of file. Readers verify the CRC
//! before parsing, so any single-byte corruption is rejected.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grad::Tensor;

pub const MAGIC: &[u8; 8] = b"PSSLCKPT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, Tensor<f32>)],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (name, tensor) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());

    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor<f32>)>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < MAGIC.len() + 8 + 4 {
        return Err(Error::CheckpointIntegrity("file too short".into()));
    }
    let body = &buf[..buf.len() - 4];
    let stored_crc = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(Error::CheckpointIntegrity("CRC mismatch".into()));
    }
    if &body[..8] != MAGIC {
        return Err(Error::CheckpointIntegrity("bad magic".into()));
    }
    let mut pos = 8usize;
    let version = read_u32(body, &mut pos)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { got: version, supported: VERSION });
    }
    let json_len = read_u32(body, &mut pos)? as usize;
    let meta: serde_json::Value = serde_json::from_slice(take(body, &mut pos, json_len)?)?;

    let mut tensors = Vec::new();
    while pos < body.len() {
        let name_len = read_u32(body, &mut pos)? as usize;
        let name = String::from_utf8(take(body, &mut pos, name_len)?.to_vec())
            .map_err(|_| Error::CheckpointIntegrity("tensor name not UTF-8".into()))?;
        let rank = read_u32(body, &mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let bytes = take(body, &mut pos, 8)?;
            shape.push(u64::from_le_bytes(bytes.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(body, &mut pos, n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok((meta, tensors))
}

fn read_u32(buf: &[u8], pos: &mut usize) -> Result<u32> {
    let b = take(buf, pos, 4)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    if *pos + n > buf.len() {
        return Err(Error::CheckpointIntegrity("truncated record".into()));
    }
    let out = &buf[*pos..*pos + n];
    *pos += n;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (serde_json::Value, Vec<(String, Tensor<f32>)>) {
        let meta = serde_json::json!({"kind": "test", "iteration": 7});
        let tensors = vec![
            ("a.w".to_string(), Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 0.0, 3.25, 9.5, -0.125]).unwrap()),
            ("a.b".to_string(), Tensor::from_vec(&[3], vec![0.5, 0.25, -1.0]).unwrap()),
        ];
        (meta, tensors)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let (meta, tensors) = sample();
        write_checkpoint(&path, &meta, &tensors).unwrap();
        let (m2, t2) = read_checkpoint(&path).unwrap();
        assert_eq!(meta, m2);
        assert_eq!(tensors.len(), t2.len());
        for ((n1, v1), (n2, v2)) in tensors.iter().zip(&t2) {
            assert_eq!(n1, n2);
            assert_eq!(v1.shape(), v2.shape());
            for (a, b) in v1.data().iter().zip(v2.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // save(load(x)) reproduces identical bytes
        let path2 = dir.path().join("y.ckpt");
        write_checkpoint(&path2, &m2, &t2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let (meta, tensors) = sample();
        write_checkpoint(&path, &meta, &tensors).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("integrity"), "{err}");
    }

    #[test]
    fn any_single_byte_flip_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let (meta, tensors) = sample();
        write_checkpoint(&path, &meta, &tensors).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for pos in [0usize, 9, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut corrupt = bytes.clone();
            corrupt[pos] ^= 0x40;
            std::fs::write(&path, &corrupt).unwrap();
            assert!(read_checkpoint(&path).is_err(), "flip at {pos} went undetected");
        }
    }

    #[test]
    fn version_bump_is_rejected_naming_both() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let (meta, tensors) = sample();
        write_checkpoint(&path, &meta, &tensors).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        let body_len = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("99") && msg.contains('1'), "{msg}");
    }
}
