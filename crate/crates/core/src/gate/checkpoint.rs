//! Gate checkpoint file.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "TRGATE\0\0"
//! version    u32      1
//! dims       u32 x 3  input, hidden, paths
//! params     f32 x N  W1 | b1 | W2 | b2
//! has_opt    u8       0 or 1
//! [opt]      u64 step, f64 weight_decay, beta1, beta2, epsilon,
//!            f64 x N first moment, f64 x N second moment
//! meta_len   u32
//! meta       UTF-8 JSON object of string -> string
//! sha256     32 bytes over everything above
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{GateDims, GateParameters, NUM_PATHS};
use crate::numerics::OptimizerState;

const MAGIC: &[u8; 8] = b"TRGATE\0\0";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("incompatible checkpoint: file has dims {found:?}, expected {expected:?}")]
    Incompatible {
        found: (usize, usize, usize),
        expected: (usize, usize, usize),
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: GateParameters,
    pub optimizer: Option<OptimizerState>,
    pub metadata: BTreeMap<String, String>,
}

fn encode(
    params: &GateParameters,
    optimizer: Option<&OptimizerState>,
    metadata: &BTreeMap<String, String>,
) -> Vec<u8> {
    let n = params.num_params();
    let mut buf = Vec::with_capacity(64 + n * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let dims = params.dims();
    for d in [dims.input, dims.hidden, NUM_PATHS] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in params.as_flat() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    match optimizer {
        None => buf.push(0),
        Some(opt) => {
            buf.push(1);
            buf.extend_from_slice(&opt.step_count.to_le_bytes());
            for v in [opt.weight_decay, opt.beta1, opt.beta2, opt.epsilon] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in opt.first_moment.iter().chain(&opt.second_moment) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let meta = serde_json::to_vec(metadata).expect("string map serializes");
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

/// Writes the checkpoint through a temporary file and renames it into place.
///
/// Parameters are narrowed to `f32`. Optimizer moments are kept in `f64`.
pub fn save_checkpoint(
    path: &Path,
    params: &GateParameters,
    optimizer: Option<&OptimizerState>,
    metadata: &BTreeMap<String, String>,
) -> Result<(), CheckpointError> {
    if let Some(opt) = optimizer {
        if opt.num_params() != params.num_params() {
            return Err(CheckpointError::Integrity(format!(
                "optimizer state covers {} parameters, gate has {}",
                opt.num_params(),
                params.num_params()
            )));
        }
    }
    let bytes = encode(params, optimizer, metadata);
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint built with the canonical 10112 / 256 / 3 dimensions.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    load_checkpoint_with_dims(path, GateDims::CANONICAL)
}

pub fn load_checkpoint_with_dims(path: &Path, expected: GateDims) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    decode(&bytes, expected)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Integrity(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| overflow())?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn overflow() -> CheckpointError {
    CheckpointError::Integrity("size overflow".into())
}

fn decode(bytes: &[u8], expected: GateDims) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() + DIGEST_LEN {
        return Err(CheckpointError::Integrity(format!("file too short ({} bytes)", bytes.len())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Integrity("checksum mismatch (corrupt or truncated file)".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(CheckpointError::Integrity("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Integrity(format!("unsupported version {version}")));
    }
    let found = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let wanted = (expected.input, expected.hidden, NUM_PATHS);
    if found != wanted {
        return Err(CheckpointError::Incompatible {
            found,
            expected: wanted,
        });
    }
    let n = expected.num_params();
    let raw = r.take(n.checked_mul(4).ok_or_else(overflow)?)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let params = GateParameters::from_flat(expected, data)
        .map_err(|e| CheckpointError::Integrity(e.to_string()))?;
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step_count = r.u64()?;
            let weight_decay = r.f64()?;
            let beta1 = r.f64()?;
            let beta2 = r.f64()?;
            let epsilon = r.f64()?;
            let first_moment = r.f64_vec(n)?;
            let second_moment = r.f64_vec(n)?;
            Some(OptimizerState {
                first_moment,
                second_moment,
                step_count,
                weight_decay,
                beta1,
                beta2,
                epsilon,
            })
        }
        other => return Err(CheckpointError::Integrity(format!("bad optimizer flag {other}"))),
    };
    let meta_len = r.u32()? as usize;
    let metadata = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| CheckpointError::Integrity(format!("metadata: {e}")))?;
    if r.pos != body.len() {
        return Err(CheckpointError::Integrity("trailing bytes".into()));
    }
    Ok(Checkpoint {
        params,
        optimizer,
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::init_gate;

    fn meta() -> BTreeMap<String, String> {
        BTreeMap::from([("val_accuracy".to_string(), "0.97".to_string())])
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gate.ckpt");
        let params = init_gate(GateDims::CANONICAL, 4);
        let mut opt = OptimizerState::new(params.num_params(), 0.01);
        opt.step_count = 17;
        opt.first_moment[5] = 0.125;
        opt.second_moment[9] = 1e-9;
        save_checkpoint(&path, &params, Some(&opt), &meta()).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params.as_flat().len(), params.as_flat().len());
        assert!(loaded
            .params
            .as_flat()
            .iter()
            .zip(params.as_flat())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(loaded.optimizer.as_ref(), Some(&opt));
        assert_eq!(loaded.metadata, meta());
        assert!(!path.with_extension("partial").exists());
    }

    #[test]
    fn truncated_file_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gate.ckpt");
        let dims = GateDims::new(10, 4);
        save_checkpoint(&path, &init_gate(dims, 1), None, &meta()).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [0, 5, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(
                load_checkpoint_with_dims(&path, dims),
                Err(CheckpointError::Integrity(_))
            ));
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x01;
        fs::write(&path, &flipped).unwrap();
        assert!(matches!(
            load_checkpoint_with_dims(&path, dims),
            Err(CheckpointError::Integrity(_))
        ));
    }

    #[test]
    fn other_hidden_size_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gate.ckpt");
        let params = init_gate(GateDims::new(super::super::INPUT_DIM, 128), 1);
        save_checkpoint(&path, &params, None, &BTreeMap::new()).unwrap();
        match load_checkpoint(&path) {
            Err(CheckpointError::Incompatible { found, expected }) => {
                assert_eq!(found, (10112, 128, 3));
                assert_eq!(expected, (10112, 256, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mismatched_optimizer_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gate.ckpt");
        let params = init_gate(GateDims::new(4, 2), 1);
        let opt = OptimizerState::new(3, 0.0);
        assert!(save_checkpoint(&path, &params, Some(&opt), &BTreeMap::new()).is_err());
        assert!(!path.exists());
    }
}
