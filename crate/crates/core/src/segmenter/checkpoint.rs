//! Model checkpoints: little-endian header (`b"NCDM"`, `u32` version,
//! `u32` C', `u32` D) followed by `f32` weights (row-major C' x D) and
//! `f32` bias.

use std::fs;
use std::path::Path;

use super::{LinearSegmenter, Params};
use crate::data::ClassSpace;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NCDM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<S: Scalar>(model: &LinearSegmenter<S>, path: &Path) -> Result<()> {
    let p = model.params();
    let mut buf = Vec::with_capacity(16 + 4 * p.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(p.outputs() as u32).to_le_bytes());
    buf.extend_from_slice(&(p.dim() as u32).to_le_bytes());
    for v in p.iter() {
        buf.extend_from_slice(&(v.widen() as f32).to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; `class_space` must agree with its channel count.
pub fn read_checkpoint<S: Scalar>(path: &Path, class_space: ClassSpace) -> Result<LinearSegmenter<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::CorruptRecord {
        id: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing checkpoint header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(1) != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: word(1),
            expected: CHECKPOINT_VERSION,
        });
    }
    let (outputs, dim) = (word(2) as usize, word(3) as usize);
    if bytes.len() != 16 + 4 * (outputs * dim + outputs) {
        return Err(bad("payload length does not match header"));
    }
    let values: Vec<S> = bytes[16..]
        .chunks_exact(4)
        .map(|c| S::cast(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    let (w, b) = values.split_at(outputs * dim);
    LinearSegmenter::new(class_space, Params::from_parts(outputs, dim, w.to_vec(), b.to_vec())?)
}
