//! On-disk dataset directories.
//!
//! A dataset directory holds `manifest.json` and one binary record per
//! image. A record is a little-endian header (`b"NCDS"`, `u32` version,
//! `u32` H, `u32` W, `u32` D) followed by H*W*D row-major `f32` features,
//! then H*W `u8` labels if the manifest flags them, then H*W `u8`
//! saliency values (0 or 1) if flagged.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BinaryMask, ClassSpace, Dataset, FeatureMap, Item, LabelMap, SplitTag};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORD_MAGIC: &[u8; 4] = b"NCDS";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub split: String,
    pub n_base: usize,
    pub n_novel: usize,
    pub novel_head_size: usize,
    pub items: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub has_label: bool,
    pub has_saliency: bool,
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Shape(format!("{what} {v} exceeds u32")))
}

fn encode_item<S: Scalar>(item: &Item<S>) -> Result<Vec<u8>> {
    let x = &item.features;
    let n = x.n_pixels();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * x.values().len() + 2 * n);
    buf.extend_from_slice(RECORD_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (v, what) in [(x.height(), "height"), (x.width(), "width"), (x.dim(), "dim")] {
        buf.extend_from_slice(&u32_field(v, what)?.to_le_bytes());
    }
    for v in x.values() {
        buf.extend_from_slice(&(v.widen() as f32).to_le_bytes());
    }
    if let Some(labels) = &item.labels {
        buf.extend_from_slice(labels.values());
    }
    if let Some(mask) = &item.saliency {
        buf.extend(mask.values().iter().map(|&on| on as u8));
    }
    Ok(buf)
}

/// Writes `dataset` under `dir`, creating the directory if needed.
pub fn write_dataset<S: Scalar>(dataset: &Dataset<S>, dir: &Path) -> Result<()> {
    // Encode everything up front so a bad item leaves nothing on disk.
    let mut records = Vec::with_capacity(dataset.len());
    let mut entries = Vec::with_capacity(dataset.len());
    for (index, item) in dataset.items().iter().enumerate() {
        let file = format!("{index:06}.rec");
        records.push((file.clone(), encode_item(item)?));
        entries.push(ManifestEntry {
            id: item.id.clone(),
            file,
            height: item.features.height(),
            width: item.features.width(),
            dim: item.features.dim(),
            has_label: item.labels.is_some(),
            has_saliency: item.saliency.is_some(),
        });
    }
    let cs = dataset.class_space();
    let manifest = Manifest {
        version: FORMAT_VERSION,
        split: dataset.split().to_string(),
        n_base: cs.n_base(),
        n_novel: cs.n_novel(),
        novel_head_size: cs.novel_head_size(),
        items: entries,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Manifest(e.to_string()))?;

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (file, bytes) in records {
        let path = dir.join(file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let mut out = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    out.write_all(text.as_bytes())
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(manifest)
}

fn corrupt(id: &str, reason: impl Into<String>) -> Error {
    Error::CorruptRecord {
        id: id.to_string(),
        reason: reason.into(),
    }
}

fn decode_item<S: Scalar>(entry: &ManifestEntry, bytes: &[u8]) -> Result<Item<S>> {
    let id = entry.id.as_str();
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(id, "record shorter than its header"));
    }
    if &bytes[..4] != RECORD_MAGIC {
        return Err(corrupt(id, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(1) != FORMAT_VERSION {
        return Err(Error::Version {
            found: word(1),
            expected: FORMAT_VERSION,
        });
    }
    let (h, w, d) = (word(2) as usize, word(3) as usize, word(4) as usize);
    if (h, w, d) != (entry.height, entry.width, entry.dim) {
        return Err(Error::Shape(format!(
            "image `{id}`: record is {h}x{w}x{d}, manifest says {}x{}x{}",
            entry.height, entry.width, entry.dim
        )));
    }
    let n = h * w;
    let expected = HEADER_LEN
        + 4 * n * d
        + if entry.has_label { n } else { 0 }
        + if entry.has_saliency { n } else { 0 };
    if bytes.len() != expected {
        return Err(corrupt(
            id,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut cursor = HEADER_LEN;
    let values = bytes[cursor..cursor + 4 * n * d]
        .chunks_exact(4)
        .map(|c| S::cast(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    cursor += 4 * n * d;
    let features =
        FeatureMap::new(h, w, d, values).map_err(|e| corrupt(id, e.to_string()))?;
    let mut item = Item::new(id, features);
    if entry.has_label {
        item.labels = Some(LabelMap::new(h, w, bytes[cursor..cursor + n].to_vec())?);
        cursor += n;
    }
    if entry.has_saliency {
        let raw = &bytes[cursor..cursor + n];
        if raw.iter().any(|&v| v > 1) {
            return Err(corrupt(id, "saliency values must be 0 or 1"));
        }
        item.saliency = Some(BinaryMask::new(h, w, raw.iter().map(|&v| v == 1).collect())?);
    }
    Ok(item)
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn read_dataset<S: Scalar>(dir: &Path) -> Result<Dataset<S>> {
    let manifest = read_manifest(dir)?;
    let split: SplitTag = manifest.split.parse()?;
    let class_space =
        ClassSpace::with_head(manifest.n_base, manifest.n_novel, manifest.novel_head_size)?;
    let mut items = Vec::with_capacity(manifest.items.len());
    for entry in &manifest.items {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        items.push(decode_item(entry, &bytes)?);
    }
    Dataset::new(split, class_space, items)
}
