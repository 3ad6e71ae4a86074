//! `SLD1` dataset files.
//!
//! Little-endian: magic `SLD1`, u32 count, u32 height, u32 width,
//! u32 channels (3), u32 num_classes; then per sample a u8 split tag,
//! `height * width * 3` RGB bytes and `num_classes` f32 label entries.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, DatasetManifest, Sample, Split};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SLD1";
const HEADER_LEN: usize = 4 + 5 * 4;

pub(super) fn encode(ds: &Dataset) -> Vec<u8> {
    let record = 1 + ds.pixels_per_image() + 4 * ds.num_classes;
    let mut out = Vec::with_capacity(HEADER_LEN + record * ds.len());
    out.extend_from_slice(&MAGIC);
    for v in [ds.len(), ds.height, ds.width, 3, ds.num_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in &ds.samples {
        out.push(s.split.tag());
        out.extend_from_slice(&s.pixels);
        for p in &s.soft_label {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    out
}

fn u32_at(bytes: &[u8], offset: usize) -> usize {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()) as usize
}

pub(super) fn decode(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: bytes[..bytes.len().min(4)].to_vec() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len())));
    }
    let count = u32_at(bytes, 4);
    let height = u32_at(bytes, 8);
    let width = u32_at(bytes, 12);
    let channels = u32_at(bytes, 16);
    let num_classes = u32_at(bytes, 20);
    if channels != 3 {
        return Err(Error::DimensionMismatch(format!("expected 3 channels, header says {channels}")));
    }
    if num_classes < 2 || height == 0 || width == 0 {
        return Err(Error::DimensionMismatch(format!(
            "header dimensions {height}x{width}, {num_classes} classes"
        )));
    }
    let n_pixels = height * width * 3;
    let record = 1 + n_pixels + 4 * num_classes;
    let expected = HEADER_LEN as u64 + record as u64 * count as u64;
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated(format!(
            "header promises {count} samples ({expected} bytes), file has {}",
            bytes.len()
        )));
    }
    if bytes.len() as u64 > expected {
        return Err(Error::DimensionMismatch(format!(
            "{} trailing bytes after {count} samples",
            bytes.len() as u64 - expected
        )));
    }
    let mut samples = Vec::with_capacity(count);
    for chunk in bytes[HEADER_LEN..].chunks_exact(record) {
        let split = Split::from_tag(chunk[0])
            .ok_or_else(|| Error::InvalidArgument(format!("split tag {} not in 0..=2", chunk[0])))?;
        let pixels = chunk[1..1 + n_pixels].to_vec();
        let soft_label = chunk[1 + n_pixels..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        samples.push(Sample { split, pixels, soft_label });
    }
    Ok(Dataset { height, width, num_classes, samples })
}

/// Sidecar path for a dataset's manifest: `<path>.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes the dataset and, when given, its JSON manifest sidecar.
pub fn write_dataset(path: &Path, dataset: &Dataset, manifest: Option<&DatasetManifest>) -> Result<()> {
    fs::write(path, encode(dataset))?;
    if let Some(m) = manifest {
        fs::write(manifest_path(path), serde_json::to_string_pretty(m)? + "\n")?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode(&fs::read(path)?)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    Ok(serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?)
}
