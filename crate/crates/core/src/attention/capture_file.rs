//! Capture files: a JSON manifest plus a flat blob of little-endian `f32`.
//!
//! ```text
//! {
//!   "format": "phyreward-capture-v1",
//!   "seq_len": 40, "n_heads": 4, "n_kv_heads": 1, "head_dim": 8,
//!   "alpha": 0.35355339,
//!   "image_token_start": 2, "grid_side": 4,
//!   "generated_start": 30, "generated_end": 40,
//!   "image_height": 64, "image_width": 64,
//!   "blob": "capture.bin",
//!   "tensors": {
//!     "q":   { "offset": 0,    "shape": [40, 32] },
//!     "k":   { "offset": 5120, "shape": [40, 8] },
//!     "cos": { "offset": 6400, "shape": [40, 8] },
//!     "sin": { "offset": 7680, "shape": [40, 8] }
//!   }
//! }
//! ```
//!
//! Token indices are 0-based; `generated_end` is exclusive. The image span
//! covers `grid_side²` tokens starting at `image_token_start`. Offsets are in
//! bytes into the blob, which is resolved relative to the manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::AttentionCapture;
use crate::error::{Error, Result};

pub const CAPTURE_FORMAT: &str = "phyreward-capture-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub offset: u64,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorTable {
    pub q: TensorEntry,
    pub k: TensorEntry,
    pub cos: TensorEntry,
    pub sin: TensorEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureManifest {
    pub format: String,
    pub seq_len: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub alpha: f64,
    pub image_token_start: usize,
    pub grid_side: usize,
    pub generated_start: usize,
    pub generated_end: usize,
    #[serde(default)]
    pub image_height: Option<usize>,
    #[serde(default)]
    pub image_width: Option<usize>,
    pub blob: String,
    pub tensors: TensorTable,
}

fn field_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Shape(format!("{}: {msg}", path.display()))
}

fn read_tensor(blob: &[u8], entry: &TensorEntry, name: &str, path: &Path) -> Result<Array2<f32>> {
    let [rows, cols] = entry.shape;
    let n = rows * cols;
    let start = entry.offset as usize;
    let end = start + n * 4;
    if end > blob.len() {
        return Err(field_err(
            path,
            format!("tensors.{name}: bytes {start}..{end} exceed blob length {}", blob.len()),
        ));
    }
    let values: Vec<f32> = blob[start..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| field_err(path, format!("tensors.{name}: {e}")))
}

/// Reads a manifest and its blob.
pub fn read_capture(manifest_path: &Path) -> Result<AttentionCapture> {
    let manifest: CaptureManifest = serde_json::from_slice(&std::fs::read(manifest_path)?)
        .map_err(|e| field_err(manifest_path, format!("manifest: {e}")))?;
    if manifest.format != CAPTURE_FORMAT {
        return Err(field_err(
            manifest_path,
            format!("format: expected {CAPTURE_FORMAT:?}, got {:?}", manifest.format),
        ));
    }
    let blob_path = blob_path(manifest_path, &manifest.blob);
    let blob = std::fs::read(&blob_path)?;
    let t = &manifest.tensors;
    let capture = AttentionCapture {
        q: read_tensor(&blob, &t.q, "q", manifest_path)?,
        k: read_tensor(&blob, &t.k, "k", manifest_path)?,
        cos: read_tensor(&blob, &t.cos, "cos", manifest_path)?,
        sin: read_tensor(&blob, &t.sin, "sin", manifest_path)?,
        n_heads: manifest.n_heads,
        n_kv_heads: manifest.n_kv_heads,
        head_dim: manifest.head_dim,
        alpha: manifest.alpha,
        image_span: manifest.image_token_start
            ..manifest.image_token_start + manifest.grid_side * manifest.grid_side,
        grid_side: manifest.grid_side,
        generated: manifest.generated_start..manifest.generated_end,
        image_size: manifest.image_height.zip(manifest.image_width),
    };
    if capture.seq_len() != manifest.seq_len {
        return Err(field_err(
            manifest_path,
            format!("seq_len {} but tensors.q has {} rows", manifest.seq_len, capture.seq_len()),
        ));
    }
    capture.validate()?;
    Ok(capture)
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    let p = Path::new(blob);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`, returning the manifest path.
pub fn write_capture(capture: &AttentionCapture, dir: &Path, stem: &str) -> Result<PathBuf> {
    capture.validate()?;
    std::fs::create_dir_all(dir)?;
    let blob_name = format!("{stem}.bin");
    let mut blob = Vec::new();
    let entry = |a: &Array2<f32>, blob: &mut Vec<u8>| {
        let offset = blob.len() as u64;
        for v in a.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        TensorEntry {
            offset,
            shape: [a.nrows(), a.ncols()],
        }
    };
    let tensors = TensorTable {
        q: entry(&capture.q, &mut blob),
        k: entry(&capture.k, &mut blob),
        cos: entry(&capture.cos, &mut blob),
        sin: entry(&capture.sin, &mut blob),
    };
    let manifest = CaptureManifest {
        format: CAPTURE_FORMAT.to_string(),
        seq_len: capture.seq_len(),
        n_heads: capture.n_heads,
        n_kv_heads: capture.n_kv_heads,
        head_dim: capture.head_dim,
        alpha: capture.alpha,
        image_token_start: capture.image_span.start,
        grid_side: capture.grid_side,
        generated_start: capture.generated.start,
        generated_end: capture.generated.end,
        image_height: capture.image_size.map(|s| s.0),
        image_width: capture.image_size.map(|s| s.1),
        blob: blob_name.clone(),
        tensors,
    };
    std::fs::File::create(dir.join(&blob_name))?.write_all(&blob)?;
    let manifest_path = dir.join(format!("{stem}.json"));
    std::fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest_path)
}
