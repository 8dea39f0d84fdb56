//! Attention grounding: rebuilds final-layer attention from captured Q/K
//! projections and scores how much of it lands on non-white image content.

use std::ops::Range;

use image::RgbImage;
use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{contract, Error, Result};

mod capture_file;
mod heatmap;
mod image_ops;
mod reconstruct;

pub use capture_file::{read_capture, write_capture, CaptureManifest, TensorEntry, TensorTable, CAPTURE_FORMAT};
pub use heatmap::{jet, render_heatmap, render_overlay};
pub use image_ops::{
    asm_score, attention_entropy, fill_whitespace, foreground_mask, foreground_score, minmax_normalize,
    nearest_resize, AttentionGrid, ForegroundMask, DEFAULT_WHITE_THRESHOLD,
};
pub use reconstruct::{apply_rope, expand_gqa, gqa_ratio, reconstruct_attention, split_heads, PreparedAttention};

/// Captured final-layer projections for one sequence.
///
/// Token indices are 0-based. `generated` lists the query positions whose
/// attention rows are scored; a per-step capture from a generation hook
/// uses `T-1..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    /// `[T × n_heads·head_dim]`
    pub q: Array2<f32>,
    /// `[T × n_kv_heads·head_dim]`
    pub k: Array2<f32>,
    /// `[T' × head_dim]`, `T' ≥ T`
    pub cos: Array2<f32>,
    pub sin: Array2<f32>,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub alpha: f64,
    pub image_span: Range<usize>,
    pub grid_side: usize,
    pub generated: Range<usize>,
    /// Declared `(height, width)` of the image the grid is resized to.
    pub image_size: Option<(usize, usize)>,
}

fn check_finite(a: &Array2<f32>, name: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            tensor: name.to_string(),
        })
    }
}

impl AttentionCapture {
    pub fn seq_len(&self) -> usize {
        self.q.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.seq_len();
        if self.n_heads == 0 || self.n_kv_heads == 0 || self.head_dim == 0 || self.grid_side == 0 {
            return contract("n_heads, n_kv_heads, head_dim and grid_side must be positive");
        }
        gqa_ratio(self.n_heads, self.n_kv_heads)?;
        if self.head_dim % 2 != 0 {
            return contract(format!("head_dim {} must be even", self.head_dim));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return contract(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.q.ncols() != self.n_heads * self.head_dim {
            return Err(Error::Shape(format!(
                "q is {}×{}, expected width {}",
                t,
                self.q.ncols(),
                self.n_heads * self.head_dim
            )));
        }
        if self.k.dim() != (t, self.n_kv_heads * self.head_dim) {
            return Err(Error::Shape(format!(
                "k is {:?}, expected ({t}, {})",
                self.k.dim(),
                self.n_kv_heads * self.head_dim
            )));
        }
        for (name, table) in [("cos", &self.cos), ("sin", &self.sin)] {
            if table.nrows() < t || table.ncols() != self.head_dim {
                return Err(Error::Shape(format!(
                    "{name} table is {:?}, needs at least {t} rows of width {}",
                    table.dim(),
                    self.head_dim
                )));
            }
        }
        let span = &self.image_span;
        if span.len() != self.grid_side * self.grid_side {
            return contract(format!(
                "image span {span:?} has {} tokens, grid side {} needs {}",
                span.len(),
                self.grid_side,
                self.grid_side * self.grid_side
            ));
        }
        if span.end > t {
            return contract(format!("image span {span:?} exceeds sequence length {t}"));
        }
        if self.generated.start > self.generated.end || self.generated.end > t {
            return contract(format!(
                "generated range {:?} outside sequence length {t}",
                self.generated
            ));
        }
        if let Some((h, w)) = self.image_size {
            if h == 0 || w == 0 {
                return contract("declared image size has a zero dimension");
            }
        }
        check_finite(&self.q, "q")?;
        check_finite(&self.k, "k")?;
        check_finite(&self.cos, "cos")?;
        check_finite(&self.sin, "sin")
    }
}

fn grid_from_row(row: &[f64], capture: &AttentionCapture) -> Result<AttentionGrid> {
    let span = &capture.image_span;
    if span.end > row.len() {
        return contract(format!("image span {span:?} exceeds row length {}", row.len()));
    }
    let g = capture.grid_side;
    let values = Array2::from_shape_vec((g, g), row[span.clone()].to_vec())
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(AttentionGrid::raw(values))
}

/// Head-mean attention of the last token over the image span, as a
/// `G × G` grid (row-major).
pub fn extract_image_attention(attn: &ndarray::Array3<f64>, capture: &AttentionCapture) -> Result<AttentionGrid> {
    let t = attn.dim().1;
    if t == 0 {
        return contract("empty attention tensor");
    }
    extract_image_attention_at(attn, capture, t - 1)
}

/// Same as [`extract_image_attention`] for query row `query`.
pub fn extract_image_attention_at(
    attn: &ndarray::Array3<f64>,
    capture: &AttentionCapture,
    query: usize,
) -> Result<AttentionGrid> {
    let (n, t, t2) = attn.dim();
    if t != t2 || n == 0 {
        return Err(Error::Shape(format!("attention tensor {:?} is not [n × T × T]", attn.dim())));
    }
    if query >= t {
        return contract(format!("query row {query} outside sequence length {t}"));
    }
    let mut row = vec![0.0; t];
    for h in 0..n {
        for (acc, v) in row.iter_mut().zip(attn.slice(ndarray::s![h, query, ..])) {
            *acc += v;
        }
    }
    row.iter_mut().for_each(|v| *v /= n as f64);
    grid_from_row(&row, capture)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundingOptions {
    pub white_threshold: u8,
    pub fill_whitespace: bool,
    /// Keep the per-token pixel maps in the result (for heatmaps).
    pub keep_maps: bool,
}

impl Default for GroundingOptions {
    fn default() -> Self {
        Self {
            white_threshold: DEFAULT_WHITE_THRESHOLD,
            fill_whitespace: false,
            keep_maps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundingScores {
    pub per_token: Vec<f64>,
    pub asm: f64,
    pub entropy: f64,
    #[serde(skip)]
    pub cumulative_map: Array2<f64>,
    #[serde(skip)]
    pub token_maps: Vec<Array2<f64>>,
}

/// Runs the grounding pipeline over every generated position of every
/// capture: attention row → image grid → min-max → resize → masked score.
///
/// Entropy uses the sum of the normalized, resized per-token maps.
pub fn attn_reward_for_rollout(
    captures: &[AttentionCapture],
    image: &RgbImage,
    options: GroundingOptions,
) -> Result<GroundingScores> {
    let Some(first) = captures.first() else {
        return contract("no captures supplied");
    };
    let (w, h) = image.dimensions();
    let (h, w) = (h as usize, w as usize);
    for c in captures {
        if c.grid_side != first.grid_side {
            return contract("captures disagree on grid side");
        }
        if let Some(declared) = c.image_size {
            if declared != (h, w) {
                return Err(Error::Shape(format!(
                    "image is {h}×{w} but capture declares {}×{}",
                    declared.0, declared.1
                )));
            }
        }
    }
    let mut mask = foreground_mask(image, options.white_threshold);
    if options.fill_whitespace {
        mask = fill_whitespace(&mask);
    }

    let mut per_token = Vec::new();
    let mut cumulative = Array2::<f64>::zeros((h, w));
    let mut token_maps = Vec::new();
    for capture in captures {
        let prep = PreparedAttention::new(capture)?;
        let maps: Vec<(f64, Array2<f64>)> = capture
            .generated
            .clone()
            .into_par_iter()
            .map(|i| {
                let grid = grid_from_row(&prep.head_mean_row(i), capture)?;
                let norm = minmax_normalize(&grid);
                let pixel = nearest_resize(&norm.values, h, w)?;
                Ok((foreground_score(&pixel, &mask)?, pixel))
            })
            .collect::<Result<_>>()?;
        for (score, pixel) in maps {
            per_token.push(score);
            cumulative += &pixel;
            if options.keep_maps {
                token_maps.push(pixel);
            }
        }
    }
    let asm = asm_score(&per_token)?;
    let entropy = image_ops::entropy_of_cumulative(&cumulative);
    Ok(GroundingScores {
        per_token,
        asm,
        entropy,
        cumulative_map: cumulative,
        token_maps,
    })
}
