//! Pixel-space pieces of the grounding reward: foreground masks, hole
//! filling, grid normalization and resizing, and the masked score.

use std::collections::VecDeque;

use image::RgbImage;
use ndarray::Array2;
use crate::error::{contract, Error, Result};

/// Channel value at or above which a pixel channel counts as white.
pub const DEFAULT_WHITE_THRESHOLD: u8 = 230;

/// Patch-grid attention map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrid {
    pub values: Array2<f64>,
    pub normalized: bool,
}

impl AttentionGrid {
    pub fn raw(values: Array2<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }
}

/// Binary foreground mask: 1 = content, 0 = white background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    pub mask: Array2<u8>,
    pub white_threshold: u8,
    pub whitespace_filled: bool,
}

impl ForegroundMask {
    pub fn area(&self) -> usize {
        self.mask.iter().map(|&v| v as usize).sum()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mask.dim()
    }
}

/// Constant grids (max = min up to rounding) normalize to all zeros.
pub fn minmax_normalize(grid: &AttentionGrid) -> AttentionGrid {
    let (min, max) = min_max(&grid.values);
    let span = max - min;
    let values = if is_degenerate(min, max) {
        Array2::zeros(grid.values.dim())
    } else {
        grid.values.mapv(|v| (v - min) / span)
    };
    AttentionGrid {
        values,
        normalized: true,
    }
}

pub(crate) fn min_max(a: &Array2<f64>) -> (f64, f64) {
    a.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

pub(crate) fn is_degenerate(min: f64, max: f64) -> bool {
    !(max - min > 1e-12 * max.abs().max(1.0))
}

/// Nearest-neighbour resize: target `(i, j)` reads source
/// `(⌊i·rows/H⌋, ⌊j·cols/W⌋)`.
pub fn nearest_resize(grid: &Array2<f64>, height: usize, width: usize) -> Result<Array2<f64>> {
    if height == 0 || width == 0 {
        return contract(format!("resize target {height}×{width} has a zero dimension"));
    }
    let (rows, cols) = grid.dim();
    if rows == 0 || cols == 0 {
        return contract("cannot resize an empty grid");
    }
    Ok(Array2::from_shape_fn((height, width), |(i, j)| {
        grid[[i * rows / height, j * cols / width]]
    }))
}

/// A pixel is background iff every channel is at least `threshold`.
pub fn foreground_mask(image: &RgbImage, threshold: u8) -> ForegroundMask {
    let (w, h) = image.dimensions();
    let mask = Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        let px = image.get_pixel(j as u32, i as u32).0;
        u8::from(!px.iter().all(|&c| c >= threshold))
    });
    ForegroundMask {
        mask,
        white_threshold: threshold,
        whitespace_filled: false,
    }
}

/// Flips background regions that are not 4-connected to the image border
/// into foreground. Never removes foreground.
pub fn fill_whitespace(mask: &ForegroundMask) -> ForegroundMask {
    let (h, w) = mask.mask.dim();
    let mut outside = Array2::<bool>::from_elem((h, w), false);
    let mut queue = VecDeque::new();
    let seed = |i: usize, j: usize, outside: &mut Array2<bool>, queue: &mut VecDeque<(usize, usize)>| {
        if mask.mask[[i, j]] == 0 && !outside[[i, j]] {
            outside[[i, j]] = true;
            queue.push_back((i, j));
        }
    };
    for i in 0..h {
        seed(i, 0, &mut outside, &mut queue);
        seed(i, w.saturating_sub(1), &mut outside, &mut queue);
    }
    for j in 0..w {
        seed(0, j, &mut outside, &mut queue);
        seed(h.saturating_sub(1), j, &mut outside, &mut queue);
    }
    while let Some((i, j)) = queue.pop_front() {
        let neighbours = [
            (i.wrapping_sub(1), j),
            (i + 1, j),
            (i, j.wrapping_sub(1)),
            (i, j + 1),
        ];
        for (ni, nj) in neighbours {
            if ni < h && nj < w {
                seed(ni, nj, &mut outside, &mut queue);
            }
        }
    }
    ForegroundMask {
        mask: Array2::from_shape_fn((h, w), |(i, j)| u8::from(!outside[[i, j]])),
        white_threshold: mask.white_threshold,
        whitespace_filled: true,
    }
}

/// Σ Â·F / Σ F, or 0 when the mask is empty.
pub fn foreground_score(pixel_map: &Array2<f64>, mask: &ForegroundMask) -> Result<f64> {
    if pixel_map.dim() != mask.mask.dim() {
        return Err(Error::Shape(format!(
            "attention map {:?} vs mask {:?}",
            pixel_map.dim(),
            mask.mask.dim()
        )));
    }
    let area = mask.area();
    if area == 0 {
        return Ok(0.0);
    }
    let mass: f64 = pixel_map
        .iter()
        .zip(mask.mask.iter())
        .filter(|(_, &f)| f == 1)
        .map(|(a, _)| *a)
        .sum();
    Ok(mass / area as f64)
}

/// Mean of per-token grounding scores.
pub fn asm_score(per_token: &[f64]) -> Result<f64> {
    if per_token.is_empty() {
        return contract("ASM needs at least one token score");
    }
    Ok(per_token.iter().sum::<f64>() / per_token.len() as f64)
}

/// Shannon entropy (nats) of the cumulative attention distribution.
///
/// The per-token maps are summed, min-max normalized and L1-normalized into
/// a distribution over all cells. A constant cumulative map is taken as the
/// uniform distribution (entropy `ln P`). `0·ln 0 = 0`.
pub fn attention_entropy(per_token_maps: &[Array2<f64>]) -> Result<f64> {
    let Some(first) = per_token_maps.first() else {
        return contract("entropy needs at least one attention map");
    };
    let mut cumulative = Array2::<f64>::zeros(first.dim());
    for m in per_token_maps {
        if m.dim() != first.dim() {
            return Err(Error::Shape(format!(
                "attention maps differ in shape: {:?} vs {:?}",
                m.dim(),
                first.dim()
            )));
        }
        cumulative += m;
    }
    Ok(entropy_of_cumulative(&cumulative))
}

pub(crate) fn entropy_of_cumulative(cumulative: &Array2<f64>) -> f64 {
    let p = cumulative.len();
    if p == 0 {
        return 0.0;
    }
    let (min, max) = min_max(cumulative);
    if is_degenerate(min, max) {
        return (p as f64).ln();
    }
    let scaled = cumulative.mapv(|v| (v - min) / (max - min));
    let total: f64 = scaled.sum();
    -scaled
        .iter()
        .map(|&s| s / total)
        .filter(|&a| a > 0.0)
        .map(|a| a * a.ln())
        .sum::<f64>()
}
