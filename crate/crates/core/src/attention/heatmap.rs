//! Heatmap rendering.
//!
//! Colormap: piecewise-linear "jet" over [0, 1],
//! 0 → dark blue (0,0,128), 0.125 → blue, 0.375 → cyan, 0.625 → yellow,
//! 0.875 → red, 1 → dark red (128,0,0). Values are min-max scaled before
//! colouring; constant maps render as the 0 colour.

use image::{Rgb, RgbImage};
use ndarray::Array2;

use super::image_ops::{is_degenerate, min_max};

const JET_STOPS: [(f64, [f64; 3]); 6] = [
    (0.0, [0.0, 0.0, 0.5]),
    (0.125, [0.0, 0.0, 1.0]),
    (0.375, [0.0, 1.0, 1.0]),
    (0.625, [1.0, 1.0, 0.0]),
    (0.875, [1.0, 0.0, 0.0]),
    (1.0, [0.5, 0.0, 0.0]),
];

/// Maps `v ∈ [0, 1]` to a jet colour.
pub fn jet(v: f64) -> Rgb<u8> {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let idx = JET_STOPS
        .windows(2)
        .position(|w| v <= w[1].0)
        .unwrap_or(JET_STOPS.len() - 2);
    let (x0, c0) = JET_STOPS[idx];
    let (x1, c1) = JET_STOPS[idx + 1];
    let t = (v - x0) / (x1 - x0);
    let ch = |k: usize| ((c0[k] + t * (c1[k] - c0[k])) * 255.0).round() as u8;
    Rgb([ch(0), ch(1), ch(2)])
}

fn scaled(map: &Array2<f64>) -> Array2<f64> {
    let (min, max) = min_max(map);
    if is_degenerate(min, max) {
        Array2::zeros(map.dim())
    } else {
        map.mapv(|v| (v - min) / (max - min))
    }
}

/// Colour-mapped heatmap of `map` at its own resolution.
pub fn render_heatmap(map: &Array2<f64>) -> RgbImage {
    let s = scaled(map);
    let (h, w) = s.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| jet(s[[y as usize, x as usize]]))
}

/// Heatmap alpha-blended over `base`; `opacity` is the heatmap weight.
pub fn render_overlay(map: &Array2<f64>, base: &RgbImage, opacity: f64) -> RgbImage {
    let heat = render_heatmap(map);
    let opacity = opacity.clamp(0.0, 1.0);
    let (w, h) = base.dimensions();
    RgbImage::from_fn(w, h, |x, y| {
        let b = base.get_pixel(x, y).0;
        let hx = (x as u64 * heat.width() as u64 / w as u64) as u32;
        let hy = (y as u64 * heat.height() as u64 / h as u64) as u32;
        let c = heat.get_pixel(hx, hy).0;
        let mix = |k: usize| (b[k] as f64 * (1.0 - opacity) + c[k] as f64 * opacity).round() as u8;
        Rgb([mix(0), mix(1), mix(2)])
    })
}
