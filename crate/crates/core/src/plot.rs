//! Static PNG charts: line plots for training curves and bar charts for
//! per-domain accuracy. Labels use a built-in 5×7 bitmap font covering
//! digits, letters (rendered upper-case) and a little punctuation.

use image::{Rgb, RgbImage};

use crate::error::{contract, Result};

pub const PALETTE: [Rgb<u8>; 8] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
    Rgb([227, 119, 194]),
    Rgb([127, 127, 127]),
];

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

fn glyph(c: char) -> Option<[u8; 7]> {
    Some(match c.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '+' => [0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0],
        '/' => [0, 0x01, 0x02, 0x04, 0x08, 0x10, 0],
        '&' => [0x0C, 0x12, 0x14, 0x08, 0x15, 0x12, 0x0D],
        ':' => [0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '_' => [0, 0, 0, 0, 0, 0, 0x1F],
        '*' => [0, 0x04, 0x15, 0x0E, 0x15, 0x04, 0],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        '=' => [0, 0, 0x1F, 0, 0x1F, 0, 0],
        ' ' => [0; 7],
        _ => return None,
    })
}

/// Width in pixels of `text` at `scale`.
pub fn text_width(text: &str, scale: u32) -> u32 {
    (text.chars().count() as u32 * 6).saturating_sub(1) * scale
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: u32, color: Rgb<u8>) {
    let s = scale as i64;
    for (i, c) in text.chars().enumerate() {
        let Some(rows) = glyph(c) else { continue };
        let gx = x + i as i64 * 6 * s;
        for (ry, bits) in rows.iter().enumerate() {
            for rx in 0..5 {
                if bits & (0x10 >> rx) != 0 {
                    for dy in 0..s {
                        for dx in 0..s {
                            put(img, gx + rx * s + dx, y + ry as i64 * s + dy, color);
                        }
                    }
                }
            }
        }
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>, thick: bool) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, color);
        if thick {
            put(img, x + 1, y, color);
            put(img, x, y + 1, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    for y in y0.min(y1)..=y0.max(y1) {
        for x in x0.min(x1)..=x0.max(x1) {
            put(img, x, y, color);
        }
    }
}

fn tick_label(v: f64, span: f64) -> String {
    if span >= 20.0 {
        format!("{v:.0}")
    } else if span >= 2.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

struct Frame {
    left: i64,
    right: i64,
    top: i64,
    bottom: i64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn y(&self, v: f64) -> i64 {
        let t = (v - self.y_min) / (self.y_max - self.y_min);
        self.bottom - (t * (self.bottom - self.top) as f64).round() as i64
    }

    fn draw_axes(&self, img: &mut RgbImage) {
        let span = self.y_max - self.y_min;
        for i in 0..=4 {
            let v = self.y_min + span * i as f64 / 4.0;
            let y = self.y(v);
            line(img, (self.left, y), (self.right, y), GRID, false);
            let label = tick_label(v, span);
            let w = text_width(&label, 1) as i64;
            draw_text(img, self.left - 6 - w, y - 3, &label, 1, INK);
        }
        line(img, (self.left, self.top), (self.left, self.bottom), INK, false);
        line(img, (self.left, self.bottom), (self.right, self.bottom), INK, false);
    }
}

pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

/// One polyline per series over a shared step axis.
pub fn line_chart(title: &str, x_label: &str, series: &[Series], width: u32, height: u32) -> Result<RgbImage> {
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    if n == 0 {
        return contract("line chart needs at least one value");
    }
    let finite = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return contract("line chart has no finite values");
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    } else {
        let pad = (hi - lo) * 0.05;
        lo -= pad;
        hi += pad;
    }
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let frame = Frame {
        left: 56,
        right: width as i64 - 12,
        top: 28,
        bottom: height as i64 - 28,
        y_min: lo,
        y_max: hi,
    };
    frame.draw_axes(&mut img);
    draw_text(&mut img, frame.left, 8, title, 2, INK);
    let x_of = |i: usize| {
        if n == 1 {
            frame.left
        } else {
            frame.left + ((frame.right - frame.left) as f64 * i as f64 / (n - 1) as f64).round() as i64
        }
    };
    for k in 0..=4 {
        let i = (n - 1) * k / 4;
        let label = i.to_string();
        let w = text_width(&label, 1) as i64;
        draw_text(&mut img, x_of(i) - w / 2, frame.bottom + 6, &label, 1, INK);
    }
    let xw = text_width(x_label, 1) as i64;
    draw_text(&mut img, frame.right - xw, frame.bottom + 17, x_label, 1, INK);
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut prev: Option<(i64, i64)> = None;
        for (i, &v) in s.values.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = (x_of(i), frame.y(v));
            match prev {
                Some(q) => line(&mut img, q, p, color, true),
                None => put(&mut img, p.0, p.1, color),
            }
            prev = Some(p);
        }
        // legend along the top-right
        let ly = frame.top + 4 + si as i64 * 11;
        let lw = text_width(&s.name, 1) as i64;
        let lx = frame.right - lw - 4;
        fill_rect(&mut img, lx - 14, ly + 1, lx - 5, ly + 5, color);
        draw_text(&mut img, lx, ly, &s.name, 1, INK);
    }
    Ok(img)
}

/// Vertical bars on a `[0, y_max]` axis with the value printed above each bar.
pub fn bar_chart(title: &str, bars: &[(String, f64)], y_max: f64, width: u32, height: u32) -> Result<RgbImage> {
    if bars.is_empty() {
        return contract("bar chart needs at least one bar");
    }
    if !(y_max > 0.0 && y_max.is_finite()) {
        return contract("bar chart y_max must be positive");
    }
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let frame = Frame {
        left: 48,
        right: width as i64 - 12,
        top: 40,
        bottom: height as i64 - 30,
        y_min: 0.0,
        y_max,
    };
    frame.draw_axes(&mut img);
    draw_text(&mut img, frame.left, 8, title, 2, INK);
    let slot = (frame.right - frame.left) as f64 / bars.len() as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let x0 = frame.left + (slot * i as f64 + slot * 0.15).round() as i64;
        let x1 = frame.left + (slot * (i + 1) as f64 - slot * 0.15).round() as i64;
        let cx = (x0 + x1) / 2;
        let v = v.clamp(0.0, y_max);
        fill_rect(&mut img, x0, frame.y(v), x1, frame.bottom - 1, PALETTE[i % PALETTE.len()]);
        let value = format!("{v:.3}");
        draw_text(&mut img, cx - text_width(&value, 1) as i64 / 2, frame.y(v) - 10, &value, 1, INK);
        draw_text(&mut img, cx - text_width(label, 1) as i64 / 2, frame.bottom + 8, label, 1, INK);
    }
    Ok(img)
}
