//! Independent reference implementations shared by integration tests and
//! the acceptance runner. Written as plain loops so they share no code
//! paths with the library.
#![allow(dead_code)]

use image::RgbImage;
use ndarray::Array2;
use phyreward::attention::AttentionCapture;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random capture with `T ≤ 8`, `n_h ≤ 4`, `n_kv | n_h`, even `d_h ≤ 8`.
pub fn random_capture(seed: u64) -> AttentionCapture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_heads = rng.random_range(1..=4usize);
    let divisors: Vec<usize> = (1..=n_heads).filter(|d| n_heads % d == 0).collect();
    let n_kv = divisors[rng.random_range(0..divisors.len())];
    let head_dim = 2 * rng.random_range(1..=4usize);
    let grid_side = rng.random_range(1..=2usize);
    let t = rng.random_range(grid_side * grid_side..=8);
    capture_with(&mut rng, t, n_heads, n_kv, head_dim, grid_side)
}

/// Random projections for a fixed geometry, with standard rotary tables.
pub fn capture_with(
    rng: &mut ChaCha8Rng,
    t: usize,
    n_heads: usize,
    n_kv: usize,
    head_dim: usize,
    grid_side: usize,
) -> AttentionCapture {
    let mut fill = |rows: usize, cols: usize, scale: f32| {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
    };
    let q = fill(t, n_heads * head_dim, 2.0);
    let k = fill(t, n_kv * head_dim, 2.0);
    let mut cos = Array2::zeros((t, head_dim));
    let mut sin = Array2::zeros((t, head_dim));
    let half = head_dim / 2;
    for p in 0..t {
        for m in 0..half {
            let theta = p as f32 * 10000f32.powf(-(2.0 * m as f32) / head_dim as f32);
            for col in [m, m + half] {
                cos[[p, col]] = theta.cos();
                sin[[p, col]] = theta.sin();
            }
        }
    }
    let start = rng.random_range(0..=t - grid_side * grid_side);
    AttentionCapture {
        q,
        k,
        cos,
        sin,
        n_heads,
        n_kv_heads: n_kv,
        head_dim,
        alpha: 1.0 / (head_dim as f64).sqrt(),
        image_span: start..start + grid_side * grid_side,
        grid_side,
        generated: t - 1..t,
        image_size: None,
    }
}

/// Element `m` of the rotated vector, using the textbook rotate-half rule.
pub fn rope_oracle(x: &[f64], cos: &[f64], sin: &[f64]) -> Vec<f64> {
    let d = x.len();
    let half = d / 2;
    let mut out = vec![0.0; d];
    for m in 0..d {
        let partner = if m < half { -x[m + half] } else { x[m - half] };
        out[m] = x[m] * cos[m] + partner * sin[m];
    }
    out
}

fn head_vec(a: &Array2<f32>, pos: usize, head: usize, d: usize) -> Vec<f64> {
    (0..d).map(|j| a[[pos, head * d + j]] as f64).collect()
}

fn table_row(a: &Array2<f32>, pos: usize) -> Vec<f64> {
    a.row(pos).iter().map(|&v| v as f64).collect()
}

/// Dense attention `[h][i][j]` by explicit loops over queries and keys.
pub fn dense_attention_oracle(c: &AttentionCapture) -> Vec<Vec<Vec<f64>>> {
    let t = c.q.nrows();
    let d = c.head_dim;
    let group = c.n_heads / c.n_kv_heads;
    let mut out = vec![vec![vec![0.0; t]; t]; c.n_heads];
    for h in 0..c.n_heads {
        let kv = h / group;
        for i in 0..t {
            let q = rope_oracle(&head_vec(&c.q, i, h, d), &table_row(&c.cos, i), &table_row(&c.sin, i));
            let mut scores = Vec::with_capacity(i + 1);
            for j in 0..=i {
                let k = rope_oracle(&head_vec(&c.k, j, kv, d), &table_row(&c.cos, j), &table_row(&c.sin, j));
                let mut dot = 0.0;
                for m in 0..d {
                    dot += q[m] * k[m];
                }
                scores.push(c.alpha * dot);
            }
            let mut max = f64::NEG_INFINITY;
            for &s in &scores {
                if s > max {
                    max = s;
                }
            }
            let mut denom = 0.0;
            for &s in &scores {
                denom += (s - max).exp();
            }
            for j in 0..=i {
                out[h][i][j] = (scores[j] - max).exp() / denom;
            }
        }
    }
    out
}

/// Head-mean of the last row, sliced to the image span, as row-major G×G.
pub fn image_grid_oracle(c: &AttentionCapture) -> Vec<Vec<f64>> {
    let dense = dense_attention_oracle(c);
    let last = c.q.nrows() - 1;
    let g = c.grid_side;
    let mut grid = vec![vec![0.0; g]; g];
    for r in 0..g {
        for col in 0..g {
            let tok = c.image_span.start + r * g + col;
            let mut s = 0.0;
            for head in &dense {
                s += head[last][tok];
            }
            grid[r][col] = s / c.n_heads as f64;
        }
    }
    grid
}

/// Background cells reachable from the border, found by repeated sweeps
/// until nothing changes; everything else is foreground.
pub fn hole_fill_oracle(mask: &Array2<u8>) -> Array2<u8> {
    let (h, w) = mask.dim();
    let mut outside = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            if mask[[i, j]] == 0 && (i == 0 || j == 0 || i == h - 1 || j == w - 1) {
                outside[[i, j]] = true;
            }
        }
    }
    loop {
        let mut changed = false;
        for i in 0..h {
            for j in 0..w {
                if mask[[i, j]] != 0 || outside[[i, j]] {
                    continue;
                }
                let near = (i > 0 && outside[[i - 1, j]])
                    || (i + 1 < h && outside[[i + 1, j]])
                    || (j > 0 && outside[[i, j - 1]])
                    || (j + 1 < w && outside[[i, j + 1]]);
                if near {
                    outside[[i, j]] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    outside.mapv(|o| u8::from(!o))
}

/// Random blob mask: a few filled discs and rings on a white field.
pub fn random_blob_mask(seed: u64, h: usize, w: usize) -> Array2<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Array2::zeros((h, w));
    for _ in 0..rng.random_range(1..5) {
        let (cy, cx) = (rng.random_range(0..h) as f64, rng.random_range(0..w) as f64);
        let r_out = rng.random_range(1.5..5.0f64);
        let r_in = if rng.random_bool(0.5) { r_out - 1.2 } else { 0.0 };
        for i in 0..h {
            for j in 0..w {
                let d = ((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt();
                if d <= r_out && d >= r_in {
                    m[[i, j]] = 1;
                }
            }
        }
    }
    for _ in 0..rng.random_range(0..20) {
        m[[rng.random_range(0..h), rng.random_range(0..w)]] = 1;
    }
    m
}

/// Block-wise grounding score: each grid cell covers an `H/G × W/G`
/// block, so the score is Σ_cells value·(foreground pixels in block) / Σ F.
/// Requires `G` to divide both image sides.
pub fn block_score_oracle(normalized: &[Vec<f64>], image: &RgbImage, threshold: u8) -> f64 {
    let g = normalized.len();
    let (w, h) = image.dimensions();
    let (bh, bw) = (h as usize / g, w as usize / g);
    let mut mass = 0.0;
    let mut area = 0usize;
    for r in 0..g {
        for c in 0..g {
            let mut fg = 0usize;
            for y in r * bh..(r + 1) * bh {
                for x in c * bw..(c + 1) * bw {
                    let p = image.get_pixel(x as u32, y as u32).0;
                    if p[0] < threshold || p[1] < threshold || p[2] < threshold {
                        fg += 1;
                    }
                }
            }
            mass += normalized[r][c] * fg as f64;
            area += fg;
        }
    }
    if area == 0 {
        0.0
    } else {
        mass / area as f64
    }
}

pub fn minmax_oracle(grid: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let flat: Vec<f64> = grid.iter().flatten().copied().collect();
    let lo = flat.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = flat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-12 * hi.abs().max(1.0) {
        return grid.iter().map(|r| vec![0.0; r.len()]).collect();
    }
    grid.iter()
        .map(|r| r.iter().map(|v| (v - lo) / (hi - lo)).collect())
        .collect()
}

/// 4×4-grid / 16×16-image fixture: the last token attends sharply to image
/// token `(1, 2)`; the image has a dark square covering that block plus a
/// few stray pixels elsewhere.
pub fn asm_fixture() -> (AttentionCapture, RgbImage) {
    let g = 4;
    let t = 2 + g * g + 2;
    let d = 4;
    let mut q = Array2::zeros((t, d));
    let mut k = Array2::zeros((t, d));
    let cos = Array2::ones((t, d));
    let sin = Array2::zeros((t, d));
    let target = 2 + g + 2;
    q[[t - 1, 0]] = 3.0;
    k[[target, 0]] = 2.0;
    q[[t - 1, 1]] = 1.0;
    for (i, tok) in (2..2 + g * g).enumerate() {
        k[[tok, 1]] = 0.1 * i as f32;
    }
    let capture = AttentionCapture {
        q,
        k,
        cos,
        sin,
        n_heads: 1,
        n_kv_heads: 1,
        head_dim: d,
        alpha: 0.5,
        image_span: 2..2 + g * g,
        grid_side: g,
        generated: t - 1..t,
        image_size: Some((16, 16)),
    };
    let mut img = RgbImage::from_pixel(16, 16, image::Rgb([255, 255, 255]));
    for y in 4..8 {
        for x in 8..12 {
            img.put_pixel(x, y, image::Rgb([20, 40, 200]));
        }
    }
    for (x, y) in [(0, 0), (15, 3), (2, 13), (9, 14)] {
        img.put_pixel(x, y, image::Rgb([100, 240, 240]));
    }
    (capture, img)
}

/// Mean and population standard deviation, written out long-hand.
pub fn advantages_oracle(rewards: &[f64], eps: f64) -> Vec<f64> {
    let mut sum = 0.0;
    for r in rewards {
        sum += r;
    }
    let mean = sum / rewards.len() as f64;
    let mut sq = 0.0;
    for r in rewards {
        sq += (r - mean) * (r - mean);
    }
    let std = (sq / rewards.len() as f64).sqrt();
    let mut out = Vec::new();
    for r in rewards {
        out.push(if std <= eps { 0.0 } else { (r - mean) / std });
    }
    out
}

/// Random toy policy and a fixed group sampled from it, with random
/// rewards and a perturbed reference.
pub fn random_toy_setup(
    seed: u64,
) -> (
    phyreward::grpo::toy::ToyPolicy,
    phyreward::grpo::toy::ToyPolicy,
    Vec<phyreward::grpo::toy::ToySample>,
    Vec<f64>,
) {
    use phyreward::grpo::toy::ToyPolicy;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab: Vec<String> = (0..rng.random_range(1..4)).map(|i| format!("s{i}")).collect();
    let len = rng.random_range(1..4);
    let mut policy = ToyPolicy::uniform(vocab, 2, len).unwrap();
    let mut reference = policy.clone();
    for v in policy.logits_mut().iter_mut() {
        *v = rng.random_range(-1.5..1.5);
    }
    for v in policy.shared_mut().iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    for v in reference.logits_mut().iter_mut() {
        *v = rng.random_range(-1.5..1.5);
    }
    let g = rng.random_range(2..9);
    let samples = policy.sample_group(1, g, rng.random());
    let rewards = (0..g).map(|_| rng.random_range(0.0..2.0)).collect();
    (policy, reference, samples, rewards)
}

/// Train-split sizes per domain as published for the benchmark.
pub const TRAIN_SPLIT: [(&str, usize); 6] = [
    ("Electromagnetism", 550),
    ("Mechanics", 550),
    ("Modern Physics", 400),
    ("Optics", 500),
    ("Thermodynamics", 500),
    ("Waves/Acoustics", 500),
];

/// JSON lines mirroring the train split, interleaving domains and mixing
/// MCQ and open-ended rows.
pub fn train_split_jsonl() -> String {
    let mut remaining: Vec<(&str, usize)> = TRAIN_SPLIT.to_vec();
    let mut out = String::new();
    let mut n = 0usize;
    while remaining.iter().any(|r| r.1 > 0) {
        for (domain, left) in remaining.iter_mut().filter(|r| r.1 > 0) {
            *left -= 1;
            let row = if n % 3 == 0 {
                serde_json::json!({
                    "id": format!("train-{n:05}"), "question": "Find the unknown quantity.",
                    "image_path": format!("images/{n:05}.png"), "format": "OE",
                    "answer": "12 N", "unit": "N", "domain": domain, "subfield": "General",
                })
            } else {
                let letter = ["A", "B", "C", "D"][n % 4];
                serde_json::json!({
                    "id": format!("train-{n:05}"), "question": "Which option holds?",
                    "options": ["A. 1", "B. 2", "C. 3", "D. 4"],
                    "image_path": format!("images/{n:05}.png"), "format": "MCQ",
                    "answer": letter, "domain": domain, "subfield": "General",
                    "reasoning_type": "Numerical",
                })
            };
            out.push_str(&row.to_string());
            out.push('\n');
            n += 1;
        }
    }
    out
}

pub fn fixture(rel: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

/// Hand-computed expectations for the ten-case eval fixture.
#[derive(serde::Deserialize)]
pub struct Scorecard {
    pub records: std::collections::BTreeMap<String, ExpectedRecord>,
    pub overall: ExpectedCell,
    pub domains: std::collections::BTreeMap<String, ExpectedCell>,
    pub reasoning_types: std::collections::BTreeMap<String, ExpectedCell>,
    pub answer_row: String,
}

#[derive(serde::Deserialize, Debug, PartialEq)]
pub struct ExpectedRecord {
    pub answer: u8,
    pub unit: Option<u8>,
    pub principle: Option<u8>,
}

#[derive(serde::Deserialize, Debug, PartialEq)]
pub struct ExpectedCell {
    pub answer: (usize, usize),
    pub unit: Option<(usize, usize)>,
    pub principle: Option<(usize, usize)>,
}

pub fn load_scorecard() -> Scorecard {
    serde_json::from_str(&std::fs::read_to_string(fixture("eval/scorecard.json")).unwrap()).unwrap()
}

/// Compares a report against the scorecard, returning the first mismatch.
pub fn check_report(report: &phyreward::eval::Report, card: &Scorecard) -> Result<(), String> {
    use phyreward::eval::{Cell, Score};
    let pair = |s: &Score| (s.correct, s.total);
    let as_expected = |c: &Cell| ExpectedCell {
        answer: pair(&c.answer),
        unit: c.unit.as_ref().map(pair),
        principle: c.principle.as_ref().map(pair),
    };
    if as_expected(&report.overall) != card.overall {
        return Err(format!("overall: {:?} vs {:?}", as_expected(&report.overall), card.overall));
    }
    let domains: std::collections::BTreeMap<String, ExpectedCell> =
        report.domains.iter().map(|n| (n.name.clone(), as_expected(&n.value))).collect();
    if domains != card.domains {
        return Err(format!("domains: {domains:?} vs {:?}", card.domains));
    }
    let types: std::collections::BTreeMap<String, ExpectedCell> =
        report.reasoning_types.iter().map(|n| (n.name.clone(), as_expected(&n.value))).collect();
    if types != card.reasoning_types {
        return Err(format!("reasoning types: {types:?} vs {:?}", card.reasoning_types));
    }
    let table = report.to_table();
    let row = table.lines().find(|l| l.starts_with("answer")).unwrap_or("");
    let row: Vec<&str> = row.split_whitespace().skip(1).collect();
    let want: Vec<&str> = card.answer_row.split_whitespace().collect();
    if row != want {
        return Err(format!("answer row {row:?} vs {want:?}"));
    }
    Ok(())
}

pub fn check_records(records: &[phyreward::eval::EvalRecord], card: &Scorecard) -> Result<(), String> {
    if records.len() != card.records.len() {
        return Err(format!("{} records vs {}", records.len(), card.records.len()));
    }
    for r in records {
        let got = ExpectedRecord {
            answer: r.answer_correct,
            unit: r.unit_correct,
            principle: r.principle_correct,
        };
        match card.records.get(&r.problem_id) {
            Some(want) if *want == got => {}
            want => return Err(format!("{}: got {got:?}, want {want:?}", r.problem_id)),
        }
    }
    Ok(())
}
