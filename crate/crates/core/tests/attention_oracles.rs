mod common;

use common::*;
use image::{Rgb, RgbImage};
use ndarray::Array2;
use phyreward::attention::*;
use proptest::prelude::*;

#[test]
fn reconstruction_matches_dense_oracle() {
    for seed in 0..200 {
        let c = random_capture(seed);
        let got = reconstruct_attention(&c).unwrap();
        let want = dense_attention_oracle(&c);
        let t = c.q.nrows();
        for h in 0..c.n_heads {
            for i in 0..t {
                let mut row_sum = 0.0;
                for j in 0..t {
                    assert!(
                        (got[[h, i, j]] - want[h][i][j]).abs() < 1e-5,
                        "seed {seed} h {h} ({i},{j})"
                    );
                    if j > i {
                        assert_eq!(got[[h, i, j]], 0.0);
                    }
                    row_sum += got[[h, i, j]];
                }
                assert!((row_sum - 1.0).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn gqa_reconstruction_example() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
    let c = capture_with(&mut rng, 5, 2, 1, 4, 2);
    let got = reconstruct_attention(&c).unwrap();
    let want = dense_attention_oracle(&c);
    for ((h, i, j), v) in got.indexed_iter() {
        assert!((v - want[h][i][j]).abs() < 1e-5);
    }
}

#[test]
fn rope_matches_straight_line_oracle() {
    for seed in 0..100 {
        let c = random_capture(seed);
        let t = c.q.nrows();
        let q = split_heads(&c.q, c.n_heads, c.head_dim).unwrap();
        let k = split_heads(&c.k, c.n_kv_heads, c.head_dim).unwrap();
        let (rq, rk) = apply_rope(&q, &k, &c.cos, &c.sin).unwrap();
        for (heads, rotated) in [(&q, &rq), (&k, &rk)] {
            for h in 0..heads.dim().0 {
                for i in 0..t {
                    let x: Vec<f64> = heads.slice(ndarray::s![h, i, ..]).to_vec();
                    let cos: Vec<f64> = c.cos.row(i).iter().map(|&v| v as f64).collect();
                    let sin: Vec<f64> = c.sin.row(i).iter().map(|&v| v as f64).collect();
                    let want = rope_oracle(&x, &cos, &sin);
                    let got = rotated.slice(ndarray::s![h, i, ..]);
                    let n0: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let n1: f64 = got.iter().map(|v| v * v).sum::<f64>().sqrt();
                    assert!((n0 - n1).abs() < 1e-6, "norm changed at seed {seed}");
                    for (a, b) in got.iter().zip(&want) {
                        assert!((a - b).abs() < 1e-6);
                    }
                }
            }
        }
    }
}

#[test]
fn image_grid_matches_index_oracle() {
    for seed in 0..50 {
        let c = random_capture(seed);
        let a = reconstruct_attention(&c).unwrap();
        let grid = extract_image_attention(&a, &c).unwrap();
        let want = image_grid_oracle(&c);
        for r in 0..c.grid_side {
            for col in 0..c.grid_side {
                assert!((grid.values[[r, col]] - want[r][col]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn resize_three_to_five_matches_index_map() {
    let src = Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64);
    let index = [0usize, 0, 1, 1, 2];
    let out = nearest_resize(&src, 5, 5).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            assert_eq!(out[[i, j]], src[[index[i], index[j]]]);
        }
    }
}

#[test]
fn asm_fixture_matches_pixel_oracle() {
    let (capture, img) = asm_fixture();
    let scores = attn_reward_for_rollout(std::slice::from_ref(&capture), &img, GroundingOptions::default()).unwrap();
    let want = block_score_oracle(&minmax_oracle(&image_grid_oracle(&capture)), &img, 230);
    assert!((scores.per_token[0] - want).abs() < 1e-6, "{} vs {want}", scores.per_token[0]);
    assert!((scores.asm - want).abs() < 1e-6);
    assert!(scores.asm > 0.5);

    let white = RgbImage::from_pixel(16, 16, Rgb([255, 255, 255]));
    assert_eq!(attn_reward_for_rollout(&[capture], &white, GroundingOptions::default()).unwrap().asm, 0.0);
}

#[test]
fn ring_fixture_fills_hole() {
    let mut img = RgbImage::from_pixel(9, 9, Rgb([255, 255, 255]));
    for i in 2..7 {
        for j in 2..7 {
            if i == 2 || i == 6 || j == 2 || j == 6 {
                img.put_pixel(j, i, Rgb([0, 0, 0]));
            }
        }
    }
    let raw = foreground_mask(&img, DEFAULT_WHITE_THRESHOLD);
    assert_eq!(raw.area(), 16);
    let filled = fill_whitespace(&raw);
    assert_eq!(filled.area(), 25);
    assert_eq!(filled.mask[[4, 4]], 1);
    assert_eq!(filled.mask[[0, 0]], 0);
}

fn as_mask(m: Array2<u8>) -> ForegroundMask {
    ForegroundMask {
        mask: m,
        white_threshold: DEFAULT_WHITE_THRESHOLD,
        whitespace_filled: false,
    }
}

#[test]
fn hole_fill_matches_sweep_oracle() {
    for seed in 0..50 {
        let m = random_blob_mask(seed, 20, 24);
        let filled = fill_whitespace(&as_mask(m.clone()));
        assert_eq!(filled.mask, hole_fill_oracle(&m), "seed {seed}");
        assert_eq!(fill_whitespace(&filled).mask, filled.mask);
        assert!(filled.area() >= m.iter().map(|&v| v as usize).sum());
    }
}

proptest! {
    #[test]
    fn scores_stay_in_unit_interval(seed in 0u64..10_000, px in proptest::collection::vec(any::<u8>(), 64 * 3)) {
        let mut c = random_capture(seed);
        let t = c.q.nrows();
        c.generated = 0..t;
        let img = RgbImage::from_fn(8, 8, |x, y| {
            let o = ((y * 8 + x) * 3) as usize;
            Rgb([px[o], px[o + 1], px[o + 2]])
        });
        let s = attn_reward_for_rollout(&[c], &img, GroundingOptions::default()).unwrap();
        prop_assert_eq!(s.per_token.len(), t);
        for v in &s.per_token {
            prop_assert!((0.0..=1.0).contains(v));
        }
        prop_assert!((0.0..=1.0).contains(&s.asm));
        prop_assert!(s.entropy >= 0.0 && s.entropy <= 64f64.ln() + 1e-12);
    }

    #[test]
    fn resize_preserves_value_set(g in 1usize..5, h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let src = Array2::from_shape_fn((g, g), |(i, j)| ((seed >> ((i * g + j) % 60)) & 0xff) as f64);
        let out = nearest_resize(&src, h, w).unwrap();
        for v in out.iter() {
            prop_assert!(src.iter().any(|s| s == v));
        }
    }

    #[test]
    fn entropy_within_bounds(vals in proptest::collection::vec(0.0f64..5.0, 12)) {
        let m = Array2::from_shape_vec((3, 4), vals).unwrap();
        let h = attention_entropy(&[m]).unwrap();
        prop_assert!(h >= 0.0 && h <= 12f64.ln() + 1e-12);
    }
}

#[test]
fn zero_rotation_is_identity() {
    for seed in 0..100 {
        let c = random_capture(seed);
        let q = split_heads(&c.q, c.n_heads, c.head_dim).unwrap();
        let t = c.q.nrows();
        let (rq, _) = apply_rope(&q, &q, &Array2::ones((t, c.head_dim)), &Array2::zeros((t, c.head_dim))).unwrap();
        assert_eq!(rq, q);
    }
}
