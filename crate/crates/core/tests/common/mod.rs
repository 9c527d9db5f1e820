//! Helpers shared by the integration tests: pixel-loop metric oracles,
//! seeded synthetic pairs and small-model fixtures.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A prediction stored as 8-bit levels, and its binary ground truth.
#[derive(Debug, Clone)]
pub struct Pair {
    pub id: String,
    pub levels: Array2<u8>,
    pub gt: Array2<bool>,
}

impl Pair {
    pub fn pred(&self) -> Array2<f64> {
        self.levels.mapv(|q| q as f64 / 255.0)
    }
}

/// 25 seeded pairs from 2x2 up to 64x64, including an all-background and an
/// all-foreground ground truth, an all-zero prediction and an exact match.
pub fn synthetic_pairs() -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut out = Vec::new();
    for i in 0..25 {
        let side = |rng: &mut ChaCha8Rng| {
            if i < 3 {
                2 + i
            } else if i == 24 {
                64
            } else {
                rng.random_range(2..=64)
            }
        };
        let h = side(&mut rng);
        let w = side(&mut rng);
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let (ry, rx) = (rng.random_range(0.5..h as f64), rng.random_range(0.5..w as f64));
        let gt = match i {
            3 => Array2::from_elem((h, w), false),
            4 => Array2::from_elem((h, w), true),
            _ => Array2::from_shape_fn((h, w), |(y, x)| {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }),
        };
        let levels = match i {
            5 => Array2::zeros((h, w)),
            6 => gt.mapv(|b| if b { 255 } else { 0 }),
            _ => {
                let noise = rng.random_range(0.1..0.9);
                gt.mapv(|b| {
                    let base = if b { 0.7 } else { 0.15 };
                    let v: f64 = base + noise * rng.random_range(-0.5..0.5);
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                })
            }
        };
        out.push(Pair {
            id: format!("pair_{i:02}"),
            levels,
            gt,
        });
    }
    out
}

/// `(P, R)` at `threshold` by direct set counting; `None` for an empty truth.
pub fn pr_oracle(levels: &Array2<u8>, gt: &Array2<bool>, threshold: usize) -> Option<(f64, f64)> {
    let mut predicted = 0usize;
    let mut relevant = 0usize;
    let mut hit = 0usize;
    for y in 0..gt.nrows() {
        for x in 0..gt.ncols() {
            let on = levels[[y, x]] as usize >= threshold;
            if on {
                predicted += 1;
            }
            if gt[[y, x]] {
                relevant += 1;
                if on {
                    hit += 1;
                }
            }
        }
    }
    if relevant == 0 {
        return None;
    }
    let p = if predicted == 0 { 0.0 } else { hit as f64 / predicted as f64 };
    Some((p, hit as f64 / relevant as f64))
}

pub fn f_oracle(p: f64, r: f64, beta_sq: f64) -> f64 {
    if p == 0.0 && r == 0.0 {
        return 0.0;
    }
    (1.0 + beta_sq) * p * r / (beta_sq * p + r)
}

pub fn mae_oracle(levels: &Array2<u8>, gt: &Array2<bool>) -> f64 {
    let mut total = 0.0;
    for y in 0..gt.nrows() {
        for x in 0..gt.ncols() {
            let s = levels[[y, x]] as f64 / 255.0;
            let g = if gt[[y, x]] { 1.0 } else { 0.0 };
            total += (s - g).abs();
        }
    }
    total / gt.len() as f64
}

/// Level of `min(2 * mean, 1)`, rounded.
pub fn adaptive_level_oracle(levels: &Array2<u8>) -> usize {
    let mean = levels.iter().map(|&q| q as f64 / 255.0).sum::<f64>() / levels.len() as f64;
    ((2.0 * mean).min(1.0) * 255.0).round() as usize
}

/// Enhanced alignment at one threshold, evaluated pixel by pixel.
pub fn e_oracle(levels: &Array2<u8>, gt: &Array2<bool>, threshold: usize) -> f64 {
    let n = gt.len() as f64;
    let bin: Vec<f64> = levels.iter().map(|&q| if q as usize >= threshold { 1.0 } else { 0.0 }).collect();
    let g: Vec<f64> = gt.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let g_sum: f64 = g.iter().sum();
    if g_sum == 0.0 {
        return bin.iter().map(|s| 1.0 - s).sum::<f64>() / n;
    }
    if g_sum == n {
        return bin.iter().sum::<f64>() / n;
    }
    let ms = bin.iter().sum::<f64>() / n;
    let mg = g_sum / n;
    let mut acc = 0.0;
    for (s, g) in bin.iter().zip(&g) {
        let (a, b) = (s - ms, g - mg);
        let xi = 2.0 * a * b / (a * a + b * b + 1e-8);
        acc += (1.0 + xi) * (1.0 + xi) / 4.0;
    }
    acc / n
}

/// Structure measure written from the published definition, row-vector style.
pub fn s_oracle(pred: &Array2<f64>, gt: &Array2<bool>, alpha: f64) -> f64 {
    let eps = f64::EPSILON;
    let (h, w) = gt.dim();
    let rows_p: Vec<Vec<f64>> = (0..h).map(|y| (0..w).map(|x| pred[[y, x]]).collect()).collect();
    let rows_g: Vec<Vec<f64>> = (0..h).map(|y| (0..w).map(|x| if gt[[y, x]] { 1.0 } else { 0.0 }).collect()).collect();
    let n = (h * w) as f64;
    let gy: f64 = rows_g.iter().flatten().sum::<f64>() / n;
    if gy == 0.0 {
        return 1.0 - rows_p.iter().flatten().sum::<f64>() / n;
    }
    if gy == 1.0 {
        return rows_p.iter().flatten().sum::<f64>() / n;
    }

    let s_object = |vals: &[f64]| {
        let k = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / k;
        let sd = if vals.len() > 1 {
            (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (k - 1.0)).sqrt()
        } else {
            0.0
        };
        2.0 * m / (m * m + 1.0 + sd + eps)
    };
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if rows_g[y][x] == 1.0 {
                fg.push(rows_p[y][x]);
            } else {
                bg.push(1.0 - rows_p[y][x]);
            }
        }
    }
    let object = gy * s_object(&fg) + (1.0 - gy) * s_object(&bg);

    // Centroid by column and row sums, rounded half to even, plus one.
    let area: f64 = rows_g.iter().flatten().sum();
    let col_sum: f64 = (0..w).map(|x| x as f64 * (0..h).map(|y| rows_g[y][x]).sum::<f64>()).sum();
    let row_sum: f64 = (0..h).map(|y| y as f64 * rows_g[y].iter().sum::<f64>()).sum();
    let cx = ((col_sum / area).round_ties_even() as usize + 1).min(w);
    let cy = ((row_sum / area).round_ties_even() as usize + 1).min(h);

    let ssim = |y0: usize, y1: usize, x0: usize, x1: usize| -> f64 {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                p.push(rows_p[y][x]);
                g.push(rows_g[y][x]);
            }
        }
        if p.is_empty() {
            return 0.0;
        }
        let k = p.len() as f64;
        let mx = p.iter().sum::<f64>() / k;
        let my = g.iter().sum::<f64>() / k;
        let vx = p.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / (k - 1.0 + eps);
        let vy = g.iter().map(|v| (v - my).powi(2)).sum::<f64>() / (k - 1.0 + eps);
        let cxy = p.iter().zip(&g).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (k - 1.0 + eps);
        let a = 4.0 * mx * my * cxy;
        let b = (mx * mx + my * my) * (vx + vy);
        if a != 0.0 {
            a / (b + eps)
        } else if b == 0.0 {
            1.0
        } else {
            0.0
        }
    };
    let total = n;
    let w1 = (cx * cy) as f64 / total;
    let w2 = ((w - cx) * cy) as f64 / total;
    let w3 = (cx * (h - cy)) as f64 / total;
    let w4 = 1.0 - w1 - w2 - w3;
    let region = w1 * ssim(0, cy, 0, cx) + w2 * ssim(0, cy, cx, w) + w3 * ssim(cy, h, 0, cx) + w4 * ssim(cy, h, cx, w);
    (alpha * object + (1.0 - alpha) * region).max(0.0)
}

/// Writes `count` synthetic scenes of `size` under `root` and loads them.
pub fn toy_dataset(root: &std::path::Path, count: usize, size: (usize, usize), seed: u64) -> msirn::data::DatasetManifest {
    msirn::synth::write_dataset(root, msirn::synth::SynthSpec { count, size, seed }).unwrap();
    let (manifest, issues) = msirn::data::load_manifest(root, &msirn::data::Layout::default()).unwrap();
    assert!(issues.is_empty(), "{issues:?}");
    manifest
}

/// A width-0.125 model at 96x96 with batch 2, cheap enough for a few steps.
pub fn toy_run(max_steps: usize) -> msirn::RunConfig {
    let mut run = msirn::RunConfig::default();
    run.model = msirn::ModelConfig::default().with_width_scale(0.125);
    run.model.input_size = [96, 96];
    run.train.batch_size = 2;
    run.train.epochs = 100;
    run.train.max_steps = Some(max_steps);
    run.train.lr = 1e-3;
    run
}

/// Largest relative step-wise difference between two loss logs.
pub fn max_relative_gap(a: &[msirn::train::StepRecord], b: &[msirn::train::StepRecord]) -> f64 {
    assert_eq!(a.len(), b.len(), "log lengths differ");
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            assert_eq!(x.step, y.step);
            assert_eq!(x.ids, y.ids, "step {} saw different samples", x.step);
            (x.loss.total - y.loss.total).abs() / x.loss.total.abs().max(1e-12)
        })
        .fold(0.0, f64::max)
}
