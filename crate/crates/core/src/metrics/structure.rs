//! Structure measure: object-aware and region-aware structural similarity.

use ndarray::{s, ArrayView2};

use super::pr::check_shapes;

const EPS: f64 = f64::EPSILON;

/// `α S_o + (1 - α) S_r`, floored at 0. An empty ground truth scores
/// `1 - mean(s)`, a full one `mean(s)`.
pub fn s_measure(s: ArrayView2<f64>, g: ArrayView2<bool>, alpha: f64) -> f64 {
    check_shapes(&s, &g);
    let n = s.len();
    let fg = g.iter().filter(|&&b| b).count();
    let mean = s.mean().unwrap_or(0.0);
    if fg == 0 {
        return 1.0 - mean;
    }
    if fg == n {
        return mean;
    }
    let score = alpha * object_score(s, g, fg as f64 / n as f64) + (1.0 - alpha) * region_score(s, g);
    score.max(0.0)
}

fn object_score(s: ArrayView2<f64>, g: ArrayView2<bool>, fg_ratio: f64) -> f64 {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (&v, &inside) in s.iter().zip(g.iter()) {
        if inside {
            fg.push(v);
        } else {
            bg.push(1.0 - v);
        }
    }
    fg_ratio * object_similarity(&fg) + (1.0 - fg_ratio) * object_similarity(&bg)
}

fn object_similarity(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = if x.len() > 1 {
        (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * mean / (mean * mean + 1.0 + std + EPS)
}

fn region_score(s: ArrayView2<f64>, g: ArrayView2<bool>) -> f64 {
    let (h, w) = g.dim();
    let area = (h * w) as f64;
    let (cy, cx) = split_point(g);
    let w_lt = (cx * cy) as f64 / area;
    let w_rt = (cy * (w - cx)) as f64 / area;
    let w_lb = ((h - cy) * cx) as f64 / area;
    let w_rb = 1.0 - w_lt - w_rt - w_lb;
    let quads = [
        (s.slice(s![..cy, ..cx]), g.slice(s![..cy, ..cx]), w_lt),
        (s.slice(s![..cy, cx..]), g.slice(s![..cy, cx..]), w_rt),
        (s.slice(s![cy.., ..cx]), g.slice(s![cy.., ..cx]), w_lb),
        (s.slice(s![cy.., cx..]), g.slice(s![cy.., cx..]), w_rb),
    ];
    quads
        .iter()
        .map(|(ps, gs, weight)| if ps.is_empty() { 0.0 } else { block_ssim(*ps, *gs) * weight })
        .sum()
}

/// Row/column at which the map is split: the foreground centroid rounded
/// half-to-even, plus one (so the centroid pixel lands in the top-left block).
fn split_point(g: ArrayView2<bool>) -> (usize, usize) {
    let (h, w) = g.dim();
    let (mut sy, mut sx, mut count) = (0.0f64, 0.0f64, 0usize);
    for ((y, x), &inside) in g.indexed_iter() {
        if inside {
            sy += y as f64;
            sx += x as f64;
            count += 1;
        }
    }
    let (cy, cx) = if count == 0 {
        ((h as f64 / 2.0).round_ties_even(), (w as f64 / 2.0).round_ties_even())
    } else {
        (
            (sy / count as f64).round_ties_even(),
            (sx / count as f64).round_ties_even(),
        )
    };
    ((cy as usize + 1).min(h), (cx as usize + 1).min(w))
}

fn block_ssim(p: ArrayView2<f64>, g: ArrayView2<bool>) -> f64 {
    let n = p.len() as f64;
    let gv = |b: bool| if b { 1.0 } else { 0.0 };
    let x = p.sum() / n;
    let y = g.iter().map(|&b| gv(b)).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&pv, &b) in p.iter().zip(g.iter()) {
        let dx = pv - x;
        let dy = gv(b) - y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let den = n - 1.0 + EPS;
    let (sigma_x, sigma_y, sigma_xy) = (sxx / den, syy / den, sxy / den);
    let alpha = 4.0 * x * y * sigma_xy;
    let beta = (x * x + y * y) * (sigma_x + sigma_y);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn empty_and_full_gt_conventions() {
        let s = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f64 / 16.0);
        let mean = s.mean().unwrap();
        let empty = Array2::from_elem((4, 4), false);
        let full = Array2::from_elem((4, 4), true);
        assert!((s_measure(s.view(), empty.view(), 0.5) - (1.0 - mean)).abs() < 1e-15);
        assert!((s_measure(s.view(), full.view(), 0.5) - mean).abs() < 1e-15);
    }

    #[test]
    fn exact_binary_prediction_scores_one() {
        let g = Array2::from_shape_fn((9, 7), |(y, x)| (2..6).contains(&y) && (1..4).contains(&x));
        let s = g.mapv(|b| if b { 1.0 } else { 0.0 });
        assert!((s_measure(s.view(), g.view(), 0.5) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn centroid_in_last_column_leaves_empty_blocks_finite() {
        let g = Array2::from_shape_fn((5, 5), |(_, x)| x == 4);
        let s = Array2::from_elem((5, 5), 0.3);
        let v = s_measure(s.view(), g.view(), 0.5);
        assert!(v.is_finite() && (0.0..=1.0).contains(&v));
    }
}
