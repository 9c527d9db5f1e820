//! Threshold sweeps, precision/recall, F-measure and MAE.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

/// Number of binarisation thresholds, levels `0..=255`.
pub const THRESHOLDS: usize = 256;

/// Quantised level of a saliency value: the largest `t` with `s * 255 >= t`.
/// A tiny tolerance absorbs round-off on values decoded from 8-bit images.
pub fn level_of(s: f64) -> usize {
    (s * 255.0 + 1e-9).floor().clamp(0.0, 255.0) as usize
}

pub(crate) fn check_shapes<A, B>(s: &ArrayView2<A>, g: &ArrayView2<B>) {
    assert_eq!(
        s.dim(),
        g.dim(),
        "prediction and ground truth must have the same shape"
    );
}

/// Pixel counts at every threshold: `pred_pos[t] = |S'_t|`, `true_pos[t] = |S'_t ∩ G|`.
#[derive(Debug, Clone)]
pub(crate) struct SweepCounts {
    pub true_pos: [u64; THRESHOLDS],
    pub pred_pos: [u64; THRESHOLDS],
    pub gt_pos: u64,
    pub total: u64,
}

pub(crate) fn sweep_counts(s: ArrayView2<f64>, g: ArrayView2<bool>) -> SweepCounts {
    check_shapes(&s, &g);
    let mut fg_hist = [0u64; THRESHOLDS];
    let mut bg_hist = [0u64; THRESHOLDS];
    for (&v, &inside) in s.iter().zip(g.iter()) {
        let l = level_of(v);
        if inside {
            fg_hist[l] += 1;
        } else {
            bg_hist[l] += 1;
        }
    }
    let mut out = SweepCounts {
        true_pos: [0; THRESHOLDS],
        pred_pos: [0; THRESHOLDS],
        gt_pos: fg_hist.iter().sum(),
        total: s.len() as u64,
    };
    let (mut tp, mut pp) = (0u64, 0u64);
    for t in (0..THRESHOLDS).rev() {
        tp += fg_hist[t];
        pp += fg_hist[t] + bg_hist[t];
        out.true_pos[t] = tp;
        out.pred_pos[t] = pp;
    }
    out
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(P, R)` of `S' = {s * 255 >= threshold}` against `g`; `None` when `g` is
/// empty. An empty `S'` has precision 0.
pub fn precision_recall(s: ArrayView2<f64>, g: ArrayView2<bool>, threshold: usize) -> Option<(f64, f64)> {
    check_shapes(&s, &g);
    let (mut tp, mut pp, mut gp) = (0u64, 0u64, 0u64);
    for (&v, &inside) in s.iter().zip(g.iter()) {
        let on = level_of(v) >= threshold;
        pp += on as u64;
        gp += inside as u64;
        tp += (on && inside) as u64;
    }
    if gp == 0 {
        return None;
    }
    Some((ratio(tp, pp), ratio(tp, gp)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<u8>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl PrCurve {
    pub fn f_measure(&self, beta_sq: f64) -> Vec<f64> {
        self.precision
            .iter()
            .zip(&self.recall)
            .map(|(&p, &r)| f_measure(p, r, beta_sq))
            .collect()
    }
}

/// Precision and recall at all 256 thresholds; `None` for an empty `g`.
pub fn pr_curve(s: ArrayView2<f64>, g: ArrayView2<bool>) -> Option<PrCurve> {
    let c = sweep_counts(s, g);
    if c.gt_pos == 0 {
        return None;
    }
    Some(PrCurve {
        thresholds: (0..=255).collect(),
        precision: (0..THRESHOLDS).map(|t| ratio(c.true_pos[t], c.pred_pos[t])).collect(),
        recall: (0..THRESHOLDS).map(|t| ratio(c.true_pos[t], c.gt_pos)).collect(),
    })
}

/// `(1 + β²) P R / (β² P + R)`, 0 when `P = R = 0`.
pub fn f_measure(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let den = beta_sq * precision + recall;
    if den <= 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / den
    }
}

/// `round(min(2 * mean(s), 1) * 255)`.
pub fn adaptive_threshold(s: ArrayView2<f64>) -> usize {
    let mean = s.mean().unwrap_or(0.0);
    ((2.0 * mean).min(1.0) * 255.0).round() as usize
}

pub fn mae(s: ArrayView2<f64>, g: ArrayView2<bool>) -> f64 {
    check_shapes(&s, &g);
    let sum: f64 = s
        .iter()
        .zip(g.iter())
        .map(|(&v, &inside)| (v - if inside { 1.0 } else { 0.0 }).abs())
        .sum();
    sum / s.len() as f64
}
