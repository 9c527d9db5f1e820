//! Enhanced-alignment measure.
//!
//! For a binarised prediction `S'` the bias-removed maps are
//! `φ_G = G - mean(G)` and `φ_S = S' - mean(S')`; the alignment is
//! `ξ = 2 φ_G φ_S / (φ_G² + φ_S² + ε)` and the score is the pixel mean of
//! `(1 + ξ)² / 4`. Because `S'` and `G` are binary, every pixel falls in one
//! of four (prediction, truth) classes, so the mean is computed from counts.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::pr::{adaptive_threshold, sweep_counts, SweepCounts, THRESHOLDS};

/// Added to the alignment denominator.
pub const ALIGN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EMode {
    Max,
    Mean,
    Adaptive,
}

fn enhanced(phi_s: f64, phi_g: f64) -> f64 {
    let xi = 2.0 * phi_s * phi_g / (phi_s * phi_s + phi_g * phi_g + ALIGN_EPS);
    (1.0 + xi).powi(2) / 4.0
}

fn score_from_counts(true_pos: u64, pred_pos: u64, gt_pos: u64, total: u64) -> f64 {
    let n = total as f64;
    if gt_pos == 0 {
        // Empty truth: the score is the fraction predicted as background.
        return (total - pred_pos) as f64 / n;
    }
    if gt_pos == total {
        return pred_pos as f64 / n;
    }
    let mean_s = pred_pos as f64 / n;
    let mean_g = gt_pos as f64 / n;
    let fg_fg = true_pos;
    let fg_bg = pred_pos - true_pos;
    let bg_fg = gt_pos - true_pos;
    let bg_bg = total - pred_pos - bg_fg;
    let (s1, s0) = (1.0 - mean_s, -mean_s);
    let (g1, g0) = (1.0 - mean_g, -mean_g);
    let sum = fg_fg as f64 * enhanced(s1, g1)
        + fg_bg as f64 * enhanced(s1, g0)
        + bg_fg as f64 * enhanced(s0, g1)
        + bg_bg as f64 * enhanced(s0, g0);
    sum / n
}

fn curve_from(c: &SweepCounts) -> Vec<f64> {
    (0..THRESHOLDS)
        .map(|t| score_from_counts(c.true_pos[t], c.pred_pos[t], c.gt_pos, c.total))
        .collect()
}

/// E-measure at each of the 256 thresholds.
pub fn e_curve(s: ArrayView2<f64>, g: ArrayView2<bool>) -> Vec<f64> {
    curve_from(&sweep_counts(s, g))
}

/// E-measure of `S' = {s * 255 >= threshold}`.
pub fn e_measure_at(s: ArrayView2<f64>, g: ArrayView2<bool>, threshold: usize) -> f64 {
    let c = sweep_counts(s, g);
    let t = threshold.min(THRESHOLDS - 1);
    score_from_counts(c.true_pos[t], c.pred_pos[t], c.gt_pos, c.total)
}

pub fn e_measure(s: ArrayView2<f64>, g: ArrayView2<bool>, mode: EMode) -> f64 {
    match mode {
        EMode::Adaptive => e_measure_at(s, g, adaptive_threshold(s)),
        EMode::Max => e_curve(s, g).into_iter().fold(f64::MIN, f64::max),
        EMode::Mean => e_curve(s, g).iter().sum::<f64>() / THRESHOLDS as f64,
    }
}
