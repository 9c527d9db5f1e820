//! Per-image scoring, dataset aggregation and report writers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::alignment::{e_curve, e_measure_at};
use super::pr::{adaptive_threshold, f_measure, mae, pr_curve, precision_recall, PrCurve, THRESHOLDS};
use super::structure::s_measure;
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::resize::resize_plane;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub beta_sq: f64,
    pub alpha: f64,
    pub threshold_count: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            beta_sq: 0.3,
            alpha: 0.5,
            threshold_count: THRESHOLDS,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_sq > 0.0) {
            return Err(Error::InvalidConfig(format!("beta_sq must be positive, got {}", self.beta_sq)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.threshold_count != THRESHOLDS {
            return Err(Error::InvalidConfig(format!(
                "threshold_count is fixed at {THRESHOLDS}, got {}",
                self.threshold_count
            )));
        }
        Ok(())
    }
}

/// Scores of one prediction. F entries are `None` when the ground truth is
/// empty and precision/recall are undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub mae: f64,
    pub f_max: Option<f64>,
    pub f_mean: Option<f64>,
    pub f_adaptive: Option<f64>,
    pub s_measure: f64,
    pub e_max: f64,
    pub e_mean: f64,
    pub e_adaptive: f64,
    pub adaptive_threshold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: MetricConfig,
    pub images: usize,
    pub mae: f64,
    pub f_max: f64,
    pub f_mean: f64,
    pub f_adaptive: f64,
    pub s_measure: f64,
    pub e_max: f64,
    pub e_mean: f64,
    pub e_adaptive: f64,
    /// Mean precision/recall over images with a nonempty ground truth.
    pub curve: PrCurve,
    pub f_curve: Vec<f64>,
    pub e_curve: Vec<f64>,
    pub per_image: Vec<ImageMetrics>,
    pub skipped: Vec<SkippedItem>,
}

struct Scored {
    metrics: ImageMetrics,
    pr: Option<PrCurve>,
    f_curve: Option<Vec<f64>>,
    e_curve: Vec<f64>,
}

fn score(id: &str, s: &Array2<f64>, g: &Array2<bool>, cfg: &MetricConfig) -> Scored {
    let (s, g) = (s.view(), g.view());
    let t_ad = adaptive_threshold(s);
    let pr = pr_curve(s, g);
    let f_curve = pr.as_ref().map(|c| c.f_measure(cfg.beta_sq));
    let f_adaptive = precision_recall(s, g, t_ad).map(|(p, r)| f_measure(p, r, cfg.beta_sq));
    let e = e_curve(s, g);
    let metrics = ImageMetrics {
        id: id.to_string(),
        mae: mae(s, g),
        f_max: f_curve.as_ref().map(|c| max(c)),
        f_mean: f_curve.as_ref().map(|c| mean(c)),
        f_adaptive,
        s_measure: s_measure(s, g, cfg.alpha),
        e_max: max(&e),
        e_mean: mean(&e),
        e_adaptive: e_measure_at(s, g, t_ad),
        adaptive_threshold: t_ad,
    };
    Scored {
        metrics,
        pr,
        f_curve,
        e_curve: e,
    }
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Element-wise mean of equal-length curves, summed in input order.
fn mean_curve<'a>(curves: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut acc = vec![0.0; THRESHOLDS];
    let mut n = 0usize;
    for c in curves {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v;
        }
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    acc
}

/// Scores `(id, prediction, ground truth)` triples in parallel and
/// aggregates in input order.
pub fn evaluate_maps(
    items: &[(String, Array2<f64>, Array2<bool>)],
    cfg: &MetricConfig,
    mut skipped: Vec<SkippedItem>,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::NoMatches {
            pred: PathBuf::new(),
            gt: PathBuf::new(),
        });
    }
    for (id, s, g) in items {
        if s.dim() != g.dim() {
            return Err(Error::Shape(format!(
                "{id}: prediction {:?} vs ground truth {:?}",
                s.dim(),
                g.dim()
            )));
        }
    }
    let scored: Vec<Scored> = items.par_iter().map(|(id, s, g)| score(id, s, g, cfg)).collect();

    for sc in &scored {
        if sc.pr.is_none() {
            skipped.push(SkippedItem {
                id: sc.metrics.id.clone(),
                reason: "empty ground truth: precision/recall undefined, excluded from F aggregates".into(),
            });
        }
    }
    let with_pr: Vec<&Scored> = scored.iter().filter(|s| s.pr.is_some()).collect();
    let f_curve = mean_curve(with_pr.iter().map(|s| s.f_curve.as_deref().unwrap()));
    let curve = PrCurve {
        thresholds: (0..=255).collect(),
        precision: mean_curve(with_pr.iter().map(|s| s.pr.as_ref().unwrap().precision.as_slice())),
        recall: mean_curve(with_pr.iter().map(|s| s.pr.as_ref().unwrap().recall.as_slice())),
    };
    let e_curve = mean_curve(scored.iter().map(|s| s.e_curve.as_slice()));
    let f_max = if with_pr.is_empty() { 0.0 } else { max(&f_curve) };
    drop(with_pr);
    let per_image: Vec<ImageMetrics> = scored.into_iter().map(|s| s.metrics).collect();
    let col = |f: fn(&ImageMetrics) -> f64| mean(&per_image.iter().map(f).collect::<Vec<_>>());
    let opt_col = |f: fn(&ImageMetrics) -> Option<f64>| mean(&per_image.iter().filter_map(f).collect::<Vec<_>>());

    Ok(MetricsReport {
        config: *cfg,
        images: per_image.len(),
        mae: col(|m| m.mae),
        f_max,
        f_mean: opt_col(|m| m.f_mean),
        f_adaptive: opt_col(|m| m.f_adaptive),
        s_measure: col(|m| m.s_measure),
        e_max: max(&e_curve),
        e_mean: col(|m| m.e_mean),
        e_adaptive: col(|m| m.e_adaptive),
        curve,
        f_curve,
        e_curve,
        per_image,
        skipped,
    })
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

/// Files in `dir` with an image extension, keyed by stem.
pub(crate) fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingDir(dir.to_path_buf()));
    }
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !matches!(ext, Some(e) if IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Grayscale map in `[0, 1]`. 8-bit images map `v -> v / 255` exactly.
pub fn load_map(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        image::DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        other => other
            .to_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
    };
    Ok(Array2::from_shape_vec((h, w), data).expect("decoded buffer matches its dimensions"))
}

/// Ground-truth mask: pixels at or above half intensity are foreground.
pub fn load_mask(path: &Path) -> Result<Array2<bool>> {
    Ok(load_map(path)?.mapv(|v| v >= 0.5))
}

/// Bilinear resize of a prediction to the ground-truth size; no-op when
/// the sizes already agree.
pub fn fit_to(pred: Array2<f64>, dim: (usize, usize)) -> Array2<f64> {
    if pred.dim() == dim {
        return pred;
    }
    let p32 = pred.mapv(|v| v as f32);
    resize_plane(p32.view(), dim.0, dim.1).mapv(|v| (v as f64).clamp(0.0, 1.0))
}

/// Scores every prediction in `pred_dir` against the equally named file in
/// `gt_dir`. Unmatched files on either side are reported in `skipped`.
pub fn evaluate_directory(pred_dir: &Path, gt_dir: &Path, cfg: &MetricConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let preds = image_files(pred_dir)?;
    let gts = image_files(gt_dir)?;
    let mut skipped = Vec::new();
    for id in preds.keys().filter(|k| !gts.contains_key(*k)) {
        skipped.push(SkippedItem {
            id: id.clone(),
            reason: "no matching ground truth".into(),
        });
    }
    for id in gts.keys().filter(|k| !preds.contains_key(*k)) {
        skipped.push(SkippedItem {
            id: id.clone(),
            reason: "no matching prediction".into(),
        });
    }
    let pairs: Vec<(&String, &PathBuf, &PathBuf)> = preds
        .iter()
        .filter_map(|(id, p)| gts.get(id).map(|g| (id, p, g)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::NoMatches {
            pred: pred_dir.to_path_buf(),
            gt: gt_dir.to_path_buf(),
        });
    }
    let items = pairs
        .par_iter()
        .map(|(id, p, g)| {
            let gt = load_mask(g)?;
            let pred = fit_to(load_map(p)?, gt.dim());
            Ok(((*id).clone(), pred, gt))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_maps(&items, cfg, skipped)
}

/// Scores `<pred_dir>/<id>.png` against each manifest entry's ground truth.
/// Entries without a prediction are reported in `skipped`.
pub fn evaluate_manifest(pred_dir: &Path, manifest: &DatasetManifest, cfg: &MetricConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let preds = image_files(pred_dir)?;
    let mut skipped = Vec::new();
    let mut pairs = Vec::new();
    for e in &manifest.entries {
        match preds.get(&e.id) {
            Some(p) => pairs.push((e.id.clone(), p.clone(), e.gt.clone())),
            None => skipped.push(SkippedItem {
                id: e.id.clone(),
                reason: "no matching prediction".into(),
            }),
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoMatches {
            pred: pred_dir.to_path_buf(),
            gt: PathBuf::from(&manifest.name),
        });
    }
    let items = pairs
        .par_iter()
        .map(|(id, p, g)| {
            let gt = load_mask(g)?;
            let pred = fit_to(load_map(p)?, gt.dim());
            Ok((id.clone(), pred, gt))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_maps(&items, cfg, skipped)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        crate::config::write_atomic(path, text.as_bytes())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// One row per image followed by a `mean` row holding the aggregates.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = [
            "id",
            "mae",
            "f_max",
            "f_mean",
            "f_adaptive",
            "s_measure",
            "e_max",
            "e_mean",
            "e_adaptive",
        ];
        w.write_record(header)?;
        for m in &self.per_image {
            w.write_record([
                m.id.clone(),
                m.mae.to_string(),
                fmt_opt(m.f_max),
                fmt_opt(m.f_mean),
                fmt_opt(m.f_adaptive),
                m.s_measure.to_string(),
                m.e_max.to_string(),
                m.e_mean.to_string(),
                m.e_adaptive.to_string(),
            ])
            ?;
        }
        w.write_record([
            "mean".to_string(),
            self.mae.to_string(),
            self.f_max.to_string(),
            self.f_mean.to_string(),
            self.f_adaptive.to_string(),
            self.s_measure.to_string(),
            self.e_max.to_string(),
            self.e_mean.to_string(),
            self.e_adaptive.to_string(),
        ])
        ?;
        csv_finish(w)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::config::write_atomic(path, self.to_csv()?.as_bytes())
    }

    /// Threshold, mean precision, mean recall, mean F and mean E per level.
    pub fn curves_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["threshold", "precision", "recall", "f_measure", "e_measure"])
            ?;
        for t in 0..THRESHOLDS {
            w.write_record([
                t.to_string(),
                self.curve.precision[t].to_string(),
                self.curve.recall[t].to_string(),
                self.f_curve[t].to_string(),
                self.e_curve[t].to_string(),
            ])
            ?;
        }
        csv_finish(w)
    }

    /// Writes `report.json`, `report.csv` and `curves.csv` into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_json(&dir.join("report.json"))?;
        self.write_csv(&dir.join("report.csv"))?;
        crate::config::write_atomic(&dir.join("curves.csv"), self.curves_csv()?.as_bytes())
    }
}

pub(crate) fn csv_finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
