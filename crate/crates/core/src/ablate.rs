//! Ablation and K-sweep orchestration: train each variant, predict every
//! evaluation set, score it and merge the results into summary tables.

use std::path::{Path, PathBuf};

use crate::config::{Ablation, RunConfig};
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_manifest, MetricConfig, MetricsReport};
use crate::model::Msirn;
use crate::predict::predict_manifest;
use crate::train::train;

pub const TABLE_FILE: &str = "table.csv";
pub const VARIANTS_FILE: &str = "variants.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Column label: `full` or `w/o <FLAG>`.
pub fn variant_label(flag: Option<Ablation>) -> String {
    match flag {
        None => "full".into(),
        Some(a) => format!("w/o {a}"),
    }
}

fn variant_slug(flag: Option<Ablation>) -> String {
    match flag {
        None => "full".into(),
        Some(a) => format!("wo_{}", a.as_str().to_ascii_lowercase()),
    }
}

/// One trained model and its reports, one per evaluation set.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub dir: PathBuf,
    pub params: usize,
    pub reports: Vec<(String, MetricsReport)>,
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub flag: Option<Ablation>,
    pub result: RunResult,
}

impl VariantResult {
    pub fn label(&self) -> String {
        variant_label(self.flag)
    }
}

/// Trains `run` into `dir/train`, then predicts and scores each evaluation
/// set under `dir/pred/<set>` and `dir/eval/<set>`.
pub fn train_and_evaluate(
    run: &RunConfig,
    train_set: &DatasetManifest,
    eval_sets: &[DatasetManifest],
    dir: &Path,
    metric: &MetricConfig,
) -> Result<RunResult> {
    let outcome = train(run.clone(), train_set.clone(), &dir.join("train"))?;
    let model = Msirn::load(&outcome.checkpoint, Some(&run.model))?;
    let mut reports = Vec::with_capacity(eval_sets.len());
    for set in eval_sets {
        let pred_dir = dir.join("pred").join(&set.name);
        predict_manifest(&model, set, &pred_dir)?;
        let report = evaluate_manifest(&pred_dir, set, metric)?;
        report.write_all(&dir.join("eval").join(&set.name))?;
        reports.push((set.name.clone(), report));
    }
    Ok(RunResult {
        dir: dir.to_path_buf(),
        params: model.param_count(),
        reports,
    })
}

fn check_eval_sets(eval_sets: &[DatasetManifest]) -> Result<()> {
    if eval_sets.is_empty() {
        return Err(Error::InvalidConfig("at least one evaluation set is required".into()));
    }
    let mut names: Vec<&str> = eval_sets.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidConfig(format!("evaluation set name {:?} appears twice", w[0])));
    }
    Ok(())
}

/// Trains the full model plus one variant per flag (each removing exactly that
/// component), and writes `table.csv` and `variants.csv` into `out_dir`.
pub fn ablate(
    base: &RunConfig,
    flags: &[Ablation],
    train_set: &DatasetManifest,
    eval_sets: &[DatasetManifest],
    out_dir: &Path,
    metric: &MetricConfig,
) -> Result<Vec<VariantResult>> {
    check_eval_sets(eval_sets)?;
    if !base.model.ablations.is_empty() {
        return Err(Error::InvalidConfig(
            "the base configuration of an ablation run must not ablate anything".into(),
        ));
    }
    let mut variants = vec![None];
    for &f in flags {
        if !variants.contains(&Some(f)) {
            variants.push(Some(f));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut results = Vec::with_capacity(variants.len());
    for flag in variants {
        let mut run = base.clone();
        if let Some(f) = flag {
            run.model = run.model.with_ablation(f);
        }
        log::info!("ablation variant {}", variant_label(flag));
        let result = train_and_evaluate(&run, train_set, eval_sets, &out_dir.join(variant_slug(flag)), metric)?;
        results.push(VariantResult { flag, result });
    }
    write_file(&out_dir.join(TABLE_FILE), &table_csv(&results)?)?;
    write_file(&out_dir.join(VARIANTS_FILE), &variants_csv(&results)?)?;
    Ok(results)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Rows `(dataset, metric)` for S, max F and MAE; one column per variant.
pub fn table_csv(results: &[VariantResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["dataset".to_string(), "metric".to_string()];
    header.extend(results.iter().map(VariantResult::label));
    w.write_record(&header)?;
    let Some(first) = results.first() else {
        return crate::metrics::csv_finish(w);
    };
    for (set_idx, (set, _)) in first.result.reports.iter().enumerate() {
        let metrics: [(&str, fn(&MetricsReport) -> f64); 3] = [
            ("S", |r| r.s_measure),
            ("maxF", |r| r.f_max),
            ("MAE", |r| r.mae),
        ];
        for (name, get) in metrics {
            let mut row = vec![set.clone(), name.to_string()];
            row.extend(results.iter().map(|v| get(&v.result.reports[set_idx].1).to_string()));
            w.write_record(&row)?;
        }
    }
    crate::metrics::csv_finish(w)
}

/// `variant,params` per variant.
pub fn variants_csv(results: &[VariantResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "params"])?;
    for v in results {
        w.write_record([v.label(), v.result.params.to_string()])?;
    }
    crate::metrics::csv_finish(w)
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub k: usize,
    pub result: RunResult,
}

/// Trains one model per refinement count in `ks` (reports under `k<K>/`)
/// and writes a merged `summary.csv`.
pub fn sweep_k(
    base: &RunConfig,
    ks: &[usize],
    train_set: &DatasetManifest,
    eval_sets: &[DatasetManifest],
    out_dir: &Path,
    metric: &MetricConfig,
) -> Result<Vec<SweepResult>> {
    check_eval_sets(eval_sets)?;
    if ks.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one K".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut results = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut run = base.clone();
        run.model.k = k;
        run.model.validate()?;
        log::info!("sweep K = {k}");
        let result = train_and_evaluate(&run, train_set, eval_sets, &out_dir.join(format!("k{k}")), metric)?;
        results.push(SweepResult { k, result });
    }
    write_file(&out_dir.join(SUMMARY_FILE), &summary_csv(&results)?)?;
    Ok(results)
}

pub fn summary_csv(results: &[SweepResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "k", "dataset", "params", "s_measure", "f_max", "f_mean", "f_adaptive", "e_max", "e_mean", "e_adaptive", "mae",
    ])?;
    for s in results {
        for (set, r) in &s.result.reports {
            w.write_record([
                s.k.to_string(),
                set.clone(),
                s.result.params.to_string(),
                r.s_measure.to_string(),
                r.f_max.to_string(),
                r.f_mean.to_string(),
                r.f_adaptive.to_string(),
                r.e_max.to_string(),
                r.e_mean.to_string(),
                r.e_adaptive.to_string(),
                r.mae.to_string(),
            ])?;
        }
    }
    crate::metrics::csv_finish(w)
}
