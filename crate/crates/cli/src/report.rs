//! `report`: plot data and SVG renderings from finished runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kanvox_core::stats::roc_curve;
use serde::{Deserialize, Serialize};

use crate::compare::{cv_table, dataset_means};
use crate::config::ExperimentConfig;
use crate::run::required_run_files;
use crate::svg;
use crate::tables::{read_csv, write_csv_with_header, MetricRow, PredictionRow, METRICS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub model: String,
    pub dataset: String,
    pub accuracy: f64,
    pub f1_macro: f64,
    pub recall: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub model: String,
    pub dataset: String,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ReportOutput {
    pub heatmap: Vec<HeatmapRow>,
    pub roc: Vec<RocPoint>,
}

fn check_complete(run: &Path, cfg: Option<&ExperimentConfig>, rows: &[MetricRow]) -> Vec<PathBuf> {
    let mut missing: Vec<PathBuf> = required_run_files(run)
        .into_iter()
        .filter(|p| !p.exists())
        .collect();
    if let Some(cfg) = cfg {
        for spec in &cfg.models {
            for r in rows.iter().filter(|r| r.model == spec.name()) {
                let p = run.join(spec.slug()).join(&r.fold).join("predictions.csv");
                if !p.exists() {
                    missing.push(p);
                }
            }
        }
    }
    missing
}

/// Pooled subject predictions per (model, dataset) from a run directory.
fn pooled_predictions(
    run: &Path,
    cfg: &ExperimentConfig,
    rows: &[MetricRow],
) -> Result<BTreeMap<(String, String), Vec<PredictionRow>>> {
    let mut out: BTreeMap<(String, String), Vec<PredictionRow>> = BTreeMap::new();
    for spec in &cfg.models {
        let mut folds: Vec<&str> = rows
            .iter()
            .filter(|r| r.model == spec.name())
            .map(|r| r.fold.as_str())
            .collect();
        folds.dedup();
        for fold in folds {
            let path = run.join(spec.slug()).join(fold).join("predictions.csv");
            for p in read_csv::<PredictionRow>(&path)? {
                out.entry((spec.name(), p.dataset.clone()))
                    .or_default()
                    .push(p);
            }
        }
    }
    Ok(out)
}

pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<ReportOutput> {
    if runs.is_empty() {
        bail!("report: no run directories given");
    }
    let mut all_rows = Vec::new();
    let mut pooled: BTreeMap<(String, String), Vec<PredictionRow>> = BTreeMap::new();
    let mut missing = Vec::new();
    for run in runs {
        let cfg_path = run.join("config.json");
        let cfg = if cfg_path.exists() {
            let text = std::fs::read_to_string(&cfg_path)
                .with_context(|| format!("reading {}", cfg_path.display()))?;
            Some(
                serde_json::from_str::<ExperimentConfig>(&text)
                    .with_context(|| format!("parsing {}", cfg_path.display()))?,
            )
        } else {
            None
        };
        let metrics = run.join("metrics.csv");
        let rows: Vec<MetricRow> = if metrics.exists() {
            read_csv(&metrics)?
        } else {
            Vec::new()
        };
        let m = check_complete(run, cfg.as_ref(), &rows);
        if !m.is_empty() {
            missing.extend(m);
            continue;
        }
        let cfg = cfg.expect("config present when complete");
        for (k, v) in pooled_predictions(run, &cfg, &rows)? {
            pooled.entry(k).or_default().extend(v);
        }
        all_rows.extend(rows);
    }
    if !missing.is_empty() {
        let list: Vec<String> = missing
            .iter()
            .map(|p| format!("  {}", p.display()))
            .collect();
        bail!(
            "report: incomplete run directories, missing:\n{}",
            list.join("\n")
        );
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let heatmap: Vec<HeatmapRow> = dataset_means(&all_rows)
        .into_iter()
        .map(|((model, dataset), v)| HeatmapRow {
            model,
            dataset,
            accuracy: v[0],
            f1_macro: v[1],
            recall: v[2],
            auroc: v[3],
        })
        .collect();
    write_csv_with_header(
        &out.join("heatmap.csv"),
        &[
            "model", "dataset", "accuracy", "f1_macro", "recall", "auroc",
        ],
        &heatmap,
    )?;
    let labels: Vec<String> = heatmap
        .iter()
        .map(|h| format!("{} / {}", h.model, h.dataset))
        .collect();
    let cols: Vec<String> = METRICS.iter().map(|m| m.to_string()).collect();
    let values: Vec<Vec<f64>> = heatmap
        .iter()
        .map(|h| vec![h.accuracy, h.f1_macro, h.recall, h.auroc])
        .collect();
    write_svg(
        &out.join("heatmap.svg"),
        &svg::heatmap(&labels, &cols, &values),
    )?;

    let mut roc = Vec::new();
    let mut curves = Vec::new();
    for ((model, dataset), preds) in &pooled {
        let scores: Vec<f64> = preds.iter().map(|p| p.probability).collect();
        let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
        let Ok(pts) = roc_curve(&scores, &labels) else {
            continue;
        };
        roc.extend(pts.iter().map(|&(fpr, tpr)| RocPoint {
            model: model.clone(),
            dataset: dataset.clone(),
            fpr,
            tpr,
        }));
        curves.push((format!("{model} / {dataset}"), pts));
    }
    write_csv_with_header(
        &out.join("roc_points.csv"),
        &["model", "dataset", "fpr", "tpr"],
        &roc,
    )?;
    write_svg(&out.join("roc.svg"), &svg::roc(&curves))?;

    let cv = cv_table(&all_rows)?;
    write_csv_with_header(
        &out.join("cv_bars.csv"),
        &["model", "metric", "cv_percent", "scope", "n"],
        &cv,
    )?;
    let labels: Vec<String> = cv
        .iter()
        .map(|c| format!("{} {}", c.model, c.metric))
        .collect();
    let values: Vec<f64> = cv.iter().map(|c| c.cv_percent).collect();
    write_svg(&out.join("cv_bars.svg"), &svg::bars(&labels, &values, "%"))?;
    Ok(ReportOutput { heatmap, roc })
}

fn write_svg(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
