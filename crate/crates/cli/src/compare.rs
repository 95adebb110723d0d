//! `compare`: paired model comparisons, subtraction tables and CV tables.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kanvox_core::layers::{Dim, Family};
use kanvox_core::stats::{
    coefficient_of_variation, compare_paired, correct_family, shapiro_wilk, ComparisonResult,
    WilcoxonMethod,
};
use serde::{Deserialize, Serialize};

use crate::seeds;
use crate::tables::{read_csv, write_csv_with_header, write_json, MetricRow, METRICS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CompareMode {
    /// Wilcoxon tests over paired folds (or bootstrap replicates).
    Paired,
    /// Differences of per-dataset means, laid out model by model.
    Subtraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub comparison: String,
    /// `model` (same dimensionality), `dimension` (same family) or `cross`.
    pub kind: String,
    /// Dataset the pairs come from, or `all`.
    pub scope: String,
    pub metric: String,
    pub n: usize,
    pub mean_difference: f64,
    pub p: f64,
    pub p_corrected: f64,
    pub degenerate: bool,
    pub cohens_d: f64,
    pub d_infinite: bool,
    pub ci_low: f64,
    pub ci_high: f64,
    pub method: WilcoxonMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub model: String,
    pub metric: String,
    pub cv_percent: f64,
    /// `datasets` (CV of per-dataset means) or `folds` (single dataset).
    pub scope: String,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtractionRow {
    /// `dimension`, `2d` or `3d`.
    pub table: String,
    pub dataset: String,
    pub comparison: String,
    pub accuracy: f64,
    pub f1_macro: f64,
    pub recall: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityRow {
    pub model: String,
    pub metric: String,
    pub n: usize,
    pub w: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CompareOutput {
    pub comparisons: Vec<ComparisonRow>,
    pub cv: Vec<CvRow>,
    pub subtraction: Vec<SubtractionRow>,
    pub normality: Vec<NormalityRow>,
}

pub fn load_rows(inputs: &[PathBuf]) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for path in inputs {
        for r in read_csv::<MetricRow>(path)? {
            if !seen.insert((r.model.clone(), r.dataset.clone(), r.fold.clone())) {
                bail!(
                    "{}: duplicate row for {} / {} / {}",
                    path.display(),
                    r.model,
                    r.dataset,
                    r.fold
                );
            }
            rows.push(r);
        }
    }
    Ok(rows)
}

fn parse_model(name: &str) -> Option<(Dim, Family)> {
    let mut it = name.split_whitespace();
    let dim = it.next()?.parse().ok()?;
    let family = it.next()?.parse().ok()?;
    it.next().is_none().then_some((dim, family))
}

fn finite_mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn models_in_order(rows: &[MetricRow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in rows {
        if !out.contains(&r.model) {
            out.push(r.model.clone());
        }
    }
    out
}

fn datasets_in_order(rows: &[MetricRow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in rows {
        if !out.contains(&r.dataset) {
            out.push(r.dataset.clone());
        }
    }
    out
}

/// Mean of every metric per (model, dataset), NaN entries skipped.
pub fn dataset_means(rows: &[MetricRow]) -> BTreeMap<(String, String), [f64; 4]> {
    let mut out = BTreeMap::new();
    for model in models_in_order(rows) {
        for dataset in datasets_in_order(rows) {
            let sel: Vec<&MetricRow> = rows
                .iter()
                .filter(|r| r.model == model && r.dataset == dataset)
                .collect();
            if sel.is_empty() {
                continue;
            }
            let means = METRICS.map(|m| finite_mean(sel.iter().map(|r| r.metric(m))));
            out.insert((model.clone(), dataset), means);
        }
    }
    out
}

/// CV across per-dataset means when a model covers several datasets,
/// otherwise across its folds.
pub fn cv_table(rows: &[MetricRow]) -> Result<Vec<CvRow>> {
    let means = dataset_means(rows);
    let mut out = Vec::new();
    for model in models_in_order(rows) {
        let per_dataset: Vec<&[f64; 4]> = means
            .iter()
            .filter(|((m, _), _)| *m == model)
            .map(|(_, v)| v)
            .collect();
        for (k, metric) in METRICS.iter().enumerate() {
            let (values, scope): (Vec<f64>, &str) = if per_dataset.len() > 1 {
                (per_dataset.iter().map(|v| v[k]).collect(), "datasets")
            } else {
                (
                    rows.iter()
                        .filter(|r| r.model == model)
                        .map(|r| r.metric(metric))
                        .collect(),
                    "folds",
                )
            };
            let values: Vec<f64> = values.into_iter().filter(|v| v.is_finite()).collect();
            if values.is_empty() {
                continue;
            }
            let cv = coefficient_of_variation(&values).unwrap_or(f64::NAN);
            out.push(CvRow {
                model: model.clone(),
                metric: metric.to_string(),
                cv_percent: cv,
                scope: scope.into(),
                n: values.len(),
            });
        }
    }
    Ok(out)
}

const FAMILIES: [Family; 3] = [Family::Cnn, Family::Convkan, Family::Gcn];

/// Differences of per-dataset means: 3D minus 2D per family, then the
/// family pairs within each dimensionality.
pub fn subtraction_table(rows: &[MetricRow]) -> Vec<SubtractionRow> {
    let means = dataset_means(rows);
    let by_arch: HashMap<(Dim, Family), String> = models_in_order(rows)
        .into_iter()
        .filter_map(|m| parse_model(&m).map(|k| (k, m)))
        .collect();
    let mut layout: Vec<(String, String, String)> = Vec::new();
    for f in FAMILIES {
        if let (Some(a), Some(b)) = (by_arch.get(&(Dim::D3, f)), by_arch.get(&(Dim::D2, f))) {
            layout.push(("dimension".into(), a.clone(), b.clone()));
        }
    }
    for (dim, table) in [(Dim::D2, "2d"), (Dim::D3, "3d")] {
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            if let (Some(a), Some(b)) = (
                by_arch.get(&(dim, FAMILIES[i])),
                by_arch.get(&(dim, FAMILIES[j])),
            ) {
                layout.push((table.into(), a.clone(), b.clone()));
            }
        }
    }
    let mut out = Vec::new();
    for (table, a, b) in &layout {
        for dataset in datasets_in_order(rows) {
            let (Some(ma), Some(mb)) = (
                means.get(&(a.clone(), dataset.clone())),
                means.get(&(b.clone(), dataset.clone())),
            ) else {
                continue;
            };
            let d: Vec<f64> = (0..4).map(|k| ma[k] - mb[k]).collect();
            out.push(SubtractionRow {
                table: table.clone(),
                dataset,
                comparison: format!("{a} - {b}"),
                accuracy: d[0],
                f1_macro: d[1],
                recall: d[2],
                auroc: d[3],
            });
        }
    }
    out
}

fn comparison_kind(a: &str, b: &str) -> &'static str {
    match (parse_model(a), parse_model(b)) {
        (Some((da, _)), Some((db, _))) if da == db => "model",
        (Some((_, fa)), Some((_, fb))) if fa == fb => "dimension",
        _ => "cross",
    }
}

fn to_row(kind: &str, scope: &str, r: ComparisonResult) -> ComparisonRow {
    ComparisonRow {
        comparison: r.comparison,
        kind: kind.into(),
        scope: scope.into(),
        metric: r.metric,
        n: r.n,
        mean_difference: r.mean_difference,
        p: r.p_raw,
        p_corrected: r.p_corrected,
        degenerate: r.degenerate,
        cohens_d: r.cohens_d,
        d_infinite: r.d_infinite,
        ci_low: r.ci_low,
        ci_high: r.ci_high,
        method: r.method,
    }
}

/// All pairwise comparisons, pooled over datasets (`all`) and, when a
/// dataset has at least three paired folds, within each dataset. BH runs
/// over the whole family of tests.
pub fn paired_comparisons(rows: &[MetricRow], seed: u64) -> Result<Vec<ComparisonRow>> {
    let models = models_in_order(rows);
    let keys = |m: &str| -> BTreeSet<(String, String)> {
        rows.iter()
            .filter(|r| r.model == m)
            .map(|r| (r.dataset.clone(), r.fold.clone()))
            .collect()
    };
    for m in &models[1..models.len().max(1)] {
        if keys(m) != keys(&models[0]) {
            bail!(
                "pairing: {} has {} (dataset, fold) rows, {} has {}; fold sets differ",
                models[0],
                keys(&models[0]).len(),
                m,
                keys(m).len()
            );
        }
    }
    let value = |m: &str, key: &(String, String), metric: &str| -> f64 {
        rows.iter()
            .find(|r| r.model == m && r.dataset == key.0 && r.fold == key.1)
            .map(|r| r.metric(metric))
            .expect("key present")
    };
    let datasets = datasets_in_order(rows);
    let mut results: Vec<(String, String, ComparisonResult)> = Vec::new();
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            let (a, b) = (&models[i], &models[j]);
            let all_keys: Vec<(String, String)> = keys(a).into_iter().collect();
            let mut scopes: Vec<(String, Vec<(String, String)>)> =
                vec![("all".into(), all_keys.clone())];
            if datasets.len() > 1 {
                for d in &datasets {
                    let sub: Vec<_> = all_keys.iter().filter(|k| &k.0 == d).cloned().collect();
                    if sub.len() >= 3 {
                        scopes.push((d.clone(), sub));
                    }
                }
            }
            for (scope, ks) in scopes {
                for metric in METRICS {
                    let pairs: Vec<(f64, f64)> = ks
                        .iter()
                        .map(|k| (value(a, k, metric), value(b, k, metric)))
                        .filter(|(x, y)| x.is_finite() && y.is_finite())
                        .collect();
                    let xa: Vec<f64> = pairs.iter().map(|p| p.0).collect();
                    let xb: Vec<f64> = pairs.iter().map(|p| p.1).collect();
                    let nonzero = pairs.iter().filter(|(x, y)| x != y).count();
                    if pairs.len() < 2 || (1..3).contains(&nonzero) {
                        eprintln!(
                            "skipping {a} vs {b} on {metric} ({scope}): too few informative pairs"
                        );
                        continue;
                    }
                    let s = seeds::derive(seed, &format!("compare/{a}/{b}/{scope}/{metric}"));
                    let r = compare_paired(a, b, &scope, metric, &xa, &xb, s)
                        .with_context(|| format!("stats: {a} vs {b} on {metric}"))?;
                    results.push((comparison_kind(a, b).into(), scope.clone(), r));
                }
            }
        }
    }
    let mut plain: Vec<ComparisonResult> = results.iter().map(|(_, _, r)| r.clone()).collect();
    correct_family(&mut plain)?;
    Ok(results
        .into_iter()
        .zip(plain)
        .map(|((k, s, _), r)| to_row(&k, &s, r))
        .collect())
}

pub fn normality(rows: &[MetricRow]) -> Vec<NormalityRow> {
    let mut out = Vec::new();
    for model in models_in_order(rows) {
        for metric in METRICS {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.model == model)
                .map(|r| r.metric(metric))
                .filter(|x| x.is_finite())
                .collect();
            if let Ok(sw) = shapiro_wilk(&v) {
                out.push(NormalityRow {
                    model: model.clone(),
                    metric: metric.into(),
                    n: v.len(),
                    w: sw.w,
                    p: sw.p,
                });
            }
        }
    }
    out
}

pub fn cmd_compare(
    inputs: &[PathBuf],
    out: &Path,
    mode: CompareMode,
    seed: u64,
) -> Result<CompareOutput> {
    if inputs.is_empty() {
        bail!("compare: no metric tables given");
    }
    let rows = load_rows(inputs)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut result = CompareOutput {
        cv: cv_table(&rows)?,
        ..Default::default()
    };
    write_csv_with_header(
        &out.join("cv_table.csv"),
        &["model", "metric", "cv_percent", "scope", "n"],
        &result.cv,
    )?;
    match mode {
        CompareMode::Paired => {
            result.comparisons = paired_comparisons(&rows, seed)?;
            result.normality = normality(&rows);
            write_csv_with_header(
                &out.join("comparisons.csv"),
                &[
                    "comparison",
                    "kind",
                    "scope",
                    "metric",
                    "n",
                    "mean_difference",
                    "p",
                    "p_corrected",
                    "degenerate",
                    "cohens_d",
                    "d_infinite",
                    "ci_low",
                    "ci_high",
                    "method",
                ],
                &result.comparisons,
            )?;
            write_json(&out.join("comparisons.json"), &result.comparisons)?;
            write_csv_with_header(
                &out.join("normality.csv"),
                &["model", "metric", "n", "w", "p"],
                &result.normality,
            )?;
        }
        CompareMode::Subtraction => {
            result.subtraction = subtraction_table(&rows);
            write_csv_with_header(
                &out.join("subtraction.csv"),
                &[
                    "table",
                    "dataset",
                    "comparison",
                    "accuracy",
                    "f1_macro",
                    "recall",
                    "auroc",
                ],
                &result.subtraction,
            )?;
        }
    }
    Ok(result)
}
