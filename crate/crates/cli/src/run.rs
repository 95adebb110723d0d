//! `run`: preprocess, plan folds, train, evaluate, write the run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use kanvox_core::graphs::{build_graph, slic_segment, Graph, GraphProvenance};
use kanvox_core::layers::{build_model, Dim, Family, ModelConfig};
use kanvox_core::preprocess::{prepare_slices, prepare_volume, DatasetManifest};
use kanvox_core::stats::{bootstrap_ci, bootstrap_percentile, classification_metrics_lenient};
use kanvox_core::trainer::{
    holdout_plan, loocv_plan, predict_probabilities, save_checkpoint, stratified_group_kfold,
    train_loop, Example, Fold, FoldPlan, Protocol, SubjectKey, TrainConfig,
};
use kanvox_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModelSpec};
use crate::seeds;
use crate::tables::{write_csv, write_json, HistoryRow, MetricRow, PredictionRow, METRICS};

/// Model input kinds; CNN and ConvKAN of one dimensionality share inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum InputKind {
    Slices,
    Volume,
    SliceGraphs,
    VolumeGraph,
}

impl InputKind {
    fn of(spec: &ModelSpec) -> InputKind {
        match (spec.family, spec.dim) {
            (Family::Gcn, Dim::D2) => InputKind::SliceGraphs,
            (Family::Gcn, Dim::D3) => InputKind::VolumeGraph,
            (_, Dim::D2) => InputKind::Slices,
            (_, Dim::D3) => InputKind::Volume,
        }
    }
}

/// Thread-safe copy of a model input (tensors are single-threaded).
#[derive(Debug, Clone)]
enum Plain {
    Image {
        data: Vec<f64>,
        shape: Vec<usize>,
    },
    Graph {
        features: Vec<f64>,
        shape: Vec<usize>,
        edges: Vec<(usize, usize, f64)>,
        centroids: Vec<Vec<f64>>,
        provenance: GraphProvenance,
    },
}

impl Plain {
    fn image(t: &Tensor) -> Plain {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        Plain::Image {
            data: t.data().to_vec(),
            shape,
        }
    }

    fn graph(g: Graph) -> Plain {
        Plain::Graph {
            features: g.node_features.data().to_vec(),
            shape: g.node_features.shape().to_vec(),
            edges: g.edges,
            centroids: g.centroids,
            provenance: g.provenance,
        }
    }

    fn example(&self) -> Result<Example> {
        Ok(match self {
            Plain::Image { data, shape } => Example::Image(Tensor::new(data.clone(), shape)?),
            Plain::Graph {
                features,
                shape,
                edges,
                centroids,
                provenance,
            } => Example::Graph(Graph {
                node_features: Tensor::new(features.clone(), shape)?,
                edges: edges.clone(),
                centroids: centroids.clone(),
                provenance: provenance.clone(),
            }),
        })
    }
}

struct Subject {
    label: usize,
    inputs: BTreeMap<InputKind, Vec<Plain>>,
}

fn prepare_subject(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    index: usize,
    kinds: &[InputKind],
) -> Result<Subject> {
    let rec = &manifest.subjects[index];
    let vol = manifest.load_volume(rec)?;
    let p = &cfg.preprocess;
    let g = &cfg.graph;
    let mut inputs = BTreeMap::new();
    let slices = if kinds
        .iter()
        .any(|k| matches!(k, InputKind::Slices | InputKind::SliceGraphs))
    {
        let center = manifest.center_slice.unwrap_or(vol.depth() / 2);
        prepare_slices(&vol, center, p.slice_count, p.slice_size, p.sigma_mm)?
    } else {
        Vec::new()
    };
    let volume = if kinds
        .iter()
        .any(|k| matches!(k, InputKind::Volume | InputKind::VolumeGraph))
    {
        Some(prepare_volume(&vol, p.volume_size, p.sigma_mm)?)
    } else {
        None
    };
    let graph_of = |img: &Tensor| -> Result<Plain> {
        let seg = slic_segment(img, g.segments, g.compactness, g.iterations)?;
        let mut graph = build_graph(&seg, img, g.neighbours, g.features)?;
        graph.provenance.source = format!("{}/{}", manifest.dataset_name, rec.subject_id);
        Ok(Plain::graph(graph))
    };
    for &kind in kinds {
        let items = match kind {
            InputKind::Slices => slices.iter().map(Plain::image).collect(),
            InputKind::SliceGraphs => slices.iter().map(graph_of).collect::<Result<_>>()?,
            InputKind::Volume => vec![Plain::image(volume.as_ref().expect("volume prepared"))],
            InputKind::VolumeGraph => vec![graph_of(volume.as_ref().expect("volume prepared"))?],
        };
        inputs.insert(kind, items);
    }
    Ok(Subject {
        label: rec.label.index(),
        inputs,
    })
}

struct Task<'a> {
    spec: &'a ModelSpec,
    fold: &'a Fold,
}

struct FoldResult {
    row: MetricRow,
    predictions: Vec<PredictionRow>,
}

fn examples(
    keys: &[SubjectKey],
    subjects: &BTreeMap<SubjectKey, Subject>,
    kind: InputKind,
) -> Result<Vec<(Example, usize)>> {
    let mut out = Vec::new();
    for key in keys {
        let s = subjects
            .get(key)
            .ok_or_else(|| anyhow!("plan names unknown subject {key}"))?;
        for p in &s.inputs[&kind] {
            out.push((p.example()?, s.label));
        }
    }
    Ok(out)
}

fn model_config(spec: &ModelSpec, cfg: &ExperimentConfig) -> ModelConfig {
    let mut m = spec.model_config();
    if spec.family == Family::Gcn {
        m.in_features = cfg.graph.features.arity(spec.dim.rank());
        m.use_edge_weights = cfg.graph.use_edge_weights;
    }
    m
}

/// Label of the dataset a fold is scored on.
fn fold_dataset(fold: &Fold) -> String {
    fold.test
        .first()
        .map(|k| k.dataset.clone())
        .unwrap_or_default()
}

fn run_task(
    task: &Task<'_>,
    cfg: &ExperimentConfig,
    subjects: &BTreeMap<SubjectKey, Subject>,
) -> Result<FoldResult> {
    let spec = task.spec;
    let fold = task.fold;
    let kind = InputKind::of(spec);
    let tag = format!("{}/{}", spec.slug(), fold.name);
    let mut train_cfg: TrainConfig = spec.train_config(&cfg.train);
    train_cfg.seed = seeds::derive(cfg.seed, &format!("{tag}/train"));
    let mut model = build_model(
        &model_config(spec, cfg),
        seeds::derive(cfg.seed, &format!("{tag}/init")),
    )?;

    let train = examples(&fold.train, subjects, kind)?;
    let validation = examples(&fold.validation, subjects, kind)?;
    let outcome = train_loop(&mut model, &train, &validation, &train_cfg)?;
    drop(train);
    drop(validation);

    let test = examples(&fold.test, subjects, kind)?;
    let refs: Vec<&Example> = test.iter().map(|(e, _)| e).collect();
    let probs = predict_probabilities(&model, &refs, train_cfg.batch_size)?;
    let mut predictions = Vec::new();
    let mut cursor = 0;
    for key in &fold.test {
        let s = &subjects[key];
        let n = s.inputs[&kind].len();
        // subject-level score: mean of per-slice class-1 probabilities
        let p = probs[cursor..cursor + n].iter().sum::<f64>() / n as f64;
        cursor += n;
        predictions.push(PredictionRow {
            dataset: key.dataset.clone(),
            subject: key.subject.clone(),
            label: s.label,
            probability: p,
        });
    }
    let scores: Vec<f64> = predictions.iter().map(|p| p.probability).collect();
    let labels: Vec<usize> = predictions.iter().map(|p| p.label).collect();
    let m = classification_metrics_lenient(&scores, &labels)?;

    let dir = cfg.output.join(spec.slug()).join(&fold.name);
    save_checkpoint(&dir, &model, outcome.best_epoch)?;
    let history: Vec<HistoryRow> = outcome
        .history
        .iter()
        .map(|h| HistoryRow {
            epoch: h.epoch,
            train_loss: h.train_loss,
            val_loss: h.val_loss,
        })
        .collect();
    write_csv(&dir.join("history.csv"), &history)?;
    write_csv(&dir.join("predictions.csv"), &predictions)?;
    eprintln!(
        "{} {}: auroc {:.3}, accuracy {:.3}, best epoch {} of {}",
        spec.name(),
        fold.name,
        m.auroc,
        m.accuracy,
        outcome.best_epoch,
        outcome.history.len()
    );
    Ok(FoldResult {
        row: MetricRow {
            model: spec.name(),
            dataset: fold_dataset(fold),
            fold: fold.name.clone(),
            accuracy: m.accuracy,
            f1_macro: m.f1_macro,
            recall: m.recall,
            auroc: m.auroc,
        },
        predictions,
    })
}

/// Per-fold mean or pooled-prediction value of a metric with its bootstrap CI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub dataset: String,
    pub mode: String,
    pub metric: String,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

fn metric_of(m: &kanvox_core::stats::ClassificationMetrics, name: &str) -> f64 {
    match name {
        "accuracy" => m.accuracy,
        "f1_macro" => m.f1_macro,
        "recall" => m.recall,
        _ => m.auroc,
    }
}

fn summarize(
    cfg: &ExperimentConfig,
    rows: &[MetricRow],
    pooled: &BTreeMap<(String, String), Vec<PredictionRow>>,
) -> Result<Vec<SummaryRow>> {
    let opts = &cfg.stats;
    let mut out = Vec::new();
    for ((model, dataset), preds) in pooled {
        for metric in METRICS {
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| &r.model == model && &r.dataset == dataset)
                .map(|r| r.metric(metric))
                .filter(|v| v.is_finite())
                .collect();
            if !values.is_empty() {
                let seed = seeds::derive(cfg.seed, &format!("summary/{model}/{dataset}/{metric}"));
                let (lo, hi) =
                    bootstrap_ci(&values, opts.confidence, opts.bootstrap_replicates, seed)?;
                out.push(SummaryRow {
                    model: model.clone(),
                    dataset: dataset.clone(),
                    mode: "per_fold".into(),
                    metric: metric.into(),
                    value: values.iter().sum::<f64>() / values.len() as f64,
                    ci_low: lo,
                    ci_high: hi,
                    n: values.len(),
                });
            }
            let scores: Vec<f64> = preds.iter().map(|p| p.probability).collect();
            let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
            let value = metric_of(&classification_metrics_lenient(&scores, &labels)?, metric);
            let seed = seeds::derive(cfg.seed, &format!("pooled/{dataset}"));
            let (lo, hi) = bootstrap_percentile(
                preds.len(),
                opts.confidence,
                opts.bootstrap_replicates,
                seed,
                |idx| {
                    let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                    let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                    let v = metric_of(&classification_metrics_lenient(&s, &l).ok()?, metric);
                    v.is_finite().then_some(v)
                },
            )
            .unwrap_or((f64::NAN, f64::NAN));
            out.push(SummaryRow {
                model: model.clone(),
                dataset: dataset.clone(),
                mode: "pooled".into(),
                metric: metric.into(),
                value,
                ci_low: lo,
                ci_high: hi,
                n: preds.len(),
            });
        }
    }
    Ok(out)
}

/// Metric rows on bootstrap resamples of the pooled predictions. The
/// resampled subjects depend only on the dataset and replicate id, so rows
/// of different models pair up.
fn replicate_rows(
    cfg: &ExperimentConfig,
    pooled: &BTreeMap<(String, String), Vec<PredictionRow>>,
) -> Result<Vec<MetricRow>> {
    use rand::{Rng, SeedableRng};
    let mut out = Vec::new();
    for ((model, dataset), preds) in pooled {
        let mut sorted = preds.clone();
        sorted.sort_by(|a, b| a.subject.cmp(&b.subject));
        let n = sorted.len();
        let mut r = 0;
        let mut attempt = 0;
        while r < cfg.stats.replicate_metrics {
            let seed = seeds::derive(cfg.seed, &format!("replicate/{dataset}/{attempt}"));
            attempt += 1;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let s: Vec<f64> = idx.iter().map(|&i| sorted[i].probability).collect();
            let l: Vec<usize> = idx.iter().map(|&i| sorted[i].label).collect();
            if l.iter().all(|&x| x == l[0]) {
                continue;
            }
            let m = classification_metrics_lenient(&s, &l)?;
            out.push(MetricRow {
                model: model.clone(),
                dataset: dataset.clone(),
                fold: format!("boot{r:03}"),
                accuracy: m.accuracy,
                f1_macro: m.f1_macro,
                recall: m.recall,
                auroc: m.auroc,
            });
            r += 1;
        }
    }
    Ok(out)
}

pub struct RunSummary {
    pub output: PathBuf,
    pub rows: Vec<MetricRow>,
}

fn build_plan(cfg: &ExperimentConfig, manifests: &[DatasetManifest]) -> Result<FoldPlan> {
    let seed = seeds::derive(cfg.seed, "plan");
    let plan = match cfg.protocol {
        Protocol::IsolatedCv => stratified_group_kfold(&manifests[0], cfg.folds, seed)?,
        Protocol::Loocv => loocv_plan(&manifests[0], seed)?,
        Protocol::Holdout => holdout_plan(&manifests.iter().collect::<Vec<_>>(), seed)?,
    };
    plan.audit(&manifests.iter().collect::<Vec<_>>())?;
    Ok(plan)
}

pub fn cmd_run(cfg: &ExperimentConfig, jobs: usize) -> Result<RunSummary> {
    cfg.validate()?;
    let manifests = cfg
        .datasets
        .iter()
        .map(|p| {
            let m = DatasetManifest::load(p)
                .with_context(|| format!("preprocess: manifest {}", p.display()))?;
            m.validate()
                .with_context(|| format!("preprocess: manifest {}", p.display()))?;
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let plan = build_plan(cfg, &manifests).context("trainer: fold plan")?;
    std::fs::create_dir_all(&cfg.output)
        .with_context(|| format!("creating {}", cfg.output.display()))?;
    write_json(&cfg.output.join("config.json"), cfg)?;
    write_json(&cfg.output.join("plan.json"), &plan)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("building worker pool")?;

    let mut kinds: Vec<InputKind> = cfg.models.iter().map(InputKind::of).collect();
    kinds.sort();
    kinds.dedup();
    let jobs_list: Vec<(&DatasetManifest, usize)> = manifests
        .iter()
        .flat_map(|m| (0..m.subjects.len()).map(move |i| (m, i)))
        .collect();
    let prepared: Vec<Result<(SubjectKey, Subject)>> = pool.install(|| {
        jobs_list
            .par_iter()
            .map(|&(m, i)| {
                let key = SubjectKey {
                    dataset: m.dataset_name.clone(),
                    subject: m.subjects[i].subject_id.clone(),
                };
                let s = prepare_subject(cfg, m, i, &kinds)
                    .with_context(|| format!("preprocess: subject {key}"))?;
                Ok((key, s))
            })
            .collect()
    });
    let subjects: BTreeMap<SubjectKey, Subject> = prepared.into_iter().collect::<Result<_>>()?;

    let tasks: Vec<Task<'_>> = cfg
        .models
        .iter()
        .flat_map(|spec| plan.folds.iter().map(move |fold| Task { spec, fold }))
        .collect();
    let results: Vec<Result<FoldResult>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|t| {
                run_task(t, cfg, &subjects)
                    .with_context(|| format!("trainer: {} {}", t.spec.name(), t.fold.name))
            })
            .collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let rows: Vec<MetricRow> = results.iter().map(|r| r.row.clone()).collect();
    let mut pooled: BTreeMap<(String, String), Vec<PredictionRow>> = BTreeMap::new();
    for r in &results {
        pooled
            .entry((r.row.model.clone(), r.row.dataset.clone()))
            .or_default()
            .extend(r.predictions.iter().cloned());
    }
    write_csv(&cfg.output.join("metrics.csv"), &rows)?;
    write_csv(
        &cfg.output.join("summary.csv"),
        &summarize(cfg, &rows, &pooled).context("stats: summary")?,
    )?;
    if cfg.stats.replicate_metrics > 0 {
        write_csv(
            &cfg.output.join("replicates.csv"),
            &replicate_rows(cfg, &pooled)?,
        )?;
    }
    Ok(RunSummary {
        output: cfg.output.clone(),
        rows,
    })
}

/// Files `report` expects in a finished run directory.
pub fn required_run_files(dir: &Path) -> Vec<PathBuf> {
    vec![
        dir.join("config.json"),
        dir.join("plan.json"),
        dir.join("metrics.csv"),
    ]
}
