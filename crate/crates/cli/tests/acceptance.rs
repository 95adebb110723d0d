//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use kanvox_cli::compare::{cmd_compare, cv_table, CompareMode};
use kanvox_cli::config::ExperimentConfig;
use kanvox_cli::run::{cmd_run, SummaryRow};
use kanvox_cli::synth::cmd_synth;
use kanvox_cli::tables::{read_csv, write_csv, MetricRow, METRICS};
use kanvox_core::bspline::{make_grid, SplineGrid};
use kanvox_core::gradcheck::{numeric_gradient, relative_error, DEFAULT_STEP};
use kanvox_core::graphs::{build_graph, slic_segment, FeatureSet, Graph, GraphBatch};
use kanvox_core::layers::{
    build_model, Block, ConvLayer, Dim, Family, GcnConvLayer, LinearLayer, Model, ModelConfig,
    ModelInput, SplineConvLayer, SplineSettings,
};
use kanvox_core::preprocess::{DatasetManifest, Label, SubjectRecord, SynthSpec};
use kanvox_core::stats::{
    auroc, bootstrap_ci, power_ttest, required_n, wilcoxon_signed_rank, WilcoxonMethod,
};
use kanvox_core::tensor::nn::weighted_cross_entropy;
use kanvox_core::trainer::{
    holdout_plan, loocv_plan, stratified_group_kfold, FoldPlan, SubjectKey,
};
use kanvox_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

type Check = Result<String, String>;
type Named<'a> = (&'static str, Box<dyn FnOnce() -> Check + 'a>);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within_time(detail: String, started: Instant, limit: Duration) -> Check {
    let elapsed = started.elapsed();
    let detail = format!(
        "{detail}; {:.2} s (limit {} s)",
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    ensure(elapsed <= limit, detail)
}

const DATASETS: [&str; 3] = ["PPMI", "Tao Wu", "NEUROCON"];
const MODELS: [&str; 6] = [
    "2D CNN",
    "2D ConvKAN",
    "2D GCN",
    "3D CNN",
    "3D ConvKAN",
    "3D GCN",
];

/// Reported hold-out means (accuracy, F1, recall, AUROC), indexed [dataset][model].
const HOLDOUT: [[[f64; 4]; 6]; 3] = [
    [
        [0.70, 0.70, 0.70, 0.79],
        [0.59, 0.54, 0.59, 0.54],
        [0.47, 0.31, 0.47, 0.58],
        [0.76, 0.75, 0.76, 0.80],
        [0.83, 0.82, 0.83, 0.85],
        [0.69, 0.69, 0.69, 0.81],
    ],
    [
        [0.57, 0.49, 0.57, 0.74],
        [0.57, 0.52, 0.57, 0.64],
        [0.50, 0.33, 0.50, 0.55],
        [0.50, 0.33, 0.50, 0.72],
        [0.65, 0.62, 0.65, 0.66],
        [0.63, 0.56, 0.63, 0.66],
    ],
    [
        [0.57, 0.54, 0.57, 0.87],
        [0.42, 0.30, 0.42, 0.82],
        [0.63, 0.48, 0.63, 0.46],
        [0.63, 0.48, 0.63, 0.48],
        [0.63, 0.48, 0.63, 0.48],
        [0.63, 0.48, 0.63, 0.56],
    ],
];

/// Reported hold-out CV percentages per model, same metric order.
const HOLDOUT_CV: [[f64; 4]; 6] = [
    [10.22, 15.45, 10.22, 6.79],
    [14.59, 24.48, 14.59, 17.32],
    [12.56, 20.99, 12.56, 10.06],
    [17.02, 32.64, 17.02, 20.40],
    [12.91, 21.80, 12.91, 23.05],
    [4.97, 14.44, 4.97, 15.18],
];

/// Reported hold-out differences: (table, dataset, comparison, diffs).
const HOLDOUT_DIFFS: [(&str, &str, &str, [f64; 4]); 27] = [
    (
        "dimension",
        "PPMI",
        "3D CNN - 2D CNN",
        [0.06, 0.05, 0.06, 0.01],
    ),
    (
        "dimension",
        "PPMI",
        "3D ConvKAN - 2D ConvKAN",
        [0.24, 0.28, 0.24, 0.31],
    ),
    (
        "dimension",
        "PPMI",
        "3D GCN - 2D GCN",
        [0.22, 0.38, 0.22, 0.23],
    ),
    (
        "dimension",
        "Tao Wu",
        "3D CNN - 2D CNN",
        [-0.07, -0.16, -0.07, -0.02],
    ),
    (
        "dimension",
        "Tao Wu",
        "3D ConvKAN - 2D ConvKAN",
        [0.08, 0.10, 0.08, 0.02],
    ),
    (
        "dimension",
        "Tao Wu",
        "3D GCN - 2D GCN",
        [0.13, 0.23, 0.13, 0.11],
    ),
    (
        "dimension",
        "NEUROCON",
        "3D CNN - 2D CNN",
        [0.06, -0.06, 0.06, -0.39],
    ),
    (
        "dimension",
        "NEUROCON",
        "3D ConvKAN - 2D ConvKAN",
        [0.21, 0.18, 0.21, -0.34],
    ),
    (
        "dimension",
        "NEUROCON",
        "3D GCN - 2D GCN",
        [0.00, 0.00, 0.00, 0.10],
    ),
    (
        "2d",
        "PPMI",
        "2D CNN - 2D ConvKAN",
        [0.11, 0.16, 0.11, 0.25],
    ),
    ("2d", "PPMI", "2D CNN - 2D GCN", [0.23, 0.39, 0.23, 0.21]),
    (
        "2d",
        "PPMI",
        "2D ConvKAN - 2D GCN",
        [0.12, 0.23, 0.12, -0.04],
    ),
    (
        "2d",
        "Tao Wu",
        "2D CNN - 2D ConvKAN",
        [0.00, -0.03, 0.00, 0.10],
    ),
    ("2d", "Tao Wu", "2D CNN - 2D GCN", [0.07, 0.16, 0.07, 0.19]),
    (
        "2d",
        "Tao Wu",
        "2D ConvKAN - 2D GCN",
        [0.07, 0.19, 0.07, 0.09],
    ),
    (
        "2d",
        "NEUROCON",
        "2D CNN - 2D ConvKAN",
        [0.15, 0.24, 0.15, 0.05],
    ),
    (
        "2d",
        "NEUROCON",
        "2D CNN - 2D GCN",
        [-0.06, 0.06, -0.06, 0.41],
    ),
    (
        "2d",
        "NEUROCON",
        "2D ConvKAN - 2D GCN",
        [-0.21, -0.18, -0.21, 0.36],
    ),
    (
        "3d",
        "PPMI",
        "3D CNN - 3D ConvKAN",
        [-0.07, -0.07, -0.07, -0.05],
    ),
    ("3d", "PPMI", "3D CNN - 3D GCN", [0.07, 0.06, 0.07, -0.01]),
    (
        "3d",
        "PPMI",
        "3D ConvKAN - 3D GCN",
        [0.14, 0.13, 0.14, 0.04],
    ),
    (
        "3d",
        "Tao Wu",
        "3D CNN - 3D ConvKAN",
        [-0.15, -0.29, -0.15, 0.06],
    ),
    (
        "3d",
        "Tao Wu",
        "3D CNN - 3D GCN",
        [-0.13, -0.23, -0.13, 0.06],
    ),
    (
        "3d",
        "Tao Wu",
        "3D ConvKAN - 3D GCN",
        [0.02, 0.06, 0.02, 0.00],
    ),
    (
        "3d",
        "NEUROCON",
        "3D CNN - 3D ConvKAN",
        [0.00, 0.00, 0.00, 0.00],
    ),
    (
        "3d",
        "NEUROCON",
        "3D CNN - 3D GCN",
        [0.00, 0.00, 0.00, -0.08],
    ),
    (
        "3d",
        "NEUROCON",
        "3D ConvKAN - 3D GCN",
        [0.00, 0.00, 0.00, -0.08],
    ),
];

fn holdout_rows() -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for (d, dataset) in DATASETS.iter().enumerate() {
        for (m, model) in MODELS.iter().enumerate() {
            let v = HOLDOUT[d][m];
            rows.push(MetricRow {
                model: model.to_string(),
                dataset: dataset.to_string(),
                fold: format!("test-{dataset}"),
                accuracy: v[0],
                f1_macro: v[1],
                recall: v[2],
                auroc: v[3],
            });
        }
    }
    rows
}

fn cv_reproduction() -> Check {
    let started = Instant::now();
    let cv = cv_table(&holdout_rows()).map_err(|e| e.to_string())?;
    let mut worst = (0.0f64, String::new());
    let mut matched = 0;
    for (m, model) in MODELS.iter().enumerate() {
        for (k, metric) in METRICS.iter().enumerate() {
            let row = cv
                .iter()
                .find(|r| r.model == *model && r.metric == *metric && r.scope == "datasets")
                .ok_or(format!("no CV row for {model} {metric}"))?;
            let dev = (row.cv_percent - HOLDOUT_CV[m][k]).abs();
            matched += 1;
            if dev > worst.0 {
                worst = (dev, format!("{model} {metric}"));
            }
        }
    }
    let detail = format!(
        "{matched}/24 entries, max deviation {:.2} pp at {} (limit 1.5 pp)",
        worst.0, worst.1
    );
    if worst.0 > 1.5 {
        return Err(detail);
    }
    within_time(detail, started, Duration::from_secs(1))
}

fn subtraction_reproduction(tmp: &Path) -> Check {
    let started = Instant::now();
    let input = tmp.join("holdout_metrics.csv");
    write_csv(&input, &holdout_rows()).map_err(|e| e.to_string())?;
    let out = cmd_compare(
        &[input],
        &tmp.join("subtraction"),
        CompareMode::Subtraction,
        0,
    )
    .map_err(|e| e.to_string())?;
    let mut worst = (0.0f64, String::new());
    for (table, dataset, comparison, want) in HOLDOUT_DIFFS {
        let row = out
            .subtraction
            .iter()
            .find(|r| r.table == table && r.dataset == dataset && r.comparison == comparison)
            .ok_or(format!("no row {table} {dataset} {comparison}"))?;
        let got = [row.accuracy, row.f1_macro, row.recall, row.auroc];
        for k in 0..4 {
            let dev = (got[k] - want[k]).abs();
            if dev > worst.0 {
                worst = (dev, format!("{dataset} {comparison} {}", METRICS[k]));
            }
        }
    }
    let detail = format!(
        "{} differences, max deviation {:.4} at {} (limit 0.005)",
        HOLDOUT_DIFFS.len() * 4,
        worst.0,
        if worst.1.is_empty() { "-" } else { &worst.1 }
    );
    // rounded two-decimal inputs; allow float noise on top of the rounding band
    if worst.0 > 0.005 + 1e-9 || out.subtraction.len() != HOLDOUT_DIFFS.len() {
        return Err(detail);
    }
    within_time(detail, started, Duration::from_secs(1))
}

/// Fraction of two-sided pooled t-tests rejecting at `alpha` for true effect `d`.
fn simulated_power(d: f64, n: usize, alpha: f64, sims: usize, rng: &mut ChaCha8Rng) -> f64 {
    let df = (2 * n - 2) as f64;
    let crit = StudentsT::new(0.0, 1.0, df)
        .unwrap()
        .inverse_cdf(1.0 - alpha / 2.0);
    let mut reject = 0usize;
    for _ in 0..sims {
        let mut stats = [(0.0, 0.0); 2];
        for (g, shift) in [(0, 0.0), (1, d)] {
            let xs: Vec<f64> = (0..n)
                .map(|_| StandardNormal.sample(rng))
                .map(|x: f64| x + shift)
                .collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let ss = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
            stats[g] = (mean, ss);
        }
        let sp = ((stats[0].1 + stats[1].1) / df).sqrt();
        let t = (stats[1].0 - stats[0].0) / (sp * (2.0 / n as f64).sqrt());
        reject += (t.abs() > crit) as usize;
    }
    reject as f64 / sims as f64
}

fn power_reproduction() -> Check {
    let started = Instant::now();
    let cohorts = [(28, 31), (20, 20), (27, 16)];
    let powers: Vec<f64> = cohorts
        .iter()
        .map(|&(a, b)| power_ttest(0.8, a, b, 0.05))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let lo = powers.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = powers.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let n = required_n(0.8, 0.8, 0.05).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8080);
    let oracle = (10..60)
        .find(|&m| simulated_power(0.8, m, 0.05, 100_000, &mut rng) >= 0.8)
        .ok_or("Monte Carlo oracle found no n below 60")?;
    let detail = format!(
        "powers {:?}, range [{lo:.3}, {hi:.3}] vs reported 0.69-0.85; required n {n}, Monte Carlo {oracle}",
        powers.iter().map(|p| (p * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
    let ok = lo >= 0.69 - 1e-9
        && hi <= 0.87
        && (lo - 0.69).abs() <= 0.02
        && (hi - 0.85).abs() <= 0.02
        && n.abs_diff(26) <= 1
        && n.abs_diff(oracle) <= 1;
    if !ok {
        return Err(detail);
    }
    within_time(detail, started, Duration::from_secs(10))
}

fn wilcoxon_floor() -> Check {
    let a = [0.91, 0.88, 0.93, 0.90, 0.95];
    let b = [0.85, 0.86, 0.80, 0.89, 0.90];
    let r = wilcoxon_signed_rank(&a, &b).map_err(|e| e.to_string())?;
    let flipped = wilcoxon_signed_rank(&b, &a).map_err(|e| e.to_string())?;
    ensure(
        r.p == 0.0625 && flipped.p == 0.0625 && r.method == WilcoxonMethod::Exact,
        format!(
            "n = 5 same-sign differences: p = {} ({:?}), reversed p = {} (want 0.0625 exactly)",
            r.p, r.method, flipped.p
        ),
    )
}

fn random_images(dim: Dim, batch: usize, side: usize, seed: u64) -> Tensor {
    let mut shape = vec![batch, 1];
    shape.extend(vec![side; dim.rank()]);
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new((0..n).map(|_| rng.gen_range(0.0..1.0)).collect(), &shape).unwrap()
}

fn random_graphs(dim: Dim) -> Vec<Graph> {
    let side = if dim == Dim::D2 { 16 } else { 8 };
    let x = random_images(dim, 2, side, 11);
    let per = x.numel() / 2;
    let spatial = &x.shape()[2..];
    (0..2)
        .map(|i| {
            let img = Tensor::new(x.data()[i * per..(i + 1) * per].to_vec(), spatial).unwrap();
            let seg = slic_segment(&img, 12, 0.1, 10).unwrap();
            build_graph(&seg, &img, 3, FeatureSet::WithCentroids).unwrap()
        })
        .collect()
}

fn model_loss(model: &mut Model, input: ModelInput<'_>) -> kanvox_core::Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let logits = model.forward_train(input, &mut rng)?;
    weighted_cross_entropy(&logits, &[0, 1], &[1.0, 1.0])
}

fn model_gradient_error(family: Family, dim: Dim) -> f64 {
    let mut cfg = ModelConfig::published(family, dim);
    cfg.channels = vec![3, 3];
    if family != Family::Gcn {
        cfg.head = vec![3];
    }
    let mut model = build_model(&cfg, 8).unwrap();
    let x = random_images(dim, 2, if dim == Dim::D2 { 16 } else { 8 }, 3);
    let gs = random_graphs(dim);
    let refs: Vec<&Graph> = gs.iter().collect();
    let batch = GraphBatch::new(&refs, true).unwrap();
    let input = || {
        if family == Family::Gcn {
            ModelInput::Graphs(&batch)
        } else {
            ModelInput::Dense(&x)
        }
    };

    model_loss(&mut model, input()).unwrap();
    for block in &mut model.blocks {
        if let Block::Spline { layer, .. } = block {
            let (lo, hi) = layer.grid.domain();
            layer.grid = layer.grid.extend(lo - 1e-9, hi + 1e-9).unwrap();
        }
    }
    model.zero_grad();
    model_loss(&mut model, input()).unwrap().backward().unwrap();
    let analytic: Vec<Vec<f64>> = model
        .parameters()
        .into_iter()
        .map(|(_, t)| t.grad().unwrap())
        .collect();
    let mut worst = 0.0f64;
    for (idx, grad) in analytic.iter().enumerate() {
        let base = model.parameters()[idx].1.clone();
        let numeric = numeric_gradient(base.data(), DEFAULT_STEP, |p| {
            let mut probe = model.clone();
            *probe.parameters_mut().remove(idx).1 = Tensor::param(p.to_vec(), base.shape())?;
            Ok(model_loss(&mut probe, input())?.item())
        })
        .unwrap();
        worst = worst.max(relative_error(grad, &numeric));
    }
    worst
}

/// Largest relative error over `leaves` of `sum(w ⊙ f(leaves))` for fixed random `w`.
fn layer_gradient_error(
    leaves: &[Tensor],
    f: impl Fn(&[Tensor]) -> kanvox_core::Result<Tensor>,
) -> f64 {
    let probe_out = f(leaves).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = Tensor::new(
        (0..probe_out.numel())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
        probe_out.shape(),
    )
    .unwrap();
    let loss = |ts: &[Tensor]| -> kanvox_core::Result<Tensor> { Ok(f(ts)?.mul(&w)?.sum()) };
    loss(leaves).unwrap().backward().unwrap();
    let mut worst = 0.0f64;
    for i in 0..leaves.len() {
        let numeric = numeric_gradient(leaves[i].data(), DEFAULT_STEP, |p| {
            let mut ts: Vec<Tensor> = leaves.iter().map(|t| t.detach()).collect();
            ts[i] = Tensor::new(p.to_vec(), leaves[i].shape())?;
            Ok(loss(&ts)?.item())
        })
        .unwrap();
        worst = worst.max(relative_error(&leaves[i].grad().unwrap(), &numeric));
    }
    worst
}

fn layer_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for dim in [Dim::D2, Dim::D3] {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let side = if dim == Dim::D2 { 6 } else { 4 };
        let images = random_images(dim, 2, side, 4);
        // fresh leaf per check so gradients do not accumulate across checks
        let leaf = || Tensor::param(images.data().to_vec(), images.shape()).unwrap();
        let conv = ConvLayer::new(1, 2, dim, &mut rng).unwrap();
        let err = layer_gradient_error(&[leaf(), conv.kernel.clone(), conv.bias.clone()], |t| {
            ConvLayer::from_parts(t[1].clone(), t[2].clone())?.forward(&t[0])
        });
        out.push((format!("{dim} conv"), err));

        let mut spline =
            SplineConvLayer::new(1, 2, dim, &SplineSettings::default(), &mut rng).unwrap();
        spline.forward_train(&leaf()).unwrap();
        let (lo, hi) = spline.grid.domain();
        spline.grid = spline.grid.extend(lo - 1e-3, hi + 1e-3).unwrap();
        let template = spline.clone();
        let control = spline.grid.control().clone();
        let err = layer_gradient_error(
            &[
                leaf(),
                spline.conv.kernel.clone(),
                spline.conv.bias.clone(),
                control,
                spline.w1.clone(),
                spline.w2.clone(),
            ],
            |t| {
                let mut layer = template.clone();
                layer.conv = ConvLayer::from_parts(t[1].clone(), t[2].clone())?;
                layer.grid.set_control(t[3].clone())?;
                layer.w1 = t[4].clone();
                layer.w2 = t[5].clone();
                layer.forward_train(&t[0])
            },
        );
        out.push((format!("{dim} spline conv"), err));

        let gs = random_graphs(dim);
        let refs: Vec<&Graph> = gs.iter().collect();
        let batch = GraphBatch::new(&refs, true).unwrap();
        let nodes = batch.adjacency.n;
        let gcn = GcnConvLayer::new(4, 3, &mut rng).unwrap();
        let h = Tensor::param(
            (0..nodes * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[nodes, 4],
        )
        .unwrap();
        let err = layer_gradient_error(&[h, gcn.weight.clone()], |t| {
            GcnConvLayer {
                weight: t[1].clone(),
            }
            .pre_activation(&batch.adjacency, &t[0])
        });
        out.push((format!("{dim} gcn conv"), err));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let lin = LinearLayer::new(5, 3, &mut rng).unwrap();
    let x = Tensor::param((0..10).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[2, 5]).unwrap();
    let err = layer_gradient_error(&[x, lin.weight.clone(), lin.bias.clone()], |t| {
        LinearLayer {
            weight: t[1].clone(),
            bias: t[2].clone(),
        }
        .forward(&t[0])
    });
    out.push(("linear".into(), err));
    out
}

fn gradient_integrity() -> Check {
    let started = Instant::now();
    let mut worst_model = (0.0f64, String::new());
    for dim in [Dim::D2, Dim::D3] {
        for family in [Family::Cnn, Family::Convkan, Family::Gcn] {
            let err = model_gradient_error(family, dim);
            if err > worst_model.0 {
                worst_model = (err, format!("{dim} {family}"));
            }
        }
    }
    let layers = layer_errors();
    let worst_layer = layers
        .iter()
        .cloned()
        .fold((0.0f64, String::new()), |a, b| {
            if b.1 > a.0 {
                (b.1, b.0)
            } else {
                a
            }
        });
    let detail = format!(
        "6 models, max relative error {:.1e} ({}, limit 1e-3); {} layers, max {:.1e} ({}, limit 1e-4)",
        worst_model.0,
        worst_model.1,
        layers.len(),
        worst_layer.0,
        worst_layer.1
    );
    if worst_model.0 >= 1e-3 || worst_layer.0 >= 1e-4 {
        return Err(detail);
    }
    within_time(detail, started, Duration::from_secs(120))
}

fn spline_correctness() -> Check {
    let started = Instant::now();
    let grid = make_grid(6, 3, -1.0, 1.0, 1, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| e.to_string())?;
    let unity = (0..200)
        .map(|i| -1.0 + 2.0 * i as f64 / 199.0)
        .map(|x| (grid.basis_eval(x).unwrap().values.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let identity = SplineGrid::identity(6, 3, -1.0, 1.0, 1).map_err(|e| e.to_string())?;
    let xs: Vec<f64> = (0..=1000).map(|i| -1.0 + 2.0 * i as f64 / 1000.0).collect();
    let y = identity
        .eval(&Tensor::from_vec(xs.clone()))
        .map_err(|e| e.to_string())?;
    let linear = xs
        .iter()
        .zip(y.data())
        .map(|(x, v)| (x - v).abs())
        .fold(0.0, f64::max);
    let mut drift = 0.0f64;
    for seed in 0..20 {
        let g = make_grid(6, 3, -1.0, 1.0, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (lo, hi) in [(-1.0, 1.2), (-1.3, 0.5), (-1.1, 1.1), (-2.5, 3.0)] {
            let wide = g.extend(lo, hi).unwrap();
            let pts: Vec<f64> = (0..1000).map(|i| -1.0 + 2.0 * i as f64 / 999.0).collect();
            let old: Vec<f64> = pts.iter().map(|&x| g.value_at(0, x).unwrap()).collect();
            let new: Vec<f64> = pts.iter().map(|&x| wide.value_at(0, x).unwrap()).collect();
            let range = old.iter().cloned().fold(f64::MIN, f64::max)
                - old.iter().cloned().fold(f64::MAX, f64::min);
            let sup = old
                .iter()
                .zip(&new)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            drift = drift.max(sup / range);
        }
    }
    let detail = format!(
        "partition of unity {unity:.1e} (limit 1e-9), linear precision {linear:.1e} (limit 1e-9), \
         extension drift {:.2}% of range (limit 2%)",
        drift * 100.0
    );
    if unity >= 1e-9 || linear >= 1e-9 || drift > 0.02 {
        return Err(detail);
    }
    within_time(detail, started, Duration::from_secs(5))
}

/// Two-sided signed-rank p by enumerating all 2^n sign assignments.
fn enumerated_p(d: &[f64]) -> f64 {
    let nz: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let n = nz.len();
    let doubled: Vec<i64> = nz
        .iter()
        .map(|x| {
            let less = nz.iter().filter(|y| y.abs() < x.abs()).count() as i64;
            let eq = nz.iter().filter(|y| y.abs() == x.abs()).count() as i64;
            2 * less + eq + 1
        })
        .collect();
    let observed: i64 = doubled
        .iter()
        .zip(&nz)
        .filter(|(_, x)| **x > 0.0)
        .map(|(r, _)| r)
        .sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        let t: i64 = (0..n)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| doubled[i])
            .sum();
        le += (t <= observed) as u64;
        ge += (t >= observed) as u64;
    }
    (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0)
}

fn pair_count_auroc(scores: &[f64], labels: &[usize]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn oracle_equivalences() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut wilcoxon_cases = 0;
    while wilcoxon_cases < 100 {
        let n = rng.gen_range(3..=10);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        if d.iter().filter(|v| **v != 0.0).count() < 3 {
            continue;
        }
        let r = wilcoxon_signed_rank(&a, &b).map_err(|e| e.to_string())?;
        if r.p != enumerated_p(&d) {
            return Err(format!(
                "Wilcoxon mismatch on {a:?} vs {b:?}: {} vs {}",
                r.p,
                enumerated_p(&d)
            ));
        }
        wilcoxon_cases += 1;
    }
    for _ in 0..50 {
        let n = rng.gen_range(4..40);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();
        let got = auroc(&scores, &labels).map_err(|e| e.to_string())?;
        if got != pair_count_auroc(&scores, &labels) {
            return Err(format!(
                "AUROC mismatch: {got} vs {}",
                pair_count_auroc(&scores, &labels)
            ));
        }
    }
    let mut covered = 0;
    for sim in 0..500u64 {
        let xs: Vec<f64> = (0..40)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.7 + 0.1 * z
            })
            .collect();
        let (lo, hi) = bootstrap_ci(&xs, 0.95, 2000, sim).map_err(|e| e.to_string())?;
        covered += (lo <= 0.7 && 0.7 <= hi) as usize;
    }
    let coverage = covered as f64 / 500.0;
    let detail = format!(
        "Wilcoxon 100/100 exact, AUROC 50/50 exact, bootstrap coverage {:.1}% (95 ± 3)",
        coverage * 100.0
    );
    if (coverage - 0.95).abs() > 0.03 {
        return Err(detail);
    }
    within_time(detail, started, Duration::from_secs(120))
}

fn random_manifest(name: &str, rng: &mut ChaCha8Rng) -> DatasetManifest {
    let mut subjects = Vec::new();
    for label in [Label::Control, Label::Pd] {
        let groups = rng.gen_range(5..=25);
        for g in 0..groups {
            let gid = format!("{label:?}-g{g}");
            for s in 0..rng.gen_range(1..=3) {
                subjects.push(SubjectRecord {
                    subject_id: format!("{gid}-s{s}"),
                    label,
                    path: format!("{gid}-s{s}.kvt"),
                    group_id: gid.clone(),
                });
            }
        }
    }
    DatasetManifest {
        dataset_name: name.into(),
        subjects,
        center_slice: None,
        voxel_size: [1.0; 3],
        root: PathBuf::new(),
    }
}

/// Subject- and group-level disjointness plus test coverage of `expected`.
fn leakage(
    plan: &FoldPlan,
    manifests: &[&DatasetManifest],
    expected: &BTreeSet<SubjectKey>,
) -> Result<(), String> {
    plan.audit(manifests).map_err(|e| e.to_string())?;
    let group: BTreeMap<SubjectKey, String> = manifests
        .iter()
        .flat_map(|m| {
            m.subjects.iter().map(|s| {
                (
                    SubjectKey {
                        dataset: m.dataset_name.clone(),
                        subject: s.subject_id.clone(),
                    },
                    format!("{}/{}", m.dataset_name, s.group_id),
                )
            })
        })
        .collect();
    let mut tested = BTreeSet::new();
    for fold in &plan.folds {
        let test: BTreeSet<&SubjectKey> = fold.test.iter().collect();
        let fit: BTreeSet<&SubjectKey> = fold.train.iter().chain(&fold.validation).collect();
        if fold.train.iter().any(|k| fold.validation.contains(k)) {
            return Err(format!("{}: train and validation overlap", fold.name));
        }
        if test.iter().any(|k| fit.contains(k)) {
            return Err(format!("{}: subject in both test and training", fold.name));
        }
        let test_groups: BTreeSet<&String> = test.iter().map(|k| &group[*k]).collect();
        if fit.iter().any(|k| test_groups.contains(&group[*k])) {
            return Err(format!("{}: group in both test and training", fold.name));
        }
        for k in &fold.test {
            if !tested.insert(k.clone()) {
                return Err(format!("{k} tested twice"));
            }
        }
    }
    if &tested != expected {
        return Err(format!(
            "{} subjects tested, {} expected",
            tested.len(),
            expected.len()
        ));
    }
    Ok(())
}

fn keys(m: &DatasetManifest) -> BTreeSet<SubjectKey> {
    m.subjects
        .iter()
        .map(|s| SubjectKey {
            dataset: m.dataset_name.clone(),
            subject: s.subject_id.clone(),
        })
        .collect()
}

fn protocol_integrity() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut subjects = 0;
    for i in 0..100u64 {
        let m = random_manifest("cohort", &mut rng);
        subjects += m.subjects.len();
        let kfold = stratified_group_kfold(&m, 5, i).map_err(|e| e.to_string())?;
        if kfold.folds.len() != 5 {
            return Err(format!("manifest {i}: {} k-fold folds", kfold.folds.len()));
        }
        leakage(&kfold, &[&m], &keys(&m)).map_err(|e| format!("manifest {i} k-fold: {e}"))?;
        let loo = loocv_plan(&m, i).map_err(|e| e.to_string())?;
        if loo.folds.len() != m.subjects.len() || loo.folds.iter().any(|f| f.test.len() != 1) {
            return Err(format!(
                "manifest {i}: {} LOOCV folds for {} subjects",
                loo.folds.len(),
                m.subjects.len()
            ));
        }
        leakage(&loo, &[&m], &keys(&m)).map_err(|e| format!("manifest {i} LOOCV: {e}"))?;
    }
    let mut rotations = 0;
    for i in 0..20u64 {
        let ms: Vec<DatasetManifest> = ["a", "b", "c"]
            .iter()
            .map(|n| random_manifest(n, &mut rng))
            .collect();
        let refs: Vec<&DatasetManifest> = ms.iter().collect();
        let plan = holdout_plan(&refs, i).map_err(|e| e.to_string())?;
        if plan.folds.len() != 3 {
            return Err(format!("hold-out emitted {} rotations", plan.folds.len()));
        }
        let all: BTreeSet<SubjectKey> = ms.iter().flat_map(keys).collect();
        leakage(&plan, &refs, &all).map_err(|e| format!("hold-out: {e}"))?;
        for (fold, m) in plan.folds.iter().zip(&ms) {
            if fold.test.iter().cloned().collect::<BTreeSet<_>>() != keys(m) {
                return Err(format!(
                    "{}: test set is not dataset {}",
                    fold.name, m.dataset_name
                ));
            }
        }
        rotations += plan.folds.len();
    }
    let detail = format!(
        "100 manifests ({subjects} subjects): 5 folds each, LOOCV one fold per subject, no leakage; \
         hold-out {rotations} rotations over 20 triples"
    );
    within_time(detail, started, Duration::from_secs(10))
}

fn synth(dir: &Path, n: usize, effect: f64, size: usize, seed: u64) -> Result<PathBuf, String> {
    let mut spec = SynthSpec::new(n, effect, 0.05, seed);
    spec.size = size;
    cmd_synth(&spec, dir).map_err(|e| format!("{e:#}"))
}

fn desk_config(manifest: &Path, output: &Path, max_epochs: usize) -> ExperimentConfig {
    let patience = 8.min(max_epochs - 1);
    let text = format!(
        r#"{{
            "datasets": [{manifest:?}],
            "models": [
                {{"family": "cnn", "dim": "2d", "channels": [8, 16, 32, 64], "head": [32]}},
                {{"family": "convkan", "dim": "2d", "channels": [8, 16, 32, 64], "head": [32]}},
                {{"family": "gcn", "dim": "2d"}}
            ],
            "protocol": "isolated_cv",
            "folds": 5,
            "train": {{"learning_rate": 0.001, "max_epochs": {max_epochs}, "patience": {patience}, "batch_size": 16}},
            "preprocess": {{"slice_count": 8, "slice_size": 32, "volume_size": 32}},
            "graph": {{"segments": 64}},
            "output": {output:?},
            "seed": 1
        }}"#
    );
    serde_json::from_str(&text).expect("desk config parses")
}

fn jobs() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn pooled_auroc(run: &Path) -> Result<BTreeMap<String, f64>, String> {
    let rows: Vec<SummaryRow> = read_csv(&run.join("summary.csv")).map_err(|e| format!("{e:#}"))?;
    Ok(rows
        .into_iter()
        .filter(|r| r.mode == "pooled" && r.metric == "auroc")
        .map(|r| (r.model, r.value))
        .collect())
}

fn end_to_end(tmp: &Path) -> Check {
    let started = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for (effect, tag) in [(0.5, "effect"), (0.0, "null")] {
        let manifest = synth(&tmp.join(format!("{tag}-data")), 60, effect, 64, 7)?;
        let cfg = desk_config(&manifest, &tmp.join(format!("{tag}-run")), 30);
        cmd_run(&cfg, jobs()).map_err(|e| format!("{e:#}"))?;
        let aurocs = pooled_auroc(&cfg.output)?;
        if aurocs.len() != 3 {
            return Err(format!("expected 3 models, got {aurocs:?}"));
        }
        for (model, a) in &aurocs {
            let pass = if effect > 0.0 {
                *a >= if model.contains("GCN") { 0.70 } else { 0.90 }
            } else {
                (0.3..=0.7).contains(a)
            };
            ok &= pass;
            parts.push(format!("{model} {a:.3} at effect {effect}"));
        }
    }
    let detail = format!("subject-level AUROC: {}", parts.join(", "));
    if !ok {
        return Err(detail);
    }
    within_time(detail, started, Duration::from_secs(30 * 60))
}

fn file_hash(path: &Path) -> Result<String, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn determinism(tmp: &Path) -> Check {
    let manifest = synth(&tmp.join("det-data"), 20, 0.5, 32, 3)?;
    let mut hashes = Vec::new();
    for (i, jobs) in [1, 2].into_iter().enumerate() {
        let cfg = desk_config(&manifest, &tmp.join(format!("det-run{i}")), 3);
        cmd_run(&cfg, jobs).map_err(|e| format!("{e:#}"))?;
        hashes.push(file_hash(&cfg.output.join("metrics.csv"))?);
    }
    ensure(
        hashes[0] == hashes[1],
        format!(
            "metrics.csv sha256 {} vs {} (worker threads 1 and 2)",
            &hashes[0][..16],
            &hashes[1][..16]
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let checks: Vec<Named<'_>> = vec![
        (
            "CV tables reproduce from hold-out means",
            Box::new(cv_reproduction),
        ),
        (
            "hold-out differences by subtraction",
            Box::new(|| subtraction_reproduction(tmp.path())),
        ),
        (
            "power analysis over the three cohorts",
            Box::new(power_reproduction),
        ),
        (
            "Wilcoxon exact floor at five folds",
            Box::new(wilcoxon_floor),
        ),
        ("gradient integrity", Box::new(gradient_integrity)),
        ("spline correctness", Box::new(spline_correctness)),
        ("oracle equivalences", Box::new(oracle_equivalences)),
        ("protocol integrity", Box::new(protocol_integrity)),
        (
            "end-to-end on synthetic phantoms",
            Box::new(|| end_to_end(tmp.path())),
        ),
        (
            "determinism of metrics.csv",
            Box::new(|| determinism(tmp.path())),
        ),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.into_iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
