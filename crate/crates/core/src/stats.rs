//! Classification metrics and the statistical comparison toolkit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

pub const BOOTSTRAP_REPLICATES: usize = 2000;
/// Largest sample (after dropping zero differences) tested with the exact
/// signed-rank distribution.
pub const WILCOXON_EXACT_MAX: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub f1_micro: f64,
    /// Micro-averaged recall, identical to accuracy for a binary task.
    pub recall: f64,
    /// NaN when only one class is present.
    pub auroc: f64,
}

fn check_binary(scores: &[f64], labels: &[usize]) -> Result<()> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Input(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Input(format!("label {l} is not binary")));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Input(format!("non-finite score {s}")));
    }
    Ok(())
}

/// Metrics at threshold 0.5 on the class-1 probability, plus midrank AUROC.
/// Fails with an undefined error when only one class is present.
pub fn classification_metrics(scores: &[f64], labels: &[usize]) -> Result<ClassificationMetrics> {
    let m = threshold_metrics(scores, labels)?;
    Ok(ClassificationMetrics {
        auroc: auroc(scores, labels)?,
        ..m
    })
}

/// Like [`classification_metrics`], reporting AUROC as NaN when undefined
/// (single-subject folds).
pub fn classification_metrics_lenient(
    scores: &[f64],
    labels: &[usize],
) -> Result<ClassificationMetrics> {
    let m = threshold_metrics(scores, labels)?;
    let auroc = match auroc(scores, labels) {
        Ok(a) => a,
        Err(Error::Undefined(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok(ClassificationMetrics { auroc, ..m })
}

fn threshold_metrics(scores: &[f64], labels: &[usize]) -> Result<ClassificationMetrics> {
    check_binary(scores, labels)?;
    let mut conf = [[0usize; 2]; 2];
    for (&s, &l) in scores.iter().zip(labels) {
        conf[l][(s >= 0.5) as usize] += 1;
    }
    let n = labels.len() as f64;
    let accuracy = (conf[0][0] + conf[1][1]) as f64 / n;
    let f1 = |c: usize| {
        let tp = conf[c][c];
        let fp = conf[1 - c][c];
        let fn_ = conf[c][1 - c];
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    Ok(ClassificationMetrics {
        accuracy,
        f1_macro: 0.5 * (f1(0) + f1(1)),
        f1_micro: accuracy,
        recall: accuracy,
        auroc: f64::NAN,
    })
}

/// Midrank ranks (1-based) of `values`.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney AUROC with midranks: the probability that a random positive
/// outscores a random negative, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_binary(scores, labels)?;
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::Undefined("AUROC needs both classes".into()));
    }
    let ranks = midranks(scores);
    let r1: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n1 * n0) as f64)
}

/// ROC operating points from (0, 0) to (1, 1), one per distinct threshold.
pub fn roc_curve(scores: &[f64], labels: &[usize]) -> Result<Vec<(f64, f64)>> {
    check_binary(scores, labels)?;
    let p = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n = labels.len() as f64 - p;
    if p == 0.0 || n == 0.0 {
        return Err(Error::Undefined("ROC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for (k, &i) in idx.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        if k + 1 == idx.len() || scores[idx[k + 1]] != scores[i] {
            pts.push((fp / n, tp / p));
        }
    }
    Ok(pts)
}

/// Linear-interpolated quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(
    values: &[f64],
    level: f64,
    replicates: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Input("bootstrap of an empty sample".into()));
    }
    bootstrap_percentile(values.len(), level, replicates, seed, |idx| {
        Some(idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64)
    })
}

/// Percentile bootstrap interval of an arbitrary statistic of `n` items.
/// `statistic` receives resampled indices; replicates where it returns
/// `None` (e.g. a single-class resample) are discarded.
pub fn bootstrap_percentile(
    n: usize,
    level: f64,
    replicates: usize,
    seed: u64,
    mut statistic: impl FnMut(&[usize]) -> Option<f64>,
) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::Input("bootstrap of an empty sample".into()));
    }
    if replicates < 100 {
        return Err(Error::Config(format!(
            "need at least 100 replicates, got {replicates}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0usize; n];
    let mut stats = Vec::with_capacity(replicates);
    for _ in 0..replicates {
        for slot in idx.iter_mut() {
            *slot = rng.gen_range(0..n);
        }
        if let Some(v) = statistic(&idx) {
            stats.push(v);
        }
    }
    if stats.is_empty() {
        return Err(Error::Undefined(
            "statistic undefined on every bootstrap resample".into(),
        ));
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((
        quantile_sorted(&stats, tail),
        quantile_sorted(&stats, 1.0 - tail),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub p: f64,
    /// Sum of ranks of the positive differences.
    pub statistic: f64,
    /// Non-zero differences used.
    pub n: usize,
    pub method: WilcoxonMethod,
}

impl WilcoxonResult {
    pub fn degenerate(&self) -> bool {
        self.method == WilcoxonMethod::Degenerate
    }
}

/// Exact null distribution of twice the positive-rank sum, as counts over
/// all `2^n` sign assignments. `doubled` holds twice each (mid)rank.
pub fn signed_rank_counts(doubled: &[usize]) -> Vec<u64> {
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

/// Two-sided Wilcoxon signed-rank test of paired samples.
///
/// Zero differences are dropped. Up to [`WILCOXON_EXACT_MAX`] remaining pairs
/// the p-value comes from the exact (tie-aware) permutation distribution,
/// `min(1, 2 · min(P(T ≤ t), P(T ≥ t)))`; above that from the normal
/// approximation with tie and continuity corrections. All-zero differences
/// give `p = 1` flagged degenerate.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "paired samples of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if let Some(v) = a.iter().chain(b).find(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite value {v}")));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Ok(WilcoxonResult {
            p: 1.0,
            statistic: 0.0,
            n: 0,
            method: WilcoxonMethod::Degenerate,
        });
    }
    let n = diffs.len();
    if n < 3 {
        return Err(Error::Input(format!(
            "{n} non-zero differences; at least 3 needed"
        )));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let t_plus: f64 = ranks
        .iter()
        .zip(&diffs)
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| r)
        .sum();
    if n <= WILCOXON_EXACT_MAX {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let observed = (2.0 * t_plus).round() as usize;
        let counts = signed_rank_counts(&doubled);
        let total = 2f64.powi(n as i32);
        let lower: u64 = counts[..=observed].iter().sum();
        let upper: u64 = counts[observed..].iter().sum();
        let p = (2.0 * lower.min(upper) as f64 / total).min(1.0);
        return Ok(WilcoxonResult {
            p,
            statistic: t_plus,
            n,
            method: WilcoxonMethod::Exact,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((t_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let p = (2.0 * standard_normal().sf(z)).min(1.0);
    Ok(WilcoxonResult {
        p,
        statistic: t_plus,
        n,
        method: WilcoxonMethod::Normal,
    })
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapiroWilk {
    pub w: f64,
    pub p: f64,
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

/// Shapiro–Wilk W and p-value by Royston's AS R94 approximation.
/// Zero-variance samples fail with a degenerate-batch error.
pub fn shapiro_wilk(x: &[f64]) -> Result<ShapiroWilk> {
    let n = x.len();
    if !(3..=5000).contains(&n) {
        return Err(Error::Input(format!(
            "Shapiro-Wilk needs 3 ≤ n ≤ 5000, got {n}"
        )));
    }
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite value {v}")));
    }
    let mut xs = x.to_vec();
    xs.sort_by(f64::total_cmp);
    if xs[n - 1] - xs[0] < 1e-19 * xs[n - 1].abs().max(1.0) {
        return Err(Error::DegenerateBatch("zero variance sample".into()));
    }
    let nn2 = n / 2;
    let an = n as f64;
    let mut a = vec![0.0; nn2];
    let norm = standard_normal();
    if n == 3 {
        a[0] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056];
        const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
        let m: Vec<f64> = (1..=nn2)
            .map(|i| norm.inverse_cdf((i as f64 - 0.375) / (an + 0.25)))
            .collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / an.sqrt();
        let a1 = poly(&C1, rsn) - m[0] / ssumm2;
        let (first, fac) = if n > 5 {
            let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
            a[1] = a2;
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1])
                / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2))
                .sqrt();
            (2, fac)
        } else {
            (
                1,
                ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt(),
            )
        };
        a[0] = a1;
        for i in first..nn2 {
            a[i] = -m[i] / fac;
        }
    }
    let mean = xs.iter().sum::<f64>() / an;
    let ssq: f64 = xs.iter().map(|v| (v - mean) * (v - mean)).sum();
    let num: f64 = (0..nn2).map(|i| a[i] * (xs[n - 1 - i] - xs[i])).sum();
    let w = (num * num / ssq).min(1.0);

    if n == 3 {
        let p = (6.0 / std::f64::consts::PI) * (w.sqrt().asin() - std::f64::consts::PI / 3.0);
        return Ok(ShapiroWilk {
            w,
            p: p.clamp(0.0, 1.0),
        });
    }
    let w1 = (1.0 - w).ln();
    let (m, s, y) = if n <= 11 {
        let gamma = poly(&[-2.273, 0.459], an);
        if w1 >= gamma {
            return Ok(ShapiroWilk { w, p: 1e-99 });
        }
        let y = -(gamma - w1).ln();
        let m = poly(&[0.544, -0.39978, 0.025054, -6.714e-4], an);
        let s = poly(&[1.3822, -0.77857, 0.062767, -0.0020322], an).exp();
        (m, s, y)
    } else {
        let xx = an.ln();
        let m = poly(&[-1.5861, -0.31082, -0.083751, 0.0038915], xx);
        let s = poly(&[-0.4803, -0.082676, 0.0030302], xx).exp();
        (m, s, w1)
    };
    Ok(ShapiroWilk {
        w,
        p: norm.sf((y - m) / s),
    })
}

/// Benjamini–Hochberg adjusted p-values in the input order.
pub fn bh_fdr(p: &[f64]) -> Result<Vec<f64>> {
    if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Input(format!("p-value {v} outside [0, 1]")));
    }
    let m = p.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in idx.iter().enumerate().rev() {
        running = running.min(p[i] * m as f64 / (rank + 1) as f64);
        out[i] = running.min(1.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    pub d: f64,
    /// Set when the pooled SD is zero but the means differ (`d = ±∞`).
    pub infinite: bool,
}

/// Cohen's d with the pooled (n − 1)-denominator standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<EffectSize> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Input(
            "Cohen's d needs at least two values per sample".into(),
        ));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ss = |v: &[f64], m: f64| v.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    let (ma, mb) = (mean(a), mean(b));
    let pooled = ((ss(a, ma) + ss(b, mb)) / (a.len() + b.len() - 2) as f64).sqrt();
    let diff = ma - mb;
    if pooled == 0.0 {
        return Ok(if diff == 0.0 {
            EffectSize {
                d: 0.0,
                infinite: false,
            }
        } else {
            EffectSize {
                d: diff.signum() * f64::INFINITY,
                infinite: true,
            }
        });
    }
    Ok(EffectSize {
        d: diff / pooled,
        infinite: false,
    })
}

/// `100 · population SD / mean`.
pub fn coefficient_of_variation(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Input("coefficient of variation of nothing".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(Error::Undefined(
            "coefficient of variation with zero mean".into(),
        ));
    }
    if values.iter().all(|v| *v == values[0]) {
        return Ok(0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(100.0 * var.sqrt() / mean)
}

/// Simpson's rule with `intervals` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let h = (b - a) / intervals as f64;
    let mut s = f(a) + f(b);
    for i in 1..intervals {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Power of the two-sided two-sample t-test at effect size `d`.
///
/// The noncentral t probability `P(|T'| > t_crit)` is integrated over the
/// chi-square variable: `T' = (Z + δ) / sqrt(V / ν)`.
pub fn power_ttest(d: f64, n1: usize, n2: usize, alpha: f64) -> Result<f64> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::Config(format!(
            "effect size must be positive, got {d}"
        )));
    }
    if n1 < 2 || n2 < 2 {
        return Err(Error::Config(format!("group sizes {n1}/{n2} below 2")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} outside (0, 1)")));
    }
    let df = (n1 + n2 - 2) as f64;
    let delta = d * ((n1 * n2) as f64 / (n1 + n2) as f64).sqrt();
    let t = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(e.to_string()))?;
    let crit = t.inverse_cdf(1.0 - alpha / 2.0);
    let chi = ChiSquared::new(df).map_err(|e| Error::Numeric(e.to_string()))?;
    let z = standard_normal();
    let upper = df + 40.0 * (2.0 * df).sqrt() + 40.0;
    // substitute v = u² to remove the v^(ν/2 − 1) endpoint behaviour
    let integrand = |u: f64| {
        let v = u * u;
        if v == 0.0 {
            return 0.0;
        }
        let s = (v / df).sqrt();
        let tail = z.sf(crit * s - delta) + z.cdf(-crit * s - delta);
        tail * chi.pdf(v) * 2.0 * u
    };
    let p = simpson(integrand, 0.0, upper.sqrt(), 20_000);
    Ok(p.clamp(0.0, 1.0))
}

/// Smallest equal group size whose power reaches `target`.
pub fn required_n(d: f64, target: f64, alpha: f64) -> Result<usize> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Config(format!(
            "target power {target} outside (0, 1)"
        )));
    }
    if !(d > 0.0) {
        return Err(Error::Config(format!(
            "power {target} unattainable at effect size {d}"
        )));
    }
    for n in 2..=1_000_000 {
        if power_ttest(d, n, n, alpha)? >= target {
            return Ok(n);
        }
    }
    Err(Error::Config(format!(
        "power {target} unattainable below a million per group"
    )))
}

/// One paired model-vs-model comparison on a metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub comparison: String,
    pub first: String,
    pub second: String,
    pub dataset: String,
    pub metric: String,
    pub n: usize,
    pub mean_difference: f64,
    pub p_raw: f64,
    pub p_corrected: f64,
    pub degenerate: bool,
    pub cohens_d: f64,
    pub d_infinite: bool,
    pub ci_low: f64,
    pub ci_high: f64,
    pub method: WilcoxonMethod,
}

/// Wilcoxon test, Cohen's d and a bootstrap CI of the mean paired
/// difference `a − b`. `p_corrected` is left equal to `p_raw`; see
/// [`correct_family`].
pub fn compare_paired(
    first: &str,
    second: &str,
    dataset: &str,
    metric: &str,
    a: &[f64],
    b: &[f64],
    seed: u64,
) -> Result<ComparisonResult> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Input(format!(
            "{first} vs {second} on {metric}: {} and {} paired values",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let w = wilcoxon_signed_rank(a, b)?;
    let d = if a.len() >= 2 {
        cohens_d(a, b)?
    } else {
        EffectSize {
            d: f64::NAN,
            infinite: false,
        }
    };
    let (ci_low, ci_high) = bootstrap_ci(&diffs, 0.95, BOOTSTRAP_REPLICATES, seed)?;
    Ok(ComparisonResult {
        comparison: format!("{first} vs {second}"),
        first: first.into(),
        second: second.into(),
        dataset: dataset.into(),
        metric: metric.into(),
        n: a.len(),
        mean_difference: diffs.iter().sum::<f64>() / diffs.len() as f64,
        p_raw: w.p,
        p_corrected: w.p,
        degenerate: w.degenerate(),
        cohens_d: d.d,
        d_infinite: d.infinite,
        ci_low,
        ci_high,
        method: w.method,
    })
}

/// Replaces `p_corrected` by Benjamini–Hochberg values over the whole family.
pub fn correct_family(results: &mut [ComparisonResult]) -> Result<()> {
    let raw: Vec<f64> = results.iter().map(|r| r.p_raw).collect();
    for (r, q) in results.iter_mut().zip(bh_fdr(&raw)?) {
        r.p_corrected = q;
    }
    Ok(())
}
