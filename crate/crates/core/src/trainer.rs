//! Optimization, early stopping, checkpoints and the validation protocols.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::{Graph, GraphBatch};
use crate::layers::{build_model, Dim, Model, ModelConfig, ModelInput};
use crate::preprocess::{DatasetManifest, Label};
use crate::tensor::nn::{softmax_rows, weighted_cross_entropy};
use crate::tensor::{read_blob, write_blob, BlobDtype, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Fraction of training subjects held back for early stopping.
pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn published(dim: Dim) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            patience: 15,
            max_epochs: 100,
            batch_size: if dim == Dim::D2 { 64 } else { 1 },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {}", self.weight_decay)));
        }
        if self.patience == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "patience, max_epochs and batch_size must be positive".into(),
            ));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// Adam with coupled L2 weight decay. Moments are keyed by parameter path.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Adam {
        Adam {
            learning_rate,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its accumulated gradient.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, p) in params {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in {name}[{i}]"
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            if m.len() != p.numel() {
                return Err(Error::Dimension(format!(
                    "{name}: optimizer state for {} values, parameter has {}",
                    m.len(),
                    p.numel()
                )));
            }
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                let g = grad[i] + self.weight_decay * data[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                data[i] -= self.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
            *p = Tensor::param(data, p.shape())?;
        }
        Ok(())
    }
}

/// Class weights inversely proportional to the counts, scaled to mean one.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.len() != 2 {
        return Err(Error::Config(format!(
            "{} class counts for a binary task",
            counts.len()
        )));
    }
    if counts.contains(&0) {
        return Err(Error::Config(format!(
            "class counts {counts:?} include an empty class"
        )));
    }
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.iter().map(|w| w / mean).collect())
}

pub fn weighted_ce_loss(
    logits: &Tensor,
    labels: &[usize],
    class_counts: &[usize],
) -> Result<Tensor> {
    weighted_cross_entropy(logits, labels, &class_weights(class_counts)?)
}

/// Dataset-qualified subject identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubjectKey {
    pub dataset: String,
    pub subject: String,
}

impl fmt::Display for SubjectKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.dataset, self.subject)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub name: String,
    pub train: Vec<SubjectKey>,
    pub validation: Vec<SubjectKey>,
    pub test: Vec<SubjectKey>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    IsolatedCv,
    Loocv,
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub protocol: Protocol,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// Checks that train, validation and test are disjoint in every fold,
    /// both by subject and by group.
    pub fn audit(&self, manifests: &[&DatasetManifest]) -> Result<()> {
        let group_of: BTreeMap<SubjectKey, String> = manifests
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
        for fold in &self.folds {
            let mut seen_subject = BTreeMap::new();
            let mut seen_group = BTreeMap::new();
            for (part, keys) in [
                ("train", &fold.train),
                ("validation", &fold.validation),
                ("test", &fold.test),
            ] {
                for key in keys {
                    if let Some(prev) = seen_subject.insert(key.clone(), part) {
                        return Err(Error::Contract(format!(
                            "{}: subject {key} in both {prev} and {part}",
                            fold.name
                        )));
                    }
                    let group = group_of.get(key).ok_or_else(|| {
                        Error::Contract(format!("{}: unknown subject {key}", fold.name))
                    })?;
                    if let Some(prev) = seen_group.insert(group.clone(), part) {
                        if prev != part {
                            return Err(Error::Contract(format!(
                                "{}: group {group} split across {prev} and {part}",
                                fold.name
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

struct Group {
    id: String,
    label: Label,
    members: Vec<SubjectKey>,
}

fn groups_of(manifest: &DatasetManifest) -> Result<Vec<Group>> {
    let mut by_id: BTreeMap<&str, Group> = BTreeMap::new();
    for s in &manifest.subjects {
        let key = SubjectKey {
            dataset: manifest.dataset_name.clone(),
            subject: s.subject_id.clone(),
        };
        let g = by_id.entry(&s.group_id).or_insert_with(|| Group {
            id: s.group_id.clone(),
            label: s.label,
            members: Vec::new(),
        });
        if g.label != s.label {
            return Err(Error::Input(format!("group {} mixes labels", s.group_id)));
        }
        g.members.push(key);
    }
    Ok(by_id.into_values().collect())
}

fn plan_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Moves about [`VALIDATION_FRACTION`] of the training groups of each class
/// (at least one) to validation. A class keeps at least one training group;
/// when it has only one, nothing of that class is carved.
fn carve_validation(
    train: Vec<&Group>,
    rng: &mut ChaCha8Rng,
) -> (Vec<SubjectKey>, Vec<SubjectKey>) {
    let mut keep = Vec::new();
    let mut val = Vec::new();
    for label in [Label::Control, Label::Pd] {
        let mut class: Vec<&Group> = train.iter().copied().filter(|g| g.label == label).collect();
        class.shuffle(rng);
        let subjects: usize = class.iter().map(|g| g.members.len()).sum();
        let target = ((subjects as f64 * VALIDATION_FRACTION).round() as usize).max(1);
        let mut taken = 0;
        for (i, g) in class.iter().enumerate() {
            if taken < target && i + 1 < class.len() {
                taken += g.members.len();
                val.extend(g.members.iter().cloned());
            } else {
                keep.extend(g.members.iter().cloned());
            }
        }
    }
    keep.sort();
    val.sort();
    (keep, val)
}

/// Stratified group k-fold: groups of each class are shuffled, then placed
/// greedily (largest first) in the fold with the fewest subjects of that
/// class, ties broken by fold size then index.
pub fn stratified_group_kfold(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k = {k}; at least 2 folds needed")));
    }
    if manifest.subjects.len() < k {
        return Err(Error::Config(format!(
            "{} subjects cannot fill {k} folds",
            manifest.subjects.len()
        )));
    }
    let groups = groups_of(manifest)?;
    if groups.len() < k {
        return Err(Error::Config(format!(
            "{} groups cannot fill {k} folds",
            groups.len()
        )));
    }
    let mut rng = plan_rng(seed, 0);
    let mut assignment: Vec<Vec<&Group>> = vec![Vec::new(); k];
    let mut class_count = vec![[0usize; 2]; k];
    let mut total = vec![0usize; k];
    for label in [Label::Control, Label::Pd] {
        let mut class: Vec<&Group> = groups.iter().filter(|g| g.label == label).collect();
        class.shuffle(&mut rng);
        class.sort_by_key(|g| std::cmp::Reverse(g.members.len()));
        for g in class {
            let f = (0..k)
                .min_by_key(|&f| (class_count[f][label.index()], total[f], f))
                .expect("k > 0");
            class_count[f][label.index()] += g.members.len();
            total[f] += g.members.len();
            assignment[f].push(g);
        }
    }
    let folds = (0..k)
        .map(|f| {
            let mut test: Vec<SubjectKey> = assignment[f]
                .iter()
                .flat_map(|g| g.members.iter().cloned())
                .collect();
            test.sort();
            let rest: Vec<&Group> = (0..k)
                .filter(|&o| o != f)
                .flat_map(|o| assignment[o].iter().copied())
                .collect();
            let (train, validation) = carve_validation(rest, &mut plan_rng(seed, 1 + f as u64));
            Fold {
                name: format!("fold{f}"),
                train,
                validation,
                test,
            }
        })
        .collect();
    Ok(FoldPlan {
        protocol: Protocol::IsolatedCv,
        folds,
    })
}

/// One fold per subject, in manifest order; validation carved from the rest.
pub fn loocv_plan(manifest: &DatasetManifest, seed: u64) -> Result<FoldPlan> {
    if manifest.subjects.len() < 3 {
        return Err(Error::Config(format!(
            "LOOCV needs at least 3 subjects, got {}",
            manifest.subjects.len()
        )));
    }
    let groups = groups_of(manifest)?;
    let folds = manifest
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let test = SubjectKey {
                dataset: manifest.dataset_name.clone(),
                subject: s.subject_id.clone(),
            };
            // the left-out subject's whole group leaves training
            let rest: Vec<&Group> = groups.iter().filter(|g| g.id != s.group_id).collect();
            let (train, validation) = carve_validation(rest, &mut plan_rng(seed, 1 + i as u64));
            Fold {
                name: format!("loo{i:03}"),
                train,
                validation,
                test: vec![test],
            }
        })
        .collect();
    Ok(FoldPlan {
        protocol: Protocol::Loocv,
        folds,
    })
}

/// Train on two datasets, test on the third, for each choice of the third.
pub fn holdout_plan(manifests: &[&DatasetManifest], seed: u64) -> Result<FoldPlan> {
    if manifests.len() != 3 {
        return Err(Error::Config(format!(
            "hold-out needs 3 datasets, got {}",
            manifests.len()
        )));
    }
    let names: BTreeSet<&str> = manifests.iter().map(|m| m.dataset_name.as_str()).collect();
    if names.len() != 3 {
        return Err(Error::Config(
            "hold-out datasets need distinct names".into(),
        ));
    }
    let groups: Vec<Vec<Group>> = manifests
        .iter()
        .map(|m| groups_of(m))
        .collect::<Result<_>>()?;
    let folds = (0..3)
        .map(|t| {
            let mut test: Vec<SubjectKey> = groups[t]
                .iter()
                .flat_map(|g| g.members.iter().cloned())
                .collect();
            test.sort();
            let rest: Vec<&Group> = (0..3)
                .filter(|&o| o != t)
                .flat_map(|o| groups[o].iter())
                .collect();
            let (train, validation) = carve_validation(rest, &mut plan_rng(seed, 1 + t as u64));
            Fold {
                name: format!("test-{}", manifests[t].dataset_name),
                train,
                validation,
                test,
            }
        })
        .collect();
    Ok(FoldPlan {
        protocol: Protocol::Holdout,
        folds,
    })
}

/// What the training loop needs from a classifier.
pub trait Network: Clone {
    type Sample;
    /// Training-mode logits `[B, 2]` with a recorded tape.
    fn train_logits(&mut self, batch: &[&Self::Sample], rng: &mut ChaCha8Rng) -> Result<Tensor>;
    /// Inference logits `[B, 2]`.
    fn eval_logits(&self, batch: &[&Self::Sample]) -> Result<Tensor>;
    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)>;
}

/// One model input: a `[C, ...spatial]` image or a region graph.
#[derive(Debug, Clone)]
pub enum Example {
    Image(Tensor),
    Graph(Graph),
}

enum Stacked {
    Dense(Tensor),
    Graphs(GraphBatch),
}

fn stack(batch: &[&Example], use_edge_weights: bool) -> Result<Stacked> {
    match batch.first() {
        None => Err(Error::Input("empty batch".into())),
        Some(Example::Image(first)) => {
            let mut data = Vec::with_capacity(first.numel() * batch.len());
            for ex in batch {
                match ex {
                    Example::Image(t) if t.shape() == first.shape() => {
                        data.extend_from_slice(t.data())
                    }
                    Example::Image(t) => {
                        return Err(Error::Dimension(format!(
                            "batch mixes image shapes {:?} and {:?}",
                            first.shape(),
                            t.shape()
                        )))
                    }
                    Example::Graph(_) => {
                        return Err(Error::Input("batch mixes images and graphs".into()))
                    }
                }
            }
            let mut shape = vec![batch.len()];
            shape.extend_from_slice(first.shape());
            Ok(Stacked::Dense(Tensor::new(data, &shape)?))
        }
        Some(Example::Graph(_)) => {
            let graphs = batch
                .iter()
                .map(|ex| match ex {
                    Example::Graph(g) => Ok(g),
                    Example::Image(_) => Err(Error::Input("batch mixes images and graphs".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Stacked::Graphs(GraphBatch::new(&graphs, use_edge_weights)?))
        }
    }
}

impl Network for Model {
    type Sample = Example;

    fn train_logits(&mut self, batch: &[&Example], rng: &mut ChaCha8Rng) -> Result<Tensor> {
        match stack(batch, self.config.use_edge_weights)? {
            Stacked::Dense(x) => self.forward_train(ModelInput::Dense(&x), rng),
            Stacked::Graphs(g) => self.forward_train(ModelInput::Graphs(&g), rng),
        }
    }

    fn eval_logits(&self, batch: &[&Example]) -> Result<Tensor> {
        match stack(batch, self.config.use_edge_weights)? {
            Stacked::Dense(x) => self.forward_eval(ModelInput::Dense(&x)),
            Stacked::Graphs(g) => self.forward_eval(ModelInput::Graphs(&g)),
        }
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        Model::parameters_mut(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience bookkeeping on a monitored loss (lower is better).
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    since: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> EarlyStopping {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since = 0;
            return StopDecision::Improved;
        }
        self.since += 1;
        if self.since >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when the fold has no validation subjects.
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_loss: f64,
    /// Which loss drove early stopping.
    pub monitored: String,
}

/// Mean weighted loss over `samples` in inference mode.
pub fn evaluate_loss<N: Network>(
    net: &N,
    samples: &[(N::Sample, usize)],
    weights: &[f64],
    batch_size: usize,
) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&N::Sample> = chunk.iter().map(|(s, _)| s).collect();
        let labels: Vec<usize> = chunk.iter().map(|(_, l)| *l).collect();
        let loss = weighted_cross_entropy(&net.eval_logits(&refs)?, &labels, weights)?.item();
        let w: f64 = labels.iter().map(|&l| weights[l]).sum();
        num += loss * w;
        den += w;
    }
    Ok(num / den)
}

/// Class-1 probabilities in inference mode.
pub fn predict_probabilities<N: Network>(
    net: &N,
    samples: &[&N::Sample],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let logits = net.eval_logits(chunk)?;
        let probs = softmax_rows(logits.data(), 2);
        out.extend(probs.chunks(2).map(|p| p[1]));
    }
    Ok(out)
}

/// Mini-batch Adam on weighted cross-entropy with early stopping on the
/// validation loss (training loss when there is no validation set). The
/// network is left holding the best-epoch parameters.
pub fn train_loop<N: Network>(
    net: &mut N,
    train: &[(N::Sample, usize)],
    validation: &[(N::Sample, usize)],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let mut counts = [0usize; 2];
    for (_, l) in train {
        if *l > 1 {
            return Err(Error::Input(format!("label {l} is not binary")));
        }
        counts[*l] += 1;
    }
    let weights = class_weights(&counts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.learning_rate, config.weight_decay);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = net.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut num = 0.0;
        let mut den = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&N::Sample> = chunk.iter().map(|&i| &train[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].1).collect();
            let logits = net.train_logits(&refs, &mut rng)?;
            let loss = weighted_cross_entropy(&logits, &labels, &weights)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "epoch {epoch} batch {b}: loss {value}"
                )));
            }
            loss.backward()?;
            adam.step(net.parameters_mut())?;
            let w: f64 = labels.iter().map(|&l| weights[l]).sum();
            num += value * w;
            den += w;
        }
        let train_loss = num / den;
        let val_loss = if validation.is_empty() {
            f64::NAN
        } else {
            evaluate_loss(net, validation, &weights, config.batch_size)?
        };
        if !validation.is_empty() && !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "epoch {epoch}: validation loss {val_loss}"
            )));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        let monitored = if validation.is_empty() {
            train_loss
        } else {
            val_loss
        };
        match stopper.observe(epoch, monitored) {
            StopDecision::Improved => best = net.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    *net = best;
    Ok(TrainOutcome {
        history,
        best_epoch: stopper.best_epoch,
        best_loss: stopper.best,
        monitored: if validation.is_empty() {
            "train_loss"
        } else {
            "val_loss"
        }
        .into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointDescriptor {
    config: ModelConfig,
    seed: u64,
    best_epoch: usize,
    entries: Vec<String>,
}

/// Writes `checkpoint.json` plus one f64 blob per state entry into `dir`.
pub fn save_checkpoint(dir: impl AsRef<Path>, model: &Model, best_epoch: usize) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let state = model.state()?;
    for (name, t) in &state {
        write_blob(dir.join(format!("{name}.kvt")), t, BlobDtype::F64)?;
    }
    let desc = CheckpointDescriptor {
        config: model.config.clone(),
        seed: model.seed,
        best_epoch,
        entries: state.into_iter().map(|(n, _)| n).collect(),
    };
    let path = dir.join("checkpoint.json");
    let text = serde_json::to_string_pretty(&desc).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Rebuilds a model saved by [`save_checkpoint`]; returns it with its best epoch.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, usize)> {
    let dir = dir.as_ref();
    let path = dir.join("checkpoint.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let desc: CheckpointDescriptor = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut model = build_model(&desc.config, desc.seed)?;
    let state = desc
        .entries
        .iter()
        .map(|n| Ok((n.clone(), read_blob(dir.join(format!("{n}.kvt")))?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    model.load_state(&state)?;
    Ok((model, desc.best_epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Family, LinearLayer};
    use crate::preprocess::SubjectRecord;
    use approx::assert_abs_diff_eq;

    fn manifest(name: &str, n: usize) -> DatasetManifest {
        DatasetManifest {
            dataset_name: name.into(),
            subjects: (0..n)
                .map(|i| SubjectRecord {
                    subject_id: format!("s{i:02}"),
                    label: if i % 2 == 0 {
                        Label::Control
                    } else {
                        Label::Pd
                    },
                    path: format!("s{i:02}.kvt"),
                    group_id: format!("s{i:02}"),
                })
                .collect(),
            center_slice: None,
            voxel_size: [1.0; 3],
            root: Default::default(),
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut w = Tensor::param(vec![0.3, -1.2], &[2]).unwrap();
        let mut adam = Adam::new(1e-3, 0.0);
        adam.step(vec![("w".into(), &mut w)]).unwrap();
        assert_eq!(w.data(), &[0.3, -1.2]);
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        for g in [1e-3, 0.5, 40.0] {
            let w = Tensor::param(vec![1.0], &[1]).unwrap();
            w.scale(g).sum().backward().unwrap();
            let mut w2 = w.clone();
            let mut adam = Adam::new(1e-4, 0.0);
            adam.step(vec![("w".into(), &mut w2)]).unwrap();
            assert_abs_diff_eq!(1.0 - w2.data()[0], 1e-4, epsilon = 1e-9);
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut w = Tensor::param(vec![0.0], &[1]).unwrap();
        let mut adam = Adam::new(0.1, 0.0);
        for _ in 0..200 {
            let d = w.sub(&Tensor::scalar(3.0)).unwrap();
            d.mul(&d).unwrap().sum().backward().unwrap();
            adam.step(vec![("w".into(), &mut w)]).unwrap();
        }
        assert!((w.data()[0] - 3.0).abs() < 0.05, "w = {}", w.data()[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let w = Tensor::param(vec![1.0], &[1]).unwrap();
        w.scale(f64::NAN).sum().backward().unwrap();
        let mut w2 = w.clone();
        let err = Adam::new(0.1, 0.0)
            .step(vec![("head0.bias".into(), &mut w2)])
            .unwrap_err();
        assert!(err.to_string().contains("head0.bias"));
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(class_weights(&[75, 25]).unwrap(), vec![0.5, 1.5]);
        assert_eq!(class_weights(&[10, 10]).unwrap(), vec![1.0, 1.0]);
        assert!(matches!(class_weights(&[0, 4]), Err(Error::Config(_))));
        let logits = Tensor::new(vec![1.0, -1.0, 0.2, 0.4, 3.0, 0.0], &[3, 2]).unwrap();
        let labels = [0, 1, 1];
        assert_eq!(
            weighted_ce_loss(&logits, &labels, &[7, 7]).unwrap().item(),
            weighted_cross_entropy(&logits, &labels, &[1.0, 1.0])
                .unwrap()
                .item()
        );
        let confident = Tensor::new(vec![60.0, -60.0, -60.0, 60.0], &[2, 2]).unwrap();
        assert!(
            weighted_ce_loss(&confident, &[0, 1], &[3, 1])
                .unwrap()
                .item()
                < 1e-20
        );
    }

    #[test]
    fn kfold_balances_ten_subjects() {
        let m = manifest("a", 10);
        let plan = stratified_group_kfold(&m, 5, 3).unwrap();
        assert_eq!(plan.folds.len(), 5);
        for f in &plan.folds {
            let pd = f
                .test
                .iter()
                .filter(|k| m.label_of(&k.subject) == Some(Label::Pd))
                .count();
            assert_eq!((f.test.len(), pd), (2, 1));
        }
        plan.audit(&[&m]).unwrap();
        assert_eq!(plan, stratified_group_kfold(&m, 5, 3).unwrap());
        assert!(stratified_group_kfold(&manifest("a", 4), 5, 3).is_err());
    }

    #[test]
    fn loocv_and_holdout_shapes() {
        let m = manifest("a", 3);
        let plan = loocv_plan(&m, 1).unwrap();
        assert_eq!(plan.folds.len(), 3);
        assert!(plan.folds.iter().all(|f| f.test.len() == 1));
        plan.audit(&[&m]).unwrap();
        assert!(loocv_plan(&manifest("a", 2), 1).is_err());

        let (a, b, c) = (manifest("a", 6), manifest("b", 8), manifest("c", 4));
        let plan = holdout_plan(&[&a, &b, &c], 2).unwrap();
        let tested: Vec<&str> = plan
            .folds
            .iter()
            .map(|f| f.test[0].dataset.as_str())
            .collect();
        assert_eq!(tested, ["a", "b", "c"]);
        assert_eq!(
            plan.folds[0].train.len() + plan.folds[0].validation.len(),
            12
        );
        plan.audit(&[&a, &b, &c]).unwrap();
        assert!(holdout_plan(&[&a, &b], 2).is_err());
    }

    #[test]
    fn early_stopping_patience() {
        let mut s = EarlyStopping::new(15);
        let mut stopped = None;
        for epoch in 1..=100 {
            if s.observe(epoch, epoch as f64) == StopDecision::Stop {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped, Some(16));
        assert_eq!(s.best_epoch, 1);
    }

    #[derive(Clone)]
    struct Logistic(LinearLayer);

    impl Network for Logistic {
        type Sample = [f64; 2];
        fn train_logits(&mut self, batch: &[&[f64; 2]], _: &mut ChaCha8Rng) -> Result<Tensor> {
            let x: Vec<f64> = batch.iter().flat_map(|s| s.iter().copied()).collect();
            self.0.forward(&Tensor::new(x, &[batch.len(), 2])?)
        }
        fn eval_logits(&self, batch: &[&[f64; 2]]) -> Result<Tensor> {
            let x: Vec<f64> = batch.iter().flat_map(|s| s.iter().copied()).collect();
            self.0.forward(&Tensor::new(x, &[batch.len(), 2])?)
        }
        fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
            vec![
                ("w".into(), &mut self.0.weight),
                ("b".into(), &mut self.0.bias),
            ]
        }
    }

    #[test]
    fn separable_toy_set_is_learned() {
        // two clusters either side of x0 + x1 = 0 with margin
        let data: Vec<([f64; 2], usize)> = (0..20)
            .map(|i| {
                let label = i % 2;
                let s = if label == 1 { 1.0 } else { -1.0 };
                let t = i as f64 / 20.0;
                (
                    [s * (0.5 + t), s * (0.3 + 0.5 * (1.0 - t)) - 0.2 * t],
                    label,
                )
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Logistic(LinearLayer::new(2, 2, &mut rng).unwrap());
        let cfg = TrainConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            patience: 99,
            max_epochs: 100,
            batch_size: 4,
            seed: 1,
        };
        let out = train_loop(&mut net, &data, &[], &cfg).unwrap();
        assert_eq!(out.monitored, "train_loss");
        let refs: Vec<&[f64; 2]> = data.iter().map(|(x, _)| x).collect();
        let p = predict_probabilities(&net, &refs, 8).unwrap();
        let correct = p
            .iter()
            .zip(&data)
            .filter(|(p, (_, l))| (**p >= 0.5) as usize == *l)
            .count();
        assert_eq!(correct, 20);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut cfg = ModelConfig::published(Family::Convkan, Dim::D2);
        cfg.channels = vec![2, 2];
        cfg.head = vec![3];
        let mut model = build_model(&cfg, 5).unwrap();
        let x = Tensor::new(
            (0..128).map(|i| (i as f64 * 0.37).sin()).collect(),
            &[2, 1, 8, 8],
        )
        .unwrap();
        model
            .forward_train(ModelInput::Dense(&x), &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, 4).unwrap();
        let (back, epoch) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(epoch, 4);
        assert_eq!(
            back.forward_eval(ModelInput::Dense(&x)).unwrap().data(),
            model.forward_eval(ModelInput::Dense(&x)).unwrap().data()
        );
    }
}
