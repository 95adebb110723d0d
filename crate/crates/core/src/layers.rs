//! Layers and the six classifier assemblies (2D/3D × CNN/ConvKAN/GCN).
//!
//! Models run in one of two modes. [`Model::forward_train`] records the
//! gradient tape, updates batch-norm running statistics and extends spline
//! grids whose domain the current batch leaves. [`Model::forward_eval`] uses
//! running statistics, clamps spline inputs to the domain and detaches every
//! parameter, so it records nothing and only needs `&self`.

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bspline::{make_grid, SplineGrid};
use crate::error::{Error, Result};
use crate::graphs::GraphBatch;
use crate::tensor::nn::{self, CsrMatrix};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const KERNEL: usize = 3;

fn kaiming_uniform<R: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut R) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn maybe_detach(t: &Tensor, train: bool) -> Tensor {
    if train {
        t.clone()
    } else {
        t.detach()
    }
}

/// 3×3(×3) convolution, stride 1, padding 1.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        dim: Dim,
        rng: &mut R,
    ) -> Result<ConvLayer> {
        let spatial = vec![KERNEL; dim.rank()];
        let fan_in = in_ch * spatial.iter().product::<usize>();
        let mut shape = vec![out_ch, in_ch];
        shape.extend(&spatial);
        let n = out_ch * fan_in;
        ConvLayer::from_parts(
            Tensor::param(kaiming_uniform(n, fan_in, rng), &shape)?,
            Tensor::param(vec![0.0; out_ch], &[out_ch])?,
        )
    }

    pub fn from_parts(kernel: Tensor, bias: Tensor) -> Result<ConvLayer> {
        if kernel.rank() < 3 || kernel.shape()[2..].iter().any(|&k| k != KERNEL) {
            return Err(Error::Dimension(format!(
                "kernel must be [out, in, 3, 3(, 3)], got {:?}",
                kernel.shape()
            )));
        }
        if bias.shape() != [kernel.shape()[0]] {
            return Err(Error::Dimension(format!("bias shape {:?}", bias.shape())));
        }
        Ok(ConvLayer { kernel, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, true)
    }

    fn run(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        nn::conv(
            x,
            &maybe_detach(&self.kernel, train),
            &maybe_detach(&self.bias, train),
            1,
        )
    }
}

/// `w1 · spline(conv(x)) + w2 · silu(conv(x))` with one spline per output
/// channel.
#[derive(Debug, Clone)]
pub struct SplineConvLayer {
    pub conv: ConvLayer,
    pub grid: SplineGrid,
    pub w1: Tensor,
    pub w2: Tensor,
}

impl SplineConvLayer {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        dim: Dim,
        spline: &SplineSettings,
        rng: &mut R,
    ) -> Result<SplineConvLayer> {
        let conv = ConvLayer::new(in_ch, out_ch, dim, rng)?;
        let grid = make_grid(
            spline.control_points,
            spline.degree,
            spline.lo,
            spline.hi,
            out_ch,
            rng,
        )?;
        Ok(SplineConvLayer {
            conv,
            grid,
            w1: Tensor::param(vec![1.0], &[])?,
            w2: Tensor::param(vec![1.0], &[])?,
        })
    }

    /// Training forward; extends the grid first if `conv(x)` leaves its domain.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let z = self.conv.run(x, true)?;
        let (lo, hi) = finite_range(&z)?;
        if !self.grid.covers(lo, hi) {
            self.grid = self.grid.extend(lo, hi)?;
        }
        let s = self.grid.eval(&z)?;
        s.mul(&self.w1)?.add(&z.silu().mul(&self.w2)?)
    }

    /// Inference forward; inputs beyond the domain see the spline's end values.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.conv.run(x, false)?;
        finite_range(&z)?;
        let s = self.grid.detached().eval_clamped(&z)?;
        s.mul(&self.w1.detach())?
            .add(&z.silu().mul(&self.w2.detach())?)
    }
}

fn finite_range(t: &Tensor) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in t.data() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite activation {v}")));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

/// What train-mode batch norm does with a batch of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SingleSamplePolicy {
    /// Normalize with the running statistics, then update them from the
    /// sample with its variance clamped at epsilon.
    #[default]
    RunningStats,
    /// Reject the batch with a degenerate-batch error.
    Error,
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub single_sample: SingleSamplePolicy,
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Result<BatchNormLayer> {
        Ok(BatchNormLayer {
            gamma: Tensor::param(vec![1.0; channels], &[channels])?,
            beta: Tensor::param(vec![0.0; channels], &[channels])?,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            single_sample: SingleSamplePolicy::default(),
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * var[c];
        }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let stats = nn::channel_stats(x, self.channels())?;
        if x.shape()[0] == 1 {
            return match self.single_sample {
                SingleSamplePolicy::Error => Err(Error::DegenerateBatch(
                    "train-mode batch norm needs at least two samples".into(),
                )),
                SingleSamplePolicy::RunningStats => {
                    let out = nn::batch_norm(
                        x,
                        &self.gamma,
                        &self.beta,
                        Some((&self.running_mean, &self.running_var)),
                        self.eps,
                    )?;
                    let var: Vec<f64> = stats
                        .var_unbiased
                        .iter()
                        .map(|v| {
                            if v.is_finite() {
                                v.max(self.eps)
                            } else {
                                self.eps
                            }
                        })
                        .collect();
                    self.update_running(&stats.mean, &var);
                    Ok(out)
                }
            };
        }
        let out = nn::batch_norm(x, &self.gamma, &self.beta, None, self.eps)?;
        self.update_running(&stats.mean, &stats.var_unbiased);
        Ok(out)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        nn::batch_norm(
            x,
            &self.gamma.detach(),
            &self.beta.detach(),
            Some((&self.running_mean, &self.running_var)),
            self.eps,
        )
    }
}

/// `ReLU(Â · H · W)` with the batch's normalized, self-looped adjacency `Â`.
#[derive(Debug, Clone)]
pub struct GcnConvLayer {
    pub weight: Tensor,
}

impl GcnConvLayer {
    pub fn new<R: Rng + ?Sized>(in_f: usize, out_f: usize, rng: &mut R) -> Result<GcnConvLayer> {
        Ok(GcnConvLayer {
            weight: Tensor::param(kaiming_uniform(in_f * out_f, in_f, rng), &[in_f, out_f])?,
        })
    }

    pub fn pre_activation(&self, adjacency: &Rc<CsrMatrix>, h: &Tensor) -> Result<Tensor> {
        self.pre(adjacency, h, true)
    }

    fn pre(&self, adjacency: &Rc<CsrMatrix>, h: &Tensor, train: bool) -> Result<Tensor> {
        if h.rank() != 2 || h.shape()[0] != adjacency.n {
            return Err(Error::Dimension(format!(
                "features {:?} for a graph of {} nodes",
                h.shape(),
                adjacency.n
            )));
        }
        nn::sparse_matmul(adjacency, &h.matmul(&maybe_detach(&self.weight, train))?)
    }

    pub fn forward(&self, batch: &GraphBatch, h: &Tensor) -> Result<Tensor> {
        Ok(self.pre(&batch.adjacency, h, true)?.relu())
    }
}

/// `x W + b` with `W` stored `[in × out]`.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new<R: Rng + ?Sized>(in_f: usize, out_f: usize, rng: &mut R) -> Result<LinearLayer> {
        Ok(LinearLayer {
            weight: Tensor::param(kaiming_uniform(in_f * out_f, in_f, rng), &[in_f, out_f])?,
            bias: Tensor::param(vec![0.0; out_f], &[out_f])?,
        })
    }

    fn run(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        nn::linear(
            x,
            &maybe_detach(&self.weight, train),
            &maybe_detach(&self.bias, train),
        )
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, true)
    }
}

/// Inverted dropout: kept entries are scaled by `1 / (1 − p)`.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: f64, rng: &mut R) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    x.mul(&Tensor::new(mask, x.shape())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Cnn,
    Convkan,
    Gcn,
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Family> {
        match s.to_ascii_lowercase().as_str() {
            "cnn" => Ok(Family::Cnn),
            "convkan" => Ok(Family::Convkan),
            "gcn" => Ok(Family::Gcn),
            _ => Err(Error::Config(format!("unknown model family {s:?}"))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Cnn => "CNN",
            Family::Convkan => "ConvKAN",
            Family::Gcn => "GCN",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dim {
    #[serde(rename = "2d")]
    D2,
    #[serde(rename = "3d")]
    D3,
}

impl Dim {
    pub fn rank(self) -> usize {
        match self {
            Dim::D2 => 2,
            Dim::D3 => 3,
        }
    }
}

impl FromStr for Dim {
    type Err = Error;
    fn from_str(s: &str) -> Result<Dim> {
        match s.to_ascii_lowercase().as_str() {
            "2d" => Ok(Dim::D2),
            "3d" => Ok(Dim::D3),
            _ => Err(Error::Config(format!("unknown dimensionality {s:?}"))),
        }
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dim::D2 => "2D",
            Dim::D3 => "3D",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineSettings {
    pub control_points: usize,
    pub degree: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for SplineSettings {
    fn default() -> Self {
        SplineSettings {
            control_points: 6,
            degree: 3,
            lo: -1.0,
            hi: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub dim: Dim,
    /// Conv/spline filters per block, or hidden width per graph layer.
    pub channels: Vec<usize>,
    /// Hidden widths of the classifier head before the 2-logit output.
    pub head: Vec<usize>,
    pub dropout: f64,
    /// Image channels, or node feature arity for graph models.
    pub in_features: usize,
    #[serde(default)]
    pub spline: SplineSettings,
    #[serde(default)]
    pub single_sample_batch_norm: SingleSamplePolicy,
    #[serde(default = "yes")]
    pub use_edge_weights: bool,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    /// Architecture of the published models.
    pub fn published(family: Family, dim: Dim) -> ModelConfig {
        let (channels, head, dropout, in_features) = match (family, dim) {
            (Family::Cnn, _) => (vec![32, 64, 128, 256], vec![64], 0.5, 1),
            (Family::Convkan, Dim::D2) => (vec![32, 64, 128], vec![64], 0.5, 1),
            (Family::Convkan, Dim::D3) => (vec![32, 64, 128, 256], vec![64], 0.5, 1),
            (Family::Gcn, _) => (vec![64; 4], vec![], 0.3, 2 + dim.rank()),
        };
        ModelConfig {
            family,
            dim,
            channels,
            head,
            dropout,
            in_features,
            spline: SplineSettings::default(),
            single_sample_batch_norm: SingleSamplePolicy::default(),
            use_edge_weights: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "invalid channel plan {:?}",
                self.channels
            )));
        }
        if self.head.contains(&0) {
            return Err(Error::Config(format!(
                "invalid head widths {:?}",
                self.head
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.in_features == 0 {
            return Err(Error::Config("in_features must be positive".into()));
        }
        let s = &self.spline;
        if s.control_points <= s.degree || !(s.lo < s.hi) {
            return Err(Error::Config(format!("invalid spline settings {s:?}")));
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        format!("{} {}", self.dim, self.family)
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Conv {
        conv: ConvLayer,
        bn: BatchNormLayer,
    },
    Spline {
        layer: SplineConvLayer,
        bn: BatchNormLayer,
    },
}

pub enum ModelInput<'a> {
    /// `[B, C, H, W]` or `[B, C, D, H, W]`.
    Dense(&'a Tensor),
    Graphs(&'a GraphBatch),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub blocks: Vec<Block>,
    pub gcn: Vec<GcnConvLayer>,
    pub head: Vec<LinearLayer>,
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::new();
    let mut gcn = Vec::new();
    let mut width = config.in_features;
    for &c in &config.channels {
        match config.family {
            Family::Cnn | Family::Convkan => {
                let mut bn = BatchNormLayer::new(c)?;
                bn.single_sample = config.single_sample_batch_norm;
                blocks.push(if config.family == Family::Cnn {
                    Block::Conv {
                        conv: ConvLayer::new(width, c, config.dim, &mut rng)?,
                        bn,
                    }
                } else {
                    Block::Spline {
                        layer: SplineConvLayer::new(
                            width,
                            c,
                            config.dim,
                            &config.spline,
                            &mut rng,
                        )?,
                        bn,
                    }
                });
            }
            Family::Gcn => gcn.push(GcnConvLayer::new(width, c, &mut rng)?),
        }
        width = c;
    }
    let mut head = Vec::new();
    for &h in config.head.iter().chain(std::iter::once(&2)) {
        head.push(LinearLayer::new(width, h, &mut rng)?);
        width = h;
    }
    Ok(Model {
        config: config.clone(),
        seed,
        blocks,
        gcn,
        head,
    })
}

enum Mode<'r> {
    Train(&'r mut dyn rand::RngCore),
    Eval,
}

impl Model {
    /// Logits `[B, 2]` with tape recording, batch statistics and grid extension.
    pub fn forward_train<R: rand::RngCore>(
        &mut self,
        input: ModelInput<'_>,
        rng: &mut R,
    ) -> Result<Tensor> {
        self.check_input(&input)?;
        let mut mode = Mode::Train(rng);
        let pooled = match input {
            ModelInput::Dense(x0) => {
                let mut h = x0.clone();
                for block in &mut self.blocks {
                    h = match block {
                        Block::Conv { conv, bn } => bn.forward_train(&conv.forward(&h)?.relu())?,
                        Block::Spline { layer, bn } => {
                            bn.forward_train(&layer.forward_train(&h)?)?
                        }
                    };
                    h = nn::max_pool2(&h)?;
                }
                nn::global_avg_pool(&h)?
            }
            ModelInput::Graphs(b) => self.graph_trunk(b, &mut mode)?,
        };
        self.run_head(&pooled, &mut mode)
    }

    /// Logits `[B, 2]` from running statistics, with no tape.
    pub fn forward_eval(&self, input: ModelInput<'_>) -> Result<Tensor> {
        self.check_input(&input)?;
        let mut mode = Mode::Eval;
        let pooled = match input {
            ModelInput::Dense(x0) => {
                let mut h = x0.detach();
                for block in &self.blocks {
                    h = match block {
                        Block::Conv { conv, bn } => {
                            bn.forward_eval(&conv.run(&h, false)?.relu())?
                        }
                        Block::Spline { layer, bn } => bn.forward_eval(&layer.forward_eval(&h)?)?,
                    };
                    h = nn::max_pool2(&h)?;
                }
                nn::global_avg_pool(&h)?
            }
            ModelInput::Graphs(b) => self.graph_trunk(b, &mut mode)?,
        };
        self.run_head(&pooled, &mut mode)
    }

    fn graph_trunk(&self, batch: &GraphBatch, mode: &mut Mode<'_>) -> Result<Tensor> {
        let mut h = batch.features.clone();
        for layer in &self.gcn {
            match mode {
                Mode::Train(rng) => {
                    h = layer.pre(&batch.adjacency, &h, true)?.relu();
                    h = dropout(&h, self.config.dropout, &mut **rng)?;
                }
                Mode::Eval => h = layer.pre(&batch.adjacency, &h, false)?.relu(),
            }
        }
        nn::segment_mean(&h, &batch.membership, batch.graphs)
    }

    fn run_head(&self, pooled: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let train = matches!(mode, Mode::Train(_));
        let mut h = pooled.clone();
        let last = self.head.len() - 1;
        for (i, layer) in self.head.iter().enumerate() {
            if i == last && self.config.family != Family::Gcn {
                if let Mode::Train(rng) = mode {
                    h = dropout(&h, self.config.dropout, &mut **rng)?;
                }
            }
            h = layer.run(&h, train)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    fn check_input(&self, input: &ModelInput<'_>) -> Result<()> {
        match (self.config.family, input) {
            (Family::Gcn, ModelInput::Graphs(b)) => {
                let f = b.features.shape()[1];
                if f != self.config.in_features {
                    return Err(Error::Dimension(format!(
                        "graph nodes carry {f} features, model expects {}",
                        self.config.in_features
                    )));
                }
                Ok(())
            }
            (Family::Gcn, ModelInput::Dense(_)) => {
                Err(Error::Contract("graph model needs a graph batch".into()))
            }
            (_, ModelInput::Dense(x)) => {
                let rank = self.config.dim.rank() + 2;
                if x.rank() != rank || x.shape()[1] != self.config.in_features {
                    return Err(Error::Dimension(format!(
                        "{} model expects [B, {}, {}], got {:?}",
                        self.config.name(),
                        self.config.in_features,
                        vec!["S"; self.config.dim.rank()].join(", "),
                        x.shape()
                    )));
                }
                Ok(())
            }
            (_, ModelInput::Graphs(_)) => {
                Err(Error::Contract("image model needs a dense tensor".into()))
            }
        }
    }

    /// Trainable parameters named by layer path, in construction order.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut this = self.clone();
        this.parameters_mut()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            match block {
                Block::Conv { conv, bn } => {
                    out.push((format!("block{i}.conv.kernel"), &mut conv.kernel));
                    out.push((format!("block{i}.conv.bias"), &mut conv.bias));
                    out.push((format!("block{i}.bn.gamma"), &mut bn.gamma));
                    out.push((format!("block{i}.bn.beta"), &mut bn.beta));
                }
                Block::Spline { layer, bn } => {
                    out.push((format!("block{i}.conv.kernel"), &mut layer.conv.kernel));
                    out.push((format!("block{i}.conv.bias"), &mut layer.conv.bias));
                    out.push((format!("block{i}.spline.control"), layer.grid.control_mut()));
                    out.push((format!("block{i}.w1"), &mut layer.w1));
                    out.push((format!("block{i}.w2"), &mut layer.w2));
                    out.push((format!("block{i}.bn.gamma"), &mut bn.gamma));
                    out.push((format!("block{i}.bn.beta"), &mut bn.beta));
                }
            }
        }
        for (i, layer) in self.gcn.iter_mut().enumerate() {
            out.push((format!("gcn{i}.weight"), &mut layer.weight));
        }
        for (i, layer) in self.head.iter_mut().enumerate() {
            out.push((format!("head{i}.weight"), &mut layer.weight));
            out.push((format!("head{i}.bias"), &mut layer.bias));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in self.parameters() {
            t.zero_grad();
        }
    }

    /// Parameters plus non-trainable state (running statistics, knots).
    pub fn state(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = self.parameters();
        for (i, block) in self.blocks.iter().enumerate() {
            let bn = match block {
                Block::Conv { bn, .. } => bn,
                Block::Spline { layer, bn } => {
                    out.push((
                        format!("block{i}.spline.knots"),
                        Tensor::from_vec(layer.grid.knots().to_vec()),
                    ));
                    bn
                }
            };
            out.push((
                format!("block{i}.bn.running_mean"),
                Tensor::from_vec(bn.running_mean.clone()),
            ));
            out.push((
                format!("block{i}.bn.running_var"),
                Tensor::from_vec(bn.running_var.clone()),
            ));
        }
        Ok(out)
    }

    /// Restores everything produced by [`state`](Self::state).
    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let fetch = |name: &str, like: &[usize]| -> Result<Tensor> {
            let t = state
                .get(name)
                .ok_or_else(|| Error::Format(format!("state is missing {name}")))?;
            if t.shape() != like {
                return Err(Error::Format(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    like
                )));
            }
            Tensor::param(t.data().to_vec(), like)
        };
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let bn = match block {
                Block::Conv { bn, .. } => bn,
                Block::Spline { layer, bn } => {
                    let knots = fetch(
                        &format!("block{i}.spline.knots"),
                        &[layer.grid.knots().len()],
                    )?;
                    let control = fetch(
                        &format!("block{i}.spline.control"),
                        layer.grid.control().shape(),
                    )?;
                    layer.grid = SplineGrid::from_parts(
                        layer.grid.degree(),
                        knots.data().to_vec(),
                        control,
                    )?;
                    bn
                }
            };
            let c = bn.channels();
            bn.running_mean = fetch(&format!("block{i}.bn.running_mean"), &[c])?
                .data()
                .to_vec();
            bn.running_var = fetch(&format!("block{i}.bn.running_var"), &[c])?
                .data()
                .to_vec();
        }
        for (name, slot) in self.parameters_mut() {
            if name.ends_with("spline.control") {
                continue;
            }
            *slot = fetch(&name, slot.shape())?;
        }
        Ok(())
    }
}
