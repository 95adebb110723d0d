//! Experiment configuration (JSON, unknown keys rejected).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kanvox_core::graphs::{
    FeatureSet, DEFAULT_COMPACTNESS, DEFAULT_NEIGHBOURS, DEFAULT_SLIC_ITERATIONS,
};
use kanvox_core::layers::{Dim, Family, ModelConfig};
use kanvox_core::trainer::{Protocol, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Manifest paths, relative to the config file.
    pub datasets: Vec<PathBuf>,
    pub models: Vec<ModelSpec>,
    pub protocol: Protocol,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default)]
    pub preprocess: PreprocessOptions,
    #[serde(default)]
    pub graph: GraphOptions,
    #[serde(default)]
    pub stats: StatsOptions,
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_folds() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub dim: Dim,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(default)]
    pub train: TrainOverrides,
}

impl ModelSpec {
    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::published(self.family, self.dim);
        if let Some(c) = &self.channels {
            cfg.channels = c.clone();
        }
        if let Some(h) = &self.head {
            cfg.head = h.clone();
        }
        if let Some(d) = self.dropout {
            cfg.dropout = d;
        }
        cfg
    }

    /// Published defaults, then experiment-wide overrides, then per-model ones.
    pub fn train_config(&self, global: &TrainOverrides) -> TrainConfig {
        let mut t = TrainConfig::published(self.dim);
        global.apply(&mut t);
        self.train.apply(&mut t);
        t
    }

    pub fn name(&self) -> String {
        format!("{} {}", self.dim, self.family)
    }

    /// Directory-safe name, e.g. `2d-convkan`.
    pub fn slug(&self) -> String {
        self.name().to_lowercase().replace(' ', "-")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, t: &mut TrainConfig) {
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            t.weight_decay = v;
        }
        if let Some(v) = self.patience {
            t.patience = v;
        }
        if let Some(v) = self.max_epochs {
            t.max_epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessOptions {
    /// Axial slices per subject for 2D models.
    pub slice_count: usize,
    pub slice_size: usize,
    pub volume_size: usize,
    pub sigma_mm: f64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            slice_count: 100,
            slice_size: 224,
            volume_size: 128,
            sigma_mm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphOptions {
    pub segments: usize,
    pub neighbours: usize,
    pub compactness: f64,
    pub iterations: usize,
    pub features: FeatureSet,
    pub use_edge_weights: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            segments: 1000,
            neighbours: DEFAULT_NEIGHBOURS,
            compactness: DEFAULT_COMPACTNESS,
            iterations: DEFAULT_SLIC_ITERATIONS,
            features: FeatureSet::WithCentroids,
            use_edge_weights: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsOptions {
    pub bootstrap_replicates: usize,
    pub confidence: f64,
    /// Bootstrap resamples of pooled test predictions written to
    /// `replicates.csv` (0 disables).
    pub replicate_metrics: usize,
}

impl Default for StatsOptions {
    fn default() -> Self {
        StatsOptions {
            bootstrap_replicates: 2000,
            confidence: 0.95,
            replicate_metrics: 0,
        }
    }
}

impl ExperimentConfig {
    /// Reads a config; dataset paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut cfg.datasets {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        if cfg.output.is_relative() {
            cfg.output = base.join(&cfg.output);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.protocol, self.datasets.len()) {
            (Protocol::Holdout, 3) => {}
            (Protocol::Holdout, n) => bail!("config: holdout needs exactly 3 datasets, got {n}"),
            (_, 1) => {}
            (p, n) => bail!("config: {p:?} needs exactly 1 dataset, got {n}"),
        }
        if self.models.is_empty() {
            bail!("config: no models listed");
        }
        let mut names: Vec<String> = self.models.iter().map(ModelSpec::name).collect();
        names.sort();
        names.dedup();
        if names.len() != self.models.len() {
            bail!("config: a model is listed twice");
        }
        if self.folds < 2 {
            bail!("config: folds must be at least 2");
        }
        let p = &self.preprocess;
        if p.slice_count == 0 || p.slice_size == 0 || p.volume_size == 0 || !(p.sigma_mm >= 0.0) {
            bail!("config: invalid preprocessing options {p:?}");
        }
        if self.graph.segments < 2 || self.graph.neighbours == 0 {
            bail!("config: invalid graph options {:?}", self.graph);
        }
        for m in &self.models {
            m.model_config()
                .validate()
                .with_context(|| format!("config: model {}", m.name()))?;
            m.train_config(&self.train)
                .validate()
                .with_context(|| format!("config: training of {}", m.name()))?;
        }
        Ok(())
    }
}
