//! TOML run configuration: flat key-value sections with defaults, overridden
//! field-by-field by command-line flags. The fully resolved configuration is
//! embedded in every emitted report so a run can be replayed exactly.

use std::path::Path;

use anyhow::{Context, Result, bail};
use serde::{Deserialize, Serialize};

use finegrain_core::nn::{LrMilestone, OptimizerConfig};
use finegrain_core::{LossSwitches, LossWeights, TaxonomySpec, TrainRunConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub num_samples: usize,
    pub dim: usize,
    pub num_coarse: usize,
    pub num_fine: usize,
    pub separation: f64,
    pub within_separation: f64,
    /// Coarse parent per fine class; defaults to contiguous balanced blocks.
    pub assignment: Option<Vec<usize>>,
    /// Relative per-fine-class sampling weights; defaults to uniform.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            num_samples: 2400,
            dim: 16,
            num_coarse: 4,
            num_fine: 12,
            separation: 24.0,
            within_separation: 8.0,
            assignment: None,
            class_weights: None,
        }
    }
}

impl GenerateSection {
    pub fn taxonomy(&self) -> TaxonomySpec {
        let mut spec = TaxonomySpec::balanced(
            self.num_coarse,
            self.num_fine,
            self.separation,
            self.within_separation,
        );
        if let Some(assignment) = &self.assignment {
            spec.assignment = assignment.clone();
        }
        spec.class_weights = self.class_weights.clone();
        spec
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Number of fine-grained classes the classifier discovers; required for
    /// training (here or via `--num-fine`).
    pub num_fine: Option<usize>,
    pub hidden_layers: usize,
    pub hidden_units: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            num_fine: None,
            hidden_layers: 3,
            hidden_units: 64,
        }
    }
}

/// Loss hyperparameters; field names mirror the usual symbols.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda_m: f64,
    pub temperature: f64,
    pub ema_gamma: f64,
    pub neighbors: usize,
    pub update_period: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            lambda_m: w.lambda_m,
            temperature: w.temperature,
            ema_gamma: w.gamma,
            neighbors: w.num_neighbors,
            update_period: w.update_period,
        }
    }
}

impl LossSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            lambda_m: self.lambda_m,
            temperature: self.temperature,
            gamma: self.ema_gamma,
            num_neighbors: self.neighbors,
            update_period: self.update_period,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate after warmup; a tenth of it during warmup epochs.
    pub learning_rate: f64,
    pub momentum: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub warmup_epochs: usize,
    pub gather_multiplier: usize,
    pub enable_coarse: bool,
    pub enable_fine: bool,
    pub enable_reg: bool,
    pub standardize: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            learning_rate: 0.1,
            momentum: 0.9,
            milestones: Vec::new(),
            lr_decay: 0.1,
            warmup_epochs: 0,
            gather_multiplier: 20,
            enable_coarse: true,
            enable_fine: true,
            enable_reg: true,
            standardize: true,
        }
    }
}

impl TrainSection {
    pub fn optimizer(&self) -> Result<OptimizerConfig> {
        let mut optimizer = OptimizerConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            milestones: Vec::new(),
        }
        .with_decay_milestones(&self.milestones, self.lr_decay);
        if self.warmup_epochs > 0 {
            optimizer.learning_rate = self.learning_rate / 10.0;
            optimizer.milestones.insert(
                0,
                LrMilestone {
                    epoch: self.warmup_epochs,
                    multiplier: 10.0,
                },
            );
        }
        optimizer
            .validate()
            .context("invalid optimizer configuration")?;
        Ok(optimizer)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

/// The whole configuration file. Every run requires a seed, either here or
/// via `--seed`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub generate: GenerateSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| anyhow::anyhow!("a seed is required (config `seed` or --seed)"))
    }

    /// Builds the core training configuration. `num_fine` must be resolved.
    pub fn train_config(&self) -> Result<TrainRunConfig> {
        let num_fine = match self.model.num_fine {
            Some(k) if k >= 1 => k,
            Some(_) => bail!("model.num_fine must be >= 1"),
            None => bail!("model.num_fine is required (config or --num-fine)"),
        };
        let config = TrainRunConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            gather_multiplier: self.train.gather_multiplier,
            seed: self.require_seed()?,
            num_fine,
            hidden_layers: self.model.hidden_layers,
            hidden_units: self.model.hidden_units,
            optimizer: self.train.optimizer()?,
            weights: self.loss.weights(),
            switches: LossSwitches {
                coarse: self.train.enable_coarse,
                fine: self.train.enable_fine,
                reg: self.train.enable_reg,
            },
            standardize_inputs: self.train.standardize,
            initial_params: None,
        };
        config
            .validate()
            .map_err(|e| anyhow::anyhow!("invalid configuration: {e}"))?;
        Ok(config)
    }
}
