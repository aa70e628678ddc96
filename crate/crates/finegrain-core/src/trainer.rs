//! Alternating optimization: gradient steps on the classifier interleaved
//! with periodic exact re-solves of the class-relation matrices.
//!
//! Single-dataset training is the one-dataset case of the multi-dataset loop:
//! minibatches are drawn from the union of all datasets, the coarse and
//! confidence terms use the relation matrix of each sample's source dataset,
//! and the entropy term is evaluated over the whole minibatch. Every
//! `update_period` steps, predictions are gathered over a shuffled prefix of
//! each dataset (capped at `gather_multiplier * batch_size` samples) and the
//! relation matrices are re-solved from the resulting cost matrices.

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::loss::{self, LossInputs, LossSwitches, LossWeights};
use crate::matrix::DenseMatrix;
use crate::nn::{self, ClassifierState, MlpParams, OptimizerConfig, Standardizer, WhichParams};
use crate::relations::{
    self, CostMatrix, RelationMatrix, RelationObjectiveValue, solve_relations_exact,
};

/// Exact same-coarse-class Euclidean neighbor lists, one per sample.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    neighbors: Vec<Vec<usize>>,
    num_neighbors: usize,
}

impl NeighborIndex {
    pub fn num_neighbors(&self) -> usize {
        self.num_neighbors
    }

    pub fn of(&self, sample: usize) -> &[usize] {
        &self.neighbors[sample]
    }
}

/// Builds the exact L-nearest-neighbor index restricted to samples sharing
/// the query's coarse class. Distance ties break by sample index. Errors if
/// any coarse class has too few members to supply `L` neighbors.
pub fn build_neighbor_index(
    features: &DenseMatrix,
    coarse_labels: &[usize],
    num_neighbors: usize,
) -> Result<NeighborIndex> {
    if features.rows() != coarse_labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows but {} labels",
            features.rows(),
            coarse_labels.len()
        )));
    }
    if num_neighbors == 0 {
        return Err(Error::InvalidConfig("num_neighbors must be >= 1".into()));
    }
    let num_coarse = coarse_labels.iter().max().map_or(0, |&m| m + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); num_coarse];
    for (i, &y) in coarse_labels.iter().enumerate() {
        groups[y].push(i);
    }
    for (class, group) in groups.iter().enumerate() {
        if !group.is_empty() && group.len() <= num_neighbors {
            return Err(Error::ClassTooSmall {
                class,
                size: group.len(),
                required: num_neighbors + 1,
            });
        }
    }
    let mut neighbors = vec![Vec::new(); features.rows()];
    for group in &groups {
        for &i in group {
            let anchor = features.row(i);
            let mut candidates: Vec<(f64, usize)> = group
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| {
                    let d: f64 = anchor
                        .iter()
                        .zip(features.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d, j)
                })
                .collect();
            candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            neighbors[i] = candidates
                .into_iter()
                .take(num_neighbors)
                .map(|(_, j)| j)
                .collect();
        }
    }
    Ok(NeighborIndex {
        neighbors,
        num_neighbors,
    })
}

/// Full training configuration.
#[derive(Debug, Clone)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Relation re-solves see at most `gather_multiplier * batch_size`
    /// samples per dataset.
    pub gather_multiplier: usize,
    pub seed: u64,
    pub num_fine: usize,
    /// Hidden ReLU layers between input and the fine-class logits.
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub switches: LossSwitches,
    /// Fit a per-dimension input standardizer on the training features.
    pub standardize_inputs: bool,
    /// Overrides the seeded random initialization when present.
    pub initial_params: Option<MlpParams>,
}

impl TrainRunConfig {
    pub fn new(num_fine: usize, seed: u64) -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            gather_multiplier: 20,
            seed,
            num_fine,
            hidden_layers: 3,
            hidden_units: 64,
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::default(),
            switches: LossSwitches::default(),
            standardize_inputs: true,
            initial_params: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.gather_multiplier == 0 {
            return Err(Error::InvalidConfig("gather_multiplier must be >= 1".into()));
        }
        if self.num_fine == 0 {
            return Err(Error::InvalidConfig("num_fine must be >= 1".into()));
        }
        if self.hidden_units == 0 && self.hidden_layers > 0 {
            return Err(Error::InvalidConfig("hidden_units must be >= 1".into()));
        }
        self.optimizer.validate()?;
        self.weights.validate()
    }

    fn architecture(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(self.hidden_units, self.hidden_layers));
        dims.push(self.num_fine);
        dims
    }
}

/// One relation matrix as produced at some training step.
#[derive(Debug, Clone, Serialize)]
pub struct RelationSnapshot {
    pub step: u64,
    pub dataset: usize,
    pub relation: RelationMatrix,
    pub objective: RelationObjectiveValue,
}

/// Per-iteration loss values.
#[derive(Debug, Clone, Default, Serialize)]
pub struct LossTrace {
    pub coarse: Vec<f64>,
    pub fine: Vec<f64>,
    pub reg: Vec<f64>,
    pub total: Vec<f64>,
}

/// Everything a training run produces. The classifier state is written to a
/// binary checkpoint rather than the JSON report.
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub trace: LossTrace,
    pub relation_history: Vec<RelationSnapshot>,
    pub final_relations: Vec<RelationMatrix>,
    pub clamp_events: usize,
    #[serde(skip_serializing)]
    pub final_state: ClassifierState,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Mean total loss per epoch.
    pub fn epoch_mean_total(&self) -> Vec<f64> {
        if self.iterations_per_epoch == 0 {
            return Vec::new();
        }
        self.trace
            .total
            .chunks(self.iterations_per_epoch)
            .map(|chunk| chunk.iter().sum::<f64>() / chunk.len() as f64)
            .collect()
    }
}

/// Trains on a single dataset; the one-dataset case of [`train_multi`].
pub fn train_single(dataset: &Dataset, config: &TrainRunConfig) -> Result<TrainReport> {
    train_multi(std::slice::from_ref(dataset), config)
}

/// Trains on several coarsely labeled datasets sharing one fine-class space,
/// maintaining one relation matrix per dataset.
pub fn train_multi(datasets: &[Dataset], config: &TrainRunConfig) -> Result<TrainReport> {
    config.validate()?;
    if datasets.is_empty() {
        return Err(Error::InvalidConfig("no datasets given".into()));
    }
    let dim = datasets[0].dim();
    let mut total_samples = 0usize;
    for (l, d) in datasets.iter().enumerate() {
        if d.is_empty() {
            return Err(Error::InvalidConfig(format!("dataset {l} is empty")));
        }
        if d.dim() != dim {
            return Err(Error::DimensionMismatch(format!(
                "dataset {l} has dim {}, expected {dim}",
                d.dim()
            )));
        }
        if config.num_fine < d.num_coarse {
            return Err(Error::Infeasible(format!(
                "dataset {l}: {} fine classes cannot cover {} coarse classes",
                config.num_fine, d.num_coarse
            )));
        }
        total_samples += d.len();
    }

    // flatten datasets into one global row space
    let mut offsets = Vec::with_capacity(datasets.len());
    let mut features = DenseMatrix::zeros(total_samples, dim);
    let mut coarse_labels = Vec::with_capacity(total_samples);
    let mut dataset_of = Vec::with_capacity(total_samples);
    let mut row = 0usize;
    for (l, d) in datasets.iter().enumerate() {
        offsets.push(row);
        for r in 0..d.len() {
            features.row_mut(row).copy_from_slice(d.features.row(r));
            coarse_labels.push(d.coarse_labels[r]);
            dataset_of.push(l);
            row += 1;
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let params = match &config.initial_params {
        Some(p) => p.clone(),
        None => MlpParams::init(&config.architecture(dim), &mut rng)?,
    };
    if params.input_dim() != dim || params.output_dim() != config.num_fine {
        return Err(Error::DimensionMismatch(
            "initial parameters do not match data dim or num_fine".into(),
        ));
    }
    let scaler = if config.standardize_inputs {
        Standardizer::fit(&features)
    } else {
        Standardizer::identity(dim)
    };
    let mut state = ClassifierState::with_scaler(params, scaler);
    let mut velocity = state.theta.zeros_like();

    // initial relation matrices from random cost matrices
    let mut history = Vec::new();
    let mut current: Vec<RelationMatrix> = Vec::with_capacity(datasets.len());
    for (l, d) in datasets.iter().enumerate() {
        let cost = CostMatrix::random(d.num_coarse, config.num_fine, &mut rng);
        let (m, objective) = solve_relations_exact(&cost, config.weights.lambda_m)?;
        history.push(RelationSnapshot {
            step: 0,
            dataset: l,
            relation: m.clone(),
            objective,
        });
        current.push(m);
    }

    // neighbor lists are built once, before training, within each dataset
    let need_neighbors = config.switches.fine && config.weights.lambda2 != 0.0;
    let neighbor_index = if need_neighbors {
        let mut merged = vec![Vec::new(); total_samples];
        for (l, d) in datasets.iter().enumerate() {
            let local =
                build_neighbor_index(&d.features, &d.coarse_labels, config.weights.num_neighbors)
                    .map_err(|e| Error::InvalidConfig(format!("dataset {l}: {e}")))?;
            for r in 0..d.len() {
                merged[offsets[l] + r] =
                    local.of(r).iter().map(|&j| offsets[l] + j).collect();
            }
        }
        Some(NeighborIndex {
            neighbors: merged,
            num_neighbors: config.weights.num_neighbors,
        })
    } else {
        None
    };

    let iterations_per_epoch = total_samples.div_ceil(config.batch_size);
    let mut trace = LossTrace::default();
    let mut clamp_events = 0usize;
    let mut order: Vec<usize> = (0..total_samples).collect();
    let k_f = config.num_fine;
    let num_neighbors = config.weights.num_neighbors;

    for epoch in 0..config.epochs {
        let lr = config.optimizer.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        for (iteration, batch_idx) in order.chunks(config.batch_size).enumerate() {
            let batch = features.select_rows(batch_idx);
            let labels: Vec<usize> = batch_idx.iter().map(|&i| coarse_labels[i]).collect();
            let rel_idx: Vec<usize> = batch_idx.iter().map(|&i| dataset_of[i]).collect();

            // one EMA forward over the union of batch rows and their neighbors
            let (ema_logits_batch, neighbor_probs) = match &neighbor_index {
                Some(index) => {
                    let mut wanted: Vec<usize> = batch_idx.to_vec();
                    for &i in batch_idx {
                        wanted.extend_from_slice(index.of(i));
                    }
                    wanted.sort_unstable();
                    wanted.dedup();
                    let gathered = features.select_rows(&wanted);
                    let ema_logits_all =
                        nn::forward_logits(&state, WhichParams::Ema, &gathered)?;
                    let ema_probs_all = nn::softmax_rows(&ema_logits_all, 1.0)
                        .map_err(|e| non_finite(epoch, iteration, &e))?;
                    let position = |global: usize| wanted.binary_search(&global).unwrap();
                    let mut ema_logits = DenseMatrix::zeros(batch_idx.len(), k_f);
                    let mut nb_probs =
                        DenseMatrix::zeros(batch_idx.len() * num_neighbors, k_f);
                    for (b, &i) in batch_idx.iter().enumerate() {
                        ema_logits
                            .row_mut(b)
                            .copy_from_slice(ema_logits_all.row(position(i)));
                        for (k, &j) in index.of(i).iter().enumerate() {
                            nb_probs
                                .row_mut(b * num_neighbors + k)
                                .copy_from_slice(ema_probs_all.row(position(j)));
                        }
                    }
                    (ema_logits, Some(nb_probs))
                }
                None => (DenseMatrix::zeros(batch_idx.len(), k_f), None),
            };

            let scaled_batch = state.scaler.apply(&batch);
            let forward = nn::forward_trace(&state.theta, &scaled_batch)?;
            let probs = nn::softmax_rows(&forward.logits, 1.0)
                .map_err(|e| non_finite(epoch, iteration, &e))?;
            let relation_refs: Vec<&RelationMatrix> = current.iter().collect();
            let total = loss::total_loss(&LossInputs {
                probs: &probs,
                coarse_labels: &labels,
                relations: &relation_refs,
                rel_index: Some(&rel_idx),
                ema_logits: &ema_logits_batch,
                neighbor_probs: neighbor_probs.as_ref(),
                weights: &config.weights,
                switches: config.switches,
            })?;
            if !total.terms.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    iteration,
                    detail: format!("total loss = {}", total.terms.total),
                });
            }
            clamp_events += total.clamp_events;

            let grads = nn::backward_from_trace(
                &state.theta,
                &scaled_batch,
                &forward,
                &total.grad_logits,
            )?;
            sgd_and_ema(&mut state, &grads, &mut velocity, lr, config)?;

            trace.coarse.push(total.terms.coarse);
            trace.fine.push(total.terms.fine);
            trace.reg.push(total.terms.entropy);
            trace.total.push(total.terms.total);

            if state.step.is_multiple_of(config.weights.update_period as u64) {
                for (l, d) in datasets.iter().enumerate() {
                    let (m, objective) =
                        resolve_relations(&state, d, config, &mut rng)?;
                    history.push(RelationSnapshot {
                        step: state.step,
                        dataset: l,
                        relation: m.clone(),
                        objective,
                    });
                    current[l] = m;
                }
            }
        }
    }

    Ok(TrainReport {
        seed: config.seed,
        epochs: config.epochs,
        iterations_per_epoch,
        trace,
        relation_history: history,
        final_relations: current,
        clamp_events,
        final_state: state,
    })
}

fn non_finite(epoch: usize, iteration: usize, err: &Error) -> Error {
    Error::NonFiniteLoss {
        epoch,
        iteration,
        detail: err.to_string(),
    }
}

fn sgd_and_ema(
    state: &mut ClassifierState,
    grads: &MlpParams,
    velocity: &mut MlpParams,
    lr: f64,
    config: &TrainRunConfig,
) -> Result<()> {
    nn::sgd_step(state, grads, velocity, lr, config.optimizer.momentum)?;
    nn::ema_update(state, config.weights.gamma)
}

/// Gathers current-parameter predictions over a shuffled prefix of the
/// dataset and re-solves the relation objective exactly.
fn resolve_relations(
    state: &ClassifierState,
    dataset: &Dataset,
    config: &TrainRunConfig,
    rng: &mut ChaCha12Rng,
) -> Result<(RelationMatrix, RelationObjectiveValue)> {
    let take = dataset
        .len()
        .min(config.gather_multiplier * config.batch_size);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    order.truncate(take);
    let rows = dataset.features.select_rows(&order);
    let labels: Vec<usize> = order.iter().map(|&i| dataset.coarse_labels[i]).collect();
    let logits = nn::forward_logits(state, WhichParams::Current, &rows)?;
    let probs = nn::softmax_rows(&logits, 1.0)?;
    let cost = relations::build_cost_matrix(&probs, &labels, dataset.num_coarse)?;
    solve_relations_exact(&cost, config.weights.lambda_m)
}
