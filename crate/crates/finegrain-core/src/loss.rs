//! Loss terms for the fine-grained classifier.
//!
//! Every term is evaluated over a batch of probability rows and returns both
//! its value and its gradient with respect to those probabilities; the total
//! objective additionally folds the gradient back through the row softmax so
//! the trainer receives a single gradient over logits.
//!
//! The teacher branch is always treated as a constant: target distributions
//! come from EMA logits and neighbor predictions come from EMA parameters, and
//! no gradient flows through either.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::nn::{self, ClassifierState, WhichParams};
use crate::relations::RelationMatrix;

/// Floor applied inside every logarithm; probabilities of exactly zero are
/// clamped here and the event is counted.
pub const LOG_EPS: f64 = 1e-12;

/// Loss hyperparameters. Defaults follow the reference configuration:
/// `lambda1 = lambda2 = 0.5`, `lambda3 = 2`, `lambda_m = 0.1`, `T = 0.9`,
/// `gamma = 0.99`, `L = 20`, `P = 20`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda_m: f64,
    pub temperature: f64,
    pub gamma: f64,
    pub num_neighbors: usize,
    pub update_period: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
            lambda3: 2.0,
            lambda_m: 0.1,
            temperature: 0.9,
            gamma: 0.99,
            num_neighbors: 20,
            update_period: 20,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda_m", self.lambda_m),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig("gamma must be in [0, 1)".into()));
        }
        if self.num_neighbors == 0 {
            return Err(Error::InvalidConfig("num_neighbors must be >= 1".into()));
        }
        if self.update_period == 0 {
            return Err(Error::InvalidConfig("update_period must be >= 1".into()));
        }
        Ok(())
    }
}

/// Classifier outputs for one batch: logits, fine probabilities, the coarse
/// probabilities induced by a relation matrix, and the batch-mean prediction.
#[derive(Debug, Clone)]
pub struct PredictionBatch {
    pub logits: DenseMatrix,
    pub probs: DenseMatrix,
    pub coarse_probs: DenseMatrix,
    pub mean_prediction: Vec<f64>,
}

impl PredictionBatch {
    pub fn compute(
        state: &ClassifierState,
        which: WhichParams,
        batch: &DenseMatrix,
        relation: &RelationMatrix,
    ) -> Result<Self> {
        let logits = nn::forward_logits(state, which, batch)?;
        let probs = nn::softmax_rows(&logits, 1.0)?;
        let coarse_probs = coarse_probabilities(&probs, &[relation], None)?;
        let mean_prediction = probs.column_means();
        Ok(Self {
            logits,
            probs,
            coarse_probs,
            mean_prediction,
        })
    }
}

/// Marginalizes fine probabilities onto coarse classes, `p_c = M^T p_f` per
/// row. `rel_index[b]` selects the relation for row `b`; a single shared
/// relation is expressed by `relations.len() == 1` and `rel_index == None`.
pub fn coarse_probabilities(
    probs: &DenseMatrix,
    relations: &[&RelationMatrix],
    rel_index: Option<&[usize]>,
) -> Result<DenseMatrix> {
    let k_c_max = relations.iter().map(|m| m.num_coarse()).max().unwrap_or(0);
    let mut out = DenseMatrix::zeros(probs.rows(), k_c_max);
    for b in 0..probs.rows() {
        let m = relation_for_row(relations, rel_index, b)?;
        if m.num_fine() != probs.cols() {
            return Err(Error::DimensionMismatch(format!(
                "relation has {} fine classes, probabilities have {}",
                m.num_fine(),
                probs.cols()
            )));
        }
        let row = probs.row(b);
        let out_row = out.row_mut(b);
        for (i, &p) in row.iter().enumerate() {
            out_row[m.parent(i)] += p;
        }
    }
    Ok(out)
}

fn relation_for_row<'a>(
    relations: &[&'a RelationMatrix],
    rel_index: Option<&[usize]>,
    row: usize,
) -> Result<&'a RelationMatrix> {
    match rel_index {
        None => relations
            .first()
            .copied()
            .ok_or_else(|| Error::InvalidConfig("no relation matrix supplied".into())),
        Some(idx) => {
            let l = idx[row];
            relations.get(l).copied().ok_or(Error::LabelOutOfRange {
                label: l,
                bound: relations.len(),
            })
        }
    }
}

/// A loss value with its gradient over the batch probabilities and the count
/// of epsilon-clamped logarithms.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad_probs: DenseMatrix,
    pub clamp_events: usize,
}

/// Coarse cross-entropy: mean over the batch of `-ln p_c[y_c]` with
/// `p_c = M^T p_f`. The gradient is routed only to the fine classes mapped to
/// the true coarse class, which therefore all receive the same value.
pub fn coarse_loss(
    probs: &DenseMatrix,
    relation: &RelationMatrix,
    coarse_labels: &[usize],
) -> Result<LossOutput> {
    coarse_loss_multi(probs, &[relation], None, coarse_labels)
}

pub fn coarse_loss_multi(
    probs: &DenseMatrix,
    relations: &[&RelationMatrix],
    rel_index: Option<&[usize]>,
    coarse_labels: &[usize],
) -> Result<LossOutput> {
    let n = check_batch(probs, coarse_labels)?;
    let mut value = 0.0;
    let mut grad = DenseMatrix::zeros(probs.rows(), probs.cols());
    let mut clamps = 0;
    for (b, &y) in coarse_labels.iter().enumerate() {
        let m = relation_for_row(relations, rel_index, b)?;
        if y >= m.num_coarse() {
            return Err(Error::LabelOutOfRange {
                label: y,
                bound: m.num_coarse(),
            });
        }
        let row = probs.row(b);
        let mut p_c = 0.0;
        for (i, &p) in row.iter().enumerate() {
            if m.parent(i) == y {
                p_c += p;
            }
        }
        let clamped = if p_c < LOG_EPS {
            clamps += 1;
            LOG_EPS
        } else {
            p_c
        };
        value -= clamped.ln();
        let g = -1.0 / (n * clamped);
        let grad_row = grad.row_mut(b);
        for (i, gi) in grad_row.iter_mut().enumerate() {
            if m.parent(i) == y {
                *gi = g;
            }
        }
    }
    Ok(LossOutput {
        value: value / n,
        grad_probs: grad,
        clamp_events: clamps,
    })
}

/// Neighbor-consistency loss: the negative log-geometric mean of dot products
/// between each sample's current prediction and the EMA predictions of its
/// neighbors. `neighbor_probs` holds `L` consecutive rows per sample and is
/// treated as constant.
pub fn neighbor_loss(
    probs: &DenseMatrix,
    neighbor_probs: &DenseMatrix,
    num_neighbors: usize,
) -> Result<LossOutput> {
    if num_neighbors == 0 {
        return Err(Error::InvalidConfig("num_neighbors must be >= 1".into()));
    }
    if neighbor_probs.rows() != probs.rows() * num_neighbors
        || neighbor_probs.cols() != probs.cols()
    {
        return Err(Error::DimensionMismatch(format!(
            "expected {}x{} neighbor predictions, got {}x{}",
            probs.rows() * num_neighbors,
            probs.cols(),
            neighbor_probs.rows(),
            neighbor_probs.cols()
        )));
    }
    let n = probs.rows() as f64;
    let l = num_neighbors as f64;
    let mut value = 0.0;
    let mut grad = DenseMatrix::zeros(probs.rows(), probs.cols());
    let mut clamps = 0;
    for b in 0..probs.rows() {
        let p = probs.row(b);
        for k in 0..num_neighbors {
            let e = neighbor_probs.row(b * num_neighbors + k);
            let mut dot = 0.0;
            for (&pi, &ei) in p.iter().zip(e) {
                dot += pi * ei;
            }
            let clamped = if dot < LOG_EPS {
                clamps += 1;
                LOG_EPS
            } else {
                dot
            };
            value -= clamped.ln();
            let scale = -1.0 / (n * l * clamped);
            for (gi, &ei) in grad.row_mut(b).iter_mut().zip(e) {
                *gi += scale * ei;
            }
        }
    }
    Ok(LossOutput {
        value: value / (n * l),
        grad_probs: grad,
        clamp_events: clamps,
    })
}

/// Target distribution for one sample: a temperature-sharpened softmax over
/// the EMA logits, masked to the fine classes related to the coarse label.
pub fn target_q_row(
    ema_logits: &[f64],
    coarse_label: usize,
    relation: &RelationMatrix,
    temperature: f64,
) -> Result<Vec<f64>> {
    if ema_logits.len() != relation.num_fine() {
        return Err(Error::DimensionMismatch(format!(
            "logit row has {} entries, relation has {} fine classes",
            ema_logits.len(),
            relation.num_fine()
        )));
    }
    if coarse_label >= relation.num_coarse() {
        return Err(Error::LabelOutOfRange {
            label: coarse_label,
            bound: relation.num_coarse(),
        });
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let siblings: Vec<usize> = (0..relation.num_fine())
        .filter(|&i| relation.parent(i) == coarse_label)
        .collect();
    if siblings.is_empty() {
        return Err(Error::Infeasible(format!(
            "coarse class {coarse_label} has no fine classes"
        )));
    }
    let max = siblings
        .iter()
        .map(|&i| ema_logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut q = vec![0.0; ema_logits.len()];
    let mut z = 0.0;
    for &i in &siblings {
        let e = ((ema_logits[i] - max) / temperature).exp();
        q[i] = e;
        z += e;
    }
    for &i in &siblings {
        q[i] /= z;
    }
    Ok(q)
}

/// Stacks [`target_q_row`] over a batch.
pub fn target_q(
    ema_logits: &DenseMatrix,
    coarse_labels: &[usize],
    relations: &[&RelationMatrix],
    rel_index: Option<&[usize]>,
    temperature: f64,
) -> Result<DenseMatrix> {
    check_batch(ema_logits, coarse_labels)?;
    let mut out = DenseMatrix::zeros(ema_logits.rows(), ema_logits.cols());
    for (b, &y) in coarse_labels.iter().enumerate() {
        let m = relation_for_row(relations, rel_index, b)?;
        let q = target_q_row(ema_logits.row(b), y, m, temperature)?;
        out.row_mut(b).copy_from_slice(&q);
    }
    Ok(out)
}

/// Confidence loss: mean cross-entropy between target rows `q` and current
/// probabilities. Composed with the softmax this yields the `(p - q)/N`
/// gradient over logits.
pub fn confidence_loss(targets: &DenseMatrix, probs: &DenseMatrix) -> Result<LossOutput> {
    if targets.rows() != probs.rows() || targets.cols() != probs.cols() {
        return Err(Error::DimensionMismatch(
            "target and probability shapes differ".into(),
        ));
    }
    let n = probs.rows() as f64;
    let mut value = 0.0;
    let mut grad = DenseMatrix::zeros(probs.rows(), probs.cols());
    let mut clamps = 0;
    for b in 0..probs.rows() {
        let q = targets.row(b);
        let p = probs.row(b);
        let g = grad.row_mut(b);
        for ((&qi, &pi), gi) in q.iter().zip(p).zip(g) {
            if qi == 0.0 {
                continue;
            }
            let clamped = if pi < LOG_EPS {
                clamps += 1;
                LOG_EPS
            } else {
                pi
            };
            value -= qi * clamped.ln();
            *gi = -qi / (n * clamped);
        }
    }
    Ok(LossOutput {
        value: value / n,
        grad_probs: grad,
        clamp_events: clamps,
    })
}

/// Joint fine-grained loss: neighbor consistency plus confidence.
pub fn fine_loss(
    probs: &DenseMatrix,
    neighbor_probs: &DenseMatrix,
    num_neighbors: usize,
    targets: &DenseMatrix,
) -> Result<LossOutput> {
    let nn_part = neighbor_loss(probs, neighbor_probs, num_neighbors)?;
    let conf_part = confidence_loss(targets, probs)?;
    let mut grad = nn_part.grad_probs;
    for (g, &c) in grad.data_mut().iter_mut().zip(conf_part.grad_probs.data()) {
        *g += c;
    }
    Ok(LossOutput {
        value: nn_part.value + conf_part.value,
        grad_probs: grad,
        clamp_events: nn_part.clamp_events + conf_part.clamp_events,
    })
}

/// Entropy regularizer over the mean prediction:
/// `ln K_F + sum_i m_i ln m_i`, zero exactly at the uniform mean and positive
/// otherwise. Returns the gradient w.r.t. the mean prediction.
pub fn entropy_reg(mean_prediction: &[f64]) -> (f64, Vec<f64>) {
    let k = mean_prediction.len() as f64;
    let mut value = k.ln();
    let mut grad = vec![0.0; mean_prediction.len()];
    for (&m, g) in mean_prediction.iter().zip(&mut grad) {
        if m > 0.0 {
            value += m * m.ln();
        }
        *g = m.max(LOG_EPS).ln() + 1.0;
    }
    (value.max(0.0), grad)
}

/// Which objective terms are active; mirrors the component-removal ablation.
/// Disabling the coarse term also disables the confidence term, which depends
/// on the relation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSwitches {
    pub coarse: bool,
    pub fine: bool,
    pub reg: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self {
            coarse: true,
            fine: true,
            reg: true,
        }
    }
}

/// Inputs to [`total_loss`]. `relations` and `rel_index` follow the
/// convention of [`coarse_probabilities`]; `neighbor_probs` may be omitted
/// when the fine term is disabled.
pub struct LossInputs<'a> {
    pub probs: &'a DenseMatrix,
    pub coarse_labels: &'a [usize],
    pub relations: &'a [&'a RelationMatrix],
    pub rel_index: Option<&'a [usize]>,
    pub ema_logits: &'a DenseMatrix,
    pub neighbor_probs: Option<&'a DenseMatrix>,
    pub weights: &'a LossWeights,
    pub switches: LossSwitches,
}

/// Individual loss values for one batch.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub coarse: f64,
    pub neighbor: f64,
    pub confidence: f64,
    pub fine: f64,
    pub entropy: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub terms: LossTerms,
    pub grad_logits: DenseMatrix,
    pub clamp_events: usize,
}

/// Weighted objective `lambda1 * L_coarse + lambda2 * L_fine + lambda3 *
/// L_reg` with its gradient over logits.
pub fn total_loss(inputs: &LossInputs) -> Result<TotalLoss> {
    let LossInputs {
        probs,
        coarse_labels,
        relations,
        rel_index,
        ema_logits,
        neighbor_probs,
        weights,
        switches,
    } = inputs;
    weights.validate()?;
    check_batch(probs, coarse_labels)?;
    let mut terms = LossTerms::default();
    let mut grad_probs = DenseMatrix::zeros(probs.rows(), probs.cols());
    let mut clamps = 0;

    if switches.coarse && weights.lambda1 != 0.0 {
        let part = coarse_loss_multi(probs, relations, *rel_index, coarse_labels)?;
        terms.coarse = part.value;
        clamps += part.clamp_events;
        axpy(&mut grad_probs, weights.lambda1, &part.grad_probs);
    }
    if switches.fine && weights.lambda2 != 0.0 {
        let neighbors = neighbor_probs.ok_or_else(|| {
            Error::InvalidConfig("fine loss enabled but no neighbor predictions given".into())
        })?;
        let nn_part = neighbor_loss(probs, neighbors, weights.num_neighbors)?;
        terms.neighbor = nn_part.value;
        clamps += nn_part.clamp_events;
        axpy(&mut grad_probs, weights.lambda2, &nn_part.grad_probs);
        if switches.coarse {
            let q = target_q(
                ema_logits,
                coarse_labels,
                relations,
                *rel_index,
                weights.temperature,
            )?;
            let conf_part = confidence_loss(&q, probs)?;
            terms.confidence = conf_part.value;
            clamps += conf_part.clamp_events;
            axpy(&mut grad_probs, weights.lambda2, &conf_part.grad_probs);
        }
        terms.fine = terms.neighbor + terms.confidence;
    }
    if switches.reg && weights.lambda3 != 0.0 {
        let mean = probs.column_means();
        let (value, grad_mean) = entropy_reg(&mean);
        terms.entropy = value;
        let scale = weights.lambda3 / probs.rows() as f64;
        for b in 0..probs.rows() {
            for (g, &gm) in grad_probs.row_mut(b).iter_mut().zip(&grad_mean) {
                *g += scale * gm;
            }
        }
    }
    terms.total = weights.lambda1 * terms.coarse
        + weights.lambda2 * terms.fine
        + weights.lambda3 * terms.entropy;
    let grad_logits = nn::softmax_backward(probs, &grad_probs)?;
    Ok(TotalLoss {
        terms,
        grad_logits,
        clamp_events: clamps,
    })
}

fn axpy(acc: &mut DenseMatrix, scale: f64, other: &DenseMatrix) {
    for (a, &o) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += scale * o;
    }
}

fn check_batch(matrix: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    if matrix.rows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} rows but {} labels",
            matrix.rows(),
            labels.len()
        )));
    }
    if matrix.rows() == 0 {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    Ok(matrix.rows() as f64)
}
