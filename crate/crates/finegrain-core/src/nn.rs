//! Feed-forward classifier: dense layers with ReLU between them, exact
//! reverse-mode gradients, momentum SGD and an EMA shadow copy of the
//! parameters that serves as a slowly-moving teacher.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, RngExt};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// One affine layer. Weights are row-major with shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Parameters of the classifier. Also reused as a shape-mirroring container
/// for gradients and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<LinearLayer>,
}

impl MlpParams {
    /// Fan-in scaled uniform initialization in the ReLU-preserving He form:
    /// weights drawn from `U(-sqrt(6/in_dim), sqrt(6/in_dim))`, biases zero.
    pub fn init<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig(
                "architecture needs at least input and output dims".into(),
            ));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidConfig("zero-width layer".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (in_dim, out_dim) = (w[0], w[1]);
            let bound = (6.0 / in_dim as f64).sqrt();
            let mut weight = DenseMatrix::zeros(out_dim, in_dim);
            for v in weight.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
            layers.push(LinearLayer {
                weight,
                bias: vec![0.0; out_dim],
            });
        }
        Ok(Self { layers })
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| LinearLayer {
                weight: DenseMatrix::zeros(l.out_dim(), l.in_dim()),
                bias: vec![0.0; l.out_dim()],
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, LinearLayer::in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, LinearLayer::out_dim)
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.in_dim() == b.in_dim() && a.out_dim() == b.out_dim())
    }
}

/// Per-dimension affine input transform `x -> (x - mean) * inv_std`, fitted
/// on training features and applied ahead of the first layer. Constant during
/// training, so it carries no gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            inv_std: vec![1.0; dim],
        }
    }

    /// Fits mean and standard deviation per feature column. Near-constant
    /// columns keep unit scale.
    pub fn fit(features: &DenseMatrix) -> Self {
        let n = features.rows().max(1) as f64;
        let dim = features.cols();
        let mut mean = vec![0.0; dim];
        for r in 0..features.rows() {
            for (m, &v) in mean.iter_mut().zip(features.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for r in 0..features.rows() {
            for ((s, &v), &m) in var.iter_mut().zip(features.row(r)).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let inv_std = var
            .iter()
            .map(|&s| {
                let std = (s / n).sqrt();
                if std > 1e-9 { 1.0 / std } else { 1.0 }
            })
            .collect();
        Self { mean, inv_std }
    }

    pub fn apply(&self, batch: &DenseMatrix) -> DenseMatrix {
        let mut out = batch.clone();
        for r in 0..out.rows() {
            for ((v, &m), &s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        out
    }
}

/// Classifier parameters together with their EMA shadow, the fitted input
/// transform and a step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierState {
    pub theta: MlpParams,
    pub theta_ema: MlpParams,
    pub scaler: Standardizer,
    pub step: u64,
}

impl ClassifierState {
    /// The EMA copy starts as an exact clone of the parameters; the input
    /// transform defaults to identity.
    pub fn new(theta: MlpParams) -> Self {
        let scaler = Standardizer::identity(theta.input_dim());
        Self::with_scaler(theta, scaler)
    }

    pub fn with_scaler(theta: MlpParams, scaler: Standardizer) -> Self {
        let theta_ema = theta.clone();
        Self {
            theta,
            theta_ema,
            scaler,
            step: 0,
        }
    }
}

/// Selects which parameter set a forward pass reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhichParams {
    Current,
    Ema,
}

/// One step-schedule event: from `epoch` on, the learning rate is multiplied
/// by `multiplier`. Multipliers below one decay; above one they end a warmup.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrMilestone {
    pub epoch: usize,
    pub multiplier: f64,
}

/// Momentum SGD settings with a step schedule (milestones -> multiplier).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub milestones: Vec<LrMilestone>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            milestones: Vec::new(),
        }
    }
}

impl OptimizerConfig {
    /// Step decay by `decay` at each given epoch.
    pub fn with_decay_milestones(mut self, epochs: &[usize], decay: f64) -> Self {
        self.milestones = epochs
            .iter()
            .map(|&epoch| LrMilestone {
                epoch,
                multiplier: decay,
            })
            .collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if self
            .milestones
            .windows(2)
            .any(|w| w[0].epoch >= w[1].epoch)
        {
            return Err(Error::InvalidConfig(
                "milestones must be strictly increasing".into(),
            ));
        }
        if self
            .milestones
            .iter()
            .any(|m| !(m.multiplier > 0.0 && m.multiplier.is_finite()))
        {
            return Err(Error::InvalidConfig(
                "milestone multipliers must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Effective learning rate at a given epoch (0-based): the base rate
    /// times every multiplier whose milestone has passed.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|m| epoch >= m.epoch)
            .fold(self.learning_rate, |lr, m| lr * m.multiplier)
    }
}

/// Per-layer activations retained for the backward pass.
/// `hidden[k]` is the post-ReLU output of layer `k` (absent for the last layer).
pub struct ForwardTrace {
    hidden: Vec<DenseMatrix>,
    pub logits: DenseMatrix,
}

fn check_input(params: &MlpParams, batch: &DenseMatrix) -> Result<()> {
    if params.layers.is_empty() {
        return Err(Error::InvalidConfig("classifier has no layers".into()));
    }
    if batch.cols() != params.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "batch has {} columns, classifier expects {}",
            batch.cols(),
            params.input_dim()
        )));
    }
    Ok(())
}

/// Affine map for a batch: `x * W^T + b`.
fn affine(batch: &DenseMatrix, layer: &LinearLayer) -> Result<DenseMatrix> {
    let mut out = batch.matmul_transpose(&layer.weight)?;
    for r in 0..out.rows() {
        for (v, b) in out.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    Ok(out)
}

/// Forward pass keeping intermediate activations.
pub fn forward_trace(params: &MlpParams, batch: &DenseMatrix) -> Result<ForwardTrace> {
    check_input(params, batch)?;
    let depth = params.layers.len();
    let mut hidden = Vec::with_capacity(depth - 1);
    for (k, layer) in params.layers.iter().enumerate() {
        let input = hidden.last().unwrap_or(batch);
        let mut z = affine(input, layer)?;
        if k + 1 < depth {
            for v in z.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            hidden.push(z);
        } else {
            return Ok(ForwardTrace { hidden, logits: z });
        }
    }
    unreachable!("check_input guarantees at least one layer")
}

/// Logits for a batch under the chosen parameter set, after the state's
/// input transform. Deterministic for a fixed state and batch.
pub fn forward_logits(
    state: &ClassifierState,
    which: WhichParams,
    batch: &DenseMatrix,
) -> Result<DenseMatrix> {
    let params = match which {
        WhichParams::Current => &state.theta,
        WhichParams::Ema => &state.theta_ema,
    };
    check_input(params, batch)?;
    let scaled = state.scaler.apply(batch);
    Ok(forward_trace(params, &scaled)?.logits)
}

/// Row-wise softmax at the given temperature, stabilized by max subtraction.
pub fn softmax_rows(logits: &DenseMatrix, temperature: f64) -> Result<DenseMatrix> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits in softmax".into()));
    }
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Pulls a gradient w.r.t. probabilities back through the row softmax:
/// `dL/ds_k = p_k (g_k - sum_i g_i p_i)`.
pub fn softmax_backward(probs: &DenseMatrix, grad_probs: &DenseMatrix) -> Result<DenseMatrix> {
    if probs.rows() != grad_probs.rows() || probs.cols() != grad_probs.cols() {
        return Err(Error::DimensionMismatch(
            "softmax_backward shape mismatch".into(),
        ));
    }
    let mut out = DenseMatrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let g = grad_probs.row(r);
        let dot: f64 = p.iter().zip(g).map(|(&pi, &gi)| pi * gi).sum();
        for ((o, &pi), &gi) in out.row_mut(r).iter_mut().zip(p).zip(g) {
            *o = pi * (gi - dot);
        }
    }
    Ok(out)
}

/// Reverse-mode gradients of `<grad_logits, logits>` w.r.t. every parameter,
/// reusing the activations recorded by [`forward_trace`].
pub fn backward_from_trace(
    params: &MlpParams,
    batch: &DenseMatrix,
    trace: &ForwardTrace,
    grad_logits: &DenseMatrix,
) -> Result<MlpParams> {
    if grad_logits.rows() != trace.logits.rows() || grad_logits.cols() != trace.logits.cols() {
        return Err(Error::DimensionMismatch(
            "upstream gradient shape differs from logits".into(),
        ));
    }
    let depth = params.layers.len();
    let mut grads = params.zeros_like();
    let mut delta = grad_logits.clone();
    for k in (0..depth).rev() {
        let input: &DenseMatrix = if k == 0 { batch } else { &trace.hidden[k - 1] };
        let layer = &params.layers[k];
        let g = &mut grads.layers[k];
        // dW = delta^T * input, db = column sums of delta
        for b in 0..delta.rows() {
            let d_row = delta.row(b);
            let x_row = input.row(b);
            for (o, &d) in d_row.iter().enumerate() {
                g.bias[o] += d;
                if d == 0.0 {
                    continue;
                }
                let w_row = g.weight.row_mut(o);
                for (w, &x) in w_row.iter_mut().zip(x_row) {
                    *w += d * x;
                }
            }
        }
        if k > 0 {
            // d_input = delta * W, gated by the ReLU that produced `input`
            let mut d_input = delta.matmul(&layer.weight)?;
            for b in 0..d_input.rows() {
                let act = input.row(b);
                for (d, &a) in d_input.row_mut(b).iter_mut().zip(act) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            delta = d_input;
        }
    }
    Ok(grads)
}

/// Exact reverse-mode gradients of `<grad_logits, logits(batch)>` for every
/// weight and bias, recomputing the forward activations internally. The
/// state's input transform is applied first, matching [`forward_logits`].
pub fn backward(
    state: &ClassifierState,
    batch: &DenseMatrix,
    grad_logits: &DenseMatrix,
) -> Result<MlpParams> {
    check_input(&state.theta, batch)?;
    let scaled = state.scaler.apply(batch);
    let trace = forward_trace(&state.theta, &scaled)?;
    backward_from_trace(&state.theta, &scaled, &trace, grad_logits)
}

/// Momentum SGD: `v <- momentum * v + g`, `theta <- theta - lr * v`.
/// Increments the step counter.
pub fn sgd_step(
    state: &mut ClassifierState,
    grads: &MlpParams,
    velocity: &mut MlpParams,
    learning_rate: f64,
    momentum: f64,
) -> Result<()> {
    if !state.theta.same_shape(grads) || !state.theta.same_shape(velocity) {
        return Err(Error::DimensionMismatch(
            "gradient or velocity shape differs from parameters".into(),
        ));
    }
    for ((p, g), v) in state
        .theta
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut velocity.layers)
    {
        for ((pw, &gw), vw) in p
            .weight
            .data_mut()
            .iter_mut()
            .zip(g.weight.data())
            .zip(v.weight.data_mut())
        {
            *vw = momentum * *vw + gw;
            *pw -= learning_rate * *vw;
        }
        for ((pb, &gb), vb) in p.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
            *vb = momentum * *vb + gb;
            *pb -= learning_rate * *vb;
        }
    }
    state.step += 1;
    Ok(())
}

/// EMA shadow update: `theta_ema <- gamma * theta_ema + (1 - gamma) * theta`.
pub fn ema_update(state: &mut ClassifierState, gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidConfig("gamma must be in [0, 1)".into()));
    }
    for (e, p) in state.theta_ema.layers.iter_mut().zip(&state.theta.layers) {
        for (ew, &pw) in e.weight.data_mut().iter_mut().zip(p.weight.data()) {
            *ew = gamma * *ew + (1.0 - gamma) * pw;
        }
        for (eb, &pb) in e.bias.iter_mut().zip(&p.bias) {
            *eb = gamma * *eb + (1.0 - gamma) * pb;
        }
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FGCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes a versioned binary checkpoint. Parameter round-trips are bit-exact.
pub fn save_checkpoint(path: &Path, state: &ClassifierState, seed: u64) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.extend_from_slice(&(state.theta.layers.len() as u32).to_le_bytes());
    for layer in &state.theta.layers {
        buf.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
    }
    for v in state.scaler.mean.iter().chain(&state.scaler.inv_std) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for params in [&state.theta, &state.theta_ema] {
        for layer in &params.layers {
            for v in layer.weight.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in &layer.bias {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]. Returns the state and
/// the stored RNG seed.
pub fn load_checkpoint(path: &Path) -> Result<(ClassifierState, u64)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };
    if take(&mut cursor, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let seed = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
    let step = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
    let n_layers = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_dim = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let out_dim = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        shapes.push((in_dim, out_dim));
    }
    let input_dim = shapes.first().map_or(0, |&(i, _)| i);
    let mut scaler = Standardizer::identity(input_dim);
    for v in scaler.mean.iter_mut().chain(&mut scaler.inv_std) {
        *v = f64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
    }
    let read_params = |cursor: &mut usize| -> Result<MlpParams> {
        let mut layers = Vec::with_capacity(n_layers);
        for &(in_dim, out_dim) in &shapes {
            let mut weight = DenseMatrix::zeros(out_dim, in_dim);
            for v in weight.data_mut() {
                *v = f64::from_le_bytes(take(cursor, 8)?.try_into().unwrap());
            }
            let mut bias = vec![0.0; out_dim];
            for v in &mut bias {
                *v = f64::from_le_bytes(take(cursor, 8)?.try_into().unwrap());
            }
            layers.push(LinearLayer { weight, bias });
        }
        Ok(MlpParams { layers })
    };
    let theta = read_params(&mut cursor)?;
    let theta_ema = read_params(&mut cursor)?;
    if cursor != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((
        ClassifierState {
            theta,
            theta_ema,
            scaler,
            step,
        },
        seed,
    ))
}
