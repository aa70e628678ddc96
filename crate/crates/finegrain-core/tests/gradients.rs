//! End-to-end gradient composition: finite differences through the full
//! pipeline (standardizer -> classifier -> softmax -> weighted objective)
//! with respect to every weight and bias.

use finegrain_core::loss::{self, LossInputs, LossSwitches, LossWeights};
use finegrain_core::matrix::DenseMatrix;
use finegrain_core::nn::{self, ClassifierState, Standardizer, WhichParams};
use finegrain_core::relations::RelationMatrix;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;

#[test]
fn total_loss_parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    let (batch_size, dim, k_f, k_c, l) = (5usize, 3usize, 4usize, 2usize, 2usize);
    let relation = RelationMatrix::new(vec![0, 0, 1, 1], k_c).unwrap();
    let params = nn::MlpParams::init(&[dim, 6, k_f], &mut rng).unwrap();
    let scaler = Standardizer {
        mean: vec![0.2, -0.1, 0.5],
        inv_std: vec![1.5, 0.8, 1.0],
    };
    let state = ClassifierState::with_scaler(params, scaler);

    let batch = DenseMatrix::from_vec(
        batch_size,
        dim,
        (0..batch_size * dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let labels: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..k_c)).collect();
    let neighbor_logits = DenseMatrix::from_vec(
        batch_size * l,
        k_f,
        (0..batch_size * l * k_f)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let neighbor_probs = nn::softmax_rows(&neighbor_logits, 1.0).unwrap();
    let weights = LossWeights {
        num_neighbors: l,
        ..LossWeights::default()
    };

    // the teacher branch is held fixed while differentiating the student
    let ema_logits = nn::forward_logits(&state, WhichParams::Ema, &batch).unwrap();

    let objective = |s: &ClassifierState| -> f64 {
        let logits = nn::forward_logits(s, WhichParams::Current, &batch).unwrap();
        let probs = nn::softmax_rows(&logits, 1.0).unwrap();
        loss::total_loss(&LossInputs {
            probs: &probs,
            coarse_labels: &labels,
            relations: &[&relation],
            rel_index: None,
            ema_logits: &ema_logits,
            neighbor_probs: Some(&neighbor_probs),
            weights: &weights,
            switches: LossSwitches::default(),
        })
        .unwrap()
        .terms
        .total
    };

    let logits = nn::forward_logits(&state, WhichParams::Current, &batch).unwrap();
    let probs = nn::softmax_rows(&logits, 1.0).unwrap();
    let total = loss::total_loss(&LossInputs {
        probs: &probs,
        coarse_labels: &labels,
        relations: &[&relation],
        rel_index: None,
        ema_logits: &ema_logits,
        neighbor_probs: Some(&neighbor_probs),
        weights: &weights,
        switches: LossSwitches::default(),
    })
    .unwrap();
    let grads = nn::backward(&state, &batch, &total.grad_logits).unwrap();

    let h = 1e-5;
    for layer in 0..grads.layers.len() {
        let weight_len = grads.layers[layer].weight.data().len();
        for idx in 0..weight_len {
            let mut plus = state.clone();
            plus.theta.layers[layer].weight.data_mut()[idx] += h;
            let mut minus = state.clone();
            minus.theta.layers[layer].weight.data_mut()[idx] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let analytic = grads.layers[layer].weight.data()[idx];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic - numeric).abs() / denom < 1e-5
                    || (analytic - numeric).abs() < 1e-9,
                "layer {layer} weight {idx}: {analytic} vs {numeric}"
            );
        }
        for idx in 0..grads.layers[layer].bias.len() {
            let mut plus = state.clone();
            plus.theta.layers[layer].bias[idx] += h;
            let mut minus = state.clone();
            minus.theta.layers[layer].bias[idx] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let analytic = grads.layers[layer].bias[idx];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic - numeric).abs() / denom < 1e-5
                    || (analytic - numeric).abs() < 1e-9,
                "layer {layer} bias {idx}: {analytic} vs {numeric}"
            );
        }
    }
}
