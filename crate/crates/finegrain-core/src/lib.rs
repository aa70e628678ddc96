//! Discovery of fine-grained classes inside coarsely labeled data.
//!
//! The training loop alternates two steps: gradient descent on a fine-grained
//! classifier driven by coarse supervision, neighbor consistency, confidence
//! targets and an entropy regularizer; and exact discrete optimization of the
//! binary matrix relating fine classes to coarse classes. The crate also
//! ships the synthetic data generator and the clustering metrics used to
//! validate both halves.
//!
//! Entry points:
//! - [`datagen::generate`] / [`datagen::load_csv`] for data,
//! - [`trainer::train_single`] / [`trainer::train_multi`] for training,
//! - [`relations::solve_relations_exact`] for the relation solver on its own,
//! - [`metrics::evaluate`] for accuracy / ARI / macro accuracy / graph edit
//!   distance against a reference taxonomy.

pub mod datagen;
pub mod error;
mod flow;
pub mod loss;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod relations;
pub mod trainer;

pub use datagen::{Dataset, TaxonomySpec};
pub use error::{Error, Result};
pub use loss::{LossSwitches, LossWeights};
pub use matrix::DenseMatrix;
pub use metrics::MetricsReport;
pub use nn::{ClassifierState, MlpParams, OptimizerConfig, WhichParams};
pub use relations::{CostMatrix, RelationMatrix, RelationObjectiveValue};
pub use trainer::{NeighborIndex, TrainReport, TrainRunConfig};

/// Hard fine-class predictions: row-wise argmax of the classifier outputs,
/// ties resolved to the lowest class index.
pub fn predict_fine(
    state: &ClassifierState,
    which: WhichParams,
    features: &DenseMatrix,
) -> Result<Vec<usize>> {
    let logits = nn::forward_logits(state, which, features)?;
    Ok(logits.argmax_rows())
}
