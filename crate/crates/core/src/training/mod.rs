//! Loss assembly, temperature schedule, the phased training loop, prototype
//! projection and checkpoints.

mod checkpoint;
mod loss;
mod optim;
mod projection;
mod schedule;
mod trainer;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, Phase, RngState,
};
pub use loss::{assemble_loss, LossBreakdown, LossVars, LossWeights};
pub use optim::Adam;
pub use projection::{class_sets, project_prototypes, ProjectionEntry, ProjectionReport};
pub use schedule::{temperature, Schedule, TauSchedule};
pub use trainer::{
    binarized_fraction, evaluate, max_q_median, metrics_csv, predict_logits, train, train_from, write_metrics, EpochMetrics, EvalReport,
    TrainConfig, TrainOutcome, METRICS_HEADER,
};

use crate::diffengine::GraphError;
use crate::poolcore::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged in {phase} epoch {epoch}: {what}")]
    Diverged {
        phase: Phase,
        epoch: u32,
        what: String,
        last_good: Box<Checkpoint>,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl From<GraphError> for TrainError {
    fn from(e: GraphError) -> Self {
        TrainError::Model(e.into())
    }
}
