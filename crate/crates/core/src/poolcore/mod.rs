//! The prototype pool layer: slot distributions over a shared pool of
//! prototypes, focal similarity, and the block-initialized classifier head.

mod gumbel;
mod model;
mod orth;
mod similarity;

pub use gumbel::{argmax, gumbel_from_uniform, gumbel_noise, gumbel_softmax, harden, GumbelVariant, SlotRelaxation};
pub use model::{
    AddOn, BatchGraph, ClassifierHead, FeatureMap, ForwardMode, ForwardVars, ParamVars, ModelConfig, PrototypePool, ProtoPoolModel, SlotBank,
    Trainable, MAX_SLOTS,
};
pub use orth::{orthogonality_loss, orthogonality_loss_value};
pub use similarity::{
    activation_map, base_similarity, base_similarity_value, focal_similarity, focal_similarity_value, slot_similarity,
    DEFAULT_EPSILON,
};

use crate::diffengine::GraphError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}
