//! Prototype-pool classification head trained on precomputed feature maps.
//!
//! * [`diffengine`]: small reverse-mode autodiff engine and gradient checker.
//! * [`poolcore`]: prototype pool, Gumbel-Softmax slots, focal similarity.
//! * [`training`]: losses, temperature schedule, three-phase training, projection, checkpoints.
//! * [`dataio`]: `PPFM` feature-map files and the synthetic planted-part generator.
//! * [`analysis`]: assignment, sharing and activation exports.
//! * [`cli`]: the `protopool` command line.

pub mod diffengine;
pub mod dataio;
pub mod poolcore;
pub mod training;
pub mod analysis;
pub mod cli;
