//! Multi-task sequence labelling with a gated task interaction layer.
//!
//! The crate is layered bottom-up: [`tensor`] and [`graph`] provide dense
//! values and reverse-mode differentiation, [`layers`] and [`crf`] build the
//! neural blocks, [`model`] wires them into the network variants, and
//! [`train`] fits them. [`data`] and [`eval`] handle corpora and scoring.

pub mod crf;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod model;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, GtiError, Result};
pub use graph::{Graph, OpKind, Var};
pub use model::{GtiConfig, GtiModel, Variant};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
