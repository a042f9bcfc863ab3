//! Minimal dense/convolutional engine with reverse-mode differentiation.
//!
//! Graphs are built from the closed layer vocabulary in [`layers`], run
//! forward on `(batch, maps, height, width)` tensors, back-propagate a loss
//! gradient, and update with Adam. The engine is generic over [`Real`] so the
//! same architecture can be instantiated in `f64` for finite-difference checks.

mod container;
mod gradcheck;
mod graph;
pub mod layers;
mod real;
mod tensor;

pub use container::{read_tensors, write_tensors, MAGIC, VERSION};
pub use gradcheck::{gradient_check, layer_probes, random_batch, GradCheck, GRAD_FLOOR};
pub use graph::{cross_entropy, max_norm_project, AdamConfig, LayerRow, ModelGraph, NormGroup, PROB_CLAMP};
pub use layers::{Activation, Layer, Merge, Node, PadMode, Param, PoolKind};
pub(crate) use real::{gemm, Op};
pub use real::Real;
pub use tensor::Tensor;
