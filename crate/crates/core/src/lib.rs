//! Model inversion from batch-norm statistics (DeepInversion and its adaptive,
//! student-in-the-loop variant) and the data-free tasks built on the
//! synthesized images: knowledge distillation, hardware-aware Taylor pruning
//! and class-incremental learning.

pub mod data;
pub mod distill;
pub mod error;
pub mod graph;
pub mod inversion;
pub mod nn;
pub mod optim;
pub mod pruning;
pub mod real;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use nn::{Mode, Model};
pub use real::Real;
pub use tensor::Tensor;
