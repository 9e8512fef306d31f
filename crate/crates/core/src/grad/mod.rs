//! Minimal reverse-mode gradient engine and optimizer.

mod adam;
mod check;
mod graph;
mod suite;

pub use adam::{AdamConfig, AdamState};
pub use check::{gradient_check, DEFAULT_STEP};
pub use graph::{Axis2, Gradients, Graph, Tensor, Var, NORM_CLAMP};
pub use suite::{check_primitives, primitive_names, PrimitiveCheck};
