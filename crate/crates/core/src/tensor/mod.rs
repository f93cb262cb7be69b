//! Reverse-mode automatic differentiation over `ndarray` tensors.

mod graph;
mod ops_basic;
mod ops_conv;
mod ops_linalg;
mod ops_norm;
mod ops_seq;
mod ops_signal;
mod params;

pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use ops_linalg::mm;
pub use ops_norm::NormKind;
pub use ops_seq::{fold_seq_raw, unfold_len, unfold_seq_raw};
pub use params::{Init, Param, ParamId, ParamStore};
