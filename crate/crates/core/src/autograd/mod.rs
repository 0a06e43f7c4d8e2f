//! Dense tensors and a tape-based reverse-mode differentiation engine.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod ops;
mod params;
mod tensor;

pub use graph::{GradMode, Graph, Var};
pub use ops::conv::Padding;
pub use params::{Init, Param, ParamId, ParamStore};
pub use tensor::{numel, Scalar, Tensor};
