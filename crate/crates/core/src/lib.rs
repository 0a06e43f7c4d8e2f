pub mod attention;
pub mod autograd;
pub mod ceda;
pub mod dehazer;
pub mod encoder;
pub mod error;
pub mod haze;
pub mod image;
pub mod layers;
pub mod mamba;
pub mod network;
pub mod training;

pub use autograd::{Graph, ParamStore, Scalar, Tensor, Var};
pub use error::{Error, Result};
