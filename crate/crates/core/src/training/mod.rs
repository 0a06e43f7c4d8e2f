//! Optimization, losses and image-quality metrics.

pub mod loss;
pub mod metrics;
pub mod optim;
pub mod trainer;
