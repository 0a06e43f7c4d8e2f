pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod nn;
pub mod resample;
pub mod scan;
pub mod shape;
