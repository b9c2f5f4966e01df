//! Multi-task routing solver: problem definitions, instance generation, a
//! small autodiff engine, the policy network, training and evaluation.

pub mod eval;
pub mod generate;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vrp;
