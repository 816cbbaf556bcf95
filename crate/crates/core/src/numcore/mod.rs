//! Dense tensors, reverse-mode differentiation, optimizers and seeded RNG.

pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use nn::{attend, cross_attention, AttentionWeights, Init, Linear};
pub use optim::{Optimizer, OptimizerConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::SeededRng;
pub use tape::{Gradients, RotationTable, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
