//! Hand-rolled f64 neural network stack: parameter store, autodiff tape,
//! layers, Adam, and finite-difference gradient verification.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use layers::{dropout_mask, xavier_uniform, BatchNorm, Linear, Mlp};
pub use optim::{sgd_step, Adam};
pub use params::{ParamId, ParamStore};
pub use tape::{Grads, Tape, Var};
