//! Dense f64 tensors, a small reverse-mode tape and a finite-difference gradient checker.

mod gradcheck;
mod graph;
pub mod ops;
mod params;
mod tensor;

pub use gradcheck::{gradient_check, relative_error, GradCheckReport, TensorGradError, GRAD_ABS_FLOOR};
pub use graph::{Graph, Var};
pub use ops::{attention_mac_count, huber, linear, pinball, mac_count, matmul, reset_mac_count, scaled_dot_attention, scaled_dot_attention_with_weights};
pub use params::ParamStore;
pub use tensor::Tensor;
