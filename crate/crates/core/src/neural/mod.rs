//! Minimal numerical kernel: tensors, a differentiation tape, layers,
//! Adam, and a finite-difference gradient oracle.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, clip_grad_norm, AdamConfig};
pub use gradcheck::{analytic_grads, compare_with_fd, grad_check, GradCheckOptions, GradCheckReport};
pub use layers::{AttentionMask, ConceptGat, GatLayer, GruCell, ImageEncoder, Linear, MultiHeadPool};
pub use params::{Param, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{masked_softmax, sigmoid, softmax, Tensor};
