//! Dense numerical core: matrices, MLPs with explicit backpropagation, Adam,
//! a finite-difference gradient oracle and the checkpoint container.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod matrix;
mod mlp;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use gradcheck::{finite_difference_error, gradient_check, gradient_check_batch, relative_error};
pub use matrix::Matrix;
pub use mlp::{Activation, ForwardCache, Gradients, Layer, Mlp, MlpSpec};
