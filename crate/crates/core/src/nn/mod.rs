//! Minimal deterministic tensor library: reverse-mode autodiff, the layer
//! operations the detectors are built from, losses, optimizers and checkpoints.

mod checkpoint;
mod kernels;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::{
    from_bytes, load_checkpoint, restore_into, save_checkpoint, to_bytes, Manifest, TensorEntry,
    FORMAT_VERSION,
};
pub use optim::{Algorithm, OptimizerState};
pub use params::{kaiming_uniform, ParamStore};
pub use scalar::Scalar;
pub use tape::{bce_value, logistic, Padding, Tape, Var, L2_GRAD_FLOOR};
pub use tensor::{Shape, Tensor};
