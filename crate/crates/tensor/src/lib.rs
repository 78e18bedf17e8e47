//! Minimal dense-tensor core for voxel GANs: `f64` tensors, 3D (transposed)
//! convolution, a record-then-backward autodiff [`Tape`], Adam, He
//! initialization and the `VXSN` checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod conv;
mod error;
pub mod init;
pub mod params;
pub mod tape;
mod tensor;

pub use adam::{adam_update, Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use init::he_init;
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{sigmoid, Activation, Gradients, Mode, RunningStats, Tape, Var};
pub use tensor::{Tensor, MAX_RANK};
