//! Dense tensors, the differentiation tape, and the kernels the UNet needs.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::nchw as nchw_dims;
