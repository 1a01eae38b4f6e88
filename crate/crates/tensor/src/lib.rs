//! Dense row-major tensors with reverse-mode automatic differentiation.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod ops;
pub mod profile;
pub mod scalar;
pub mod tensor;

pub use autodiff::{BackwardArgs, BackwardFn, Tape, Var};
pub use error::{Result, TensorError};
pub use profile::count_macs;
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Forward-pass behaviour of batch norm and dropout. Independent of gradient recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}
