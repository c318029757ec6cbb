//! Dense tensor arithmetic with reverse-mode automatic differentiation,
//! sized for training the encoder models, plus a finite-difference oracle.

pub mod adam;
pub mod fd;
pub mod kernels;
pub mod tape;

pub use adam::{Adam, AdamConfig};
pub use fd::{fd_check, fd_check_multi};
pub use tape::{Tape, Tensor, Var};
