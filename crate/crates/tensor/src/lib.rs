//! Reverse-mode automatic differentiation over `ndarray`, sized for
//! desk-scale convolutional networks on a CPU.
//!
//! Graphs are built eagerly by calling ops on [`Var`]s; [`Var::backward`]
//! walks the graph once and returns [`Grads`]. Convolutions lower to a single
//! im2col matrix product per call, with the im2col fill split across samples
//! through [`par`].

mod elem;
pub mod gradcheck;
pub mod init;
mod ops;
pub mod optim;
pub mod par;
mod param;
mod var;

pub use elem::Elem;
pub use ops::{conv_out_size, ChannelStats, Conv2dOpts};
pub use optim::{Adam, AdamConfig};
pub use param::{checksum, Buffer, Param, ParamId};
pub use var::{Grads, Var};

pub use ndarray;
