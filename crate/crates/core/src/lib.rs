//! BiLIE: bidirectional image and event fusion for low-light enhancement.

#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod backbone;
pub mod bgaf;
pub mod checkpoint;
pub mod config;
pub mod dafe;
pub mod error;
pub mod events;
pub mod fourier;
pub mod harness;
pub mod imaging;
pub mod kernels;
pub mod losses;
pub mod optim;
pub mod par;
pub mod params;
pub mod tensor;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamStore, Params};
pub use tensor::Tensor;
