pub mod ablation;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod optim;
pub mod outlier;
pub mod qmodel;
pub mod quant;
pub mod recon;
pub mod rounding;
pub mod tensor;
pub mod toy;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
