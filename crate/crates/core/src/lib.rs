pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod latent;
pub mod losses;
pub mod network;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{HvedError, Result};
pub use tensor::{Real, Tensor};
