pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod relpos;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
