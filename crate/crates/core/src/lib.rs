pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
