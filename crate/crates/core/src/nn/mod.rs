//! Image encoder, shared source encoder, target decoder and selective
//! attention.

pub mod checkpoint;
mod config;
mod gradcheck;
mod layers;
mod state;

pub use checkpoint::{average_tables, ParamTable};
pub use config::ModelConfig;
pub use gradcheck::model_grad_check;
pub use layers::{EncodedImage, EncodedText, Forward, TokenBatch};
pub use state::ModelState;
