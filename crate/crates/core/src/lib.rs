pub mod error;
pub mod geometry;
pub mod imaging;
pub mod losses;
pub mod network;
pub mod nn;
pub mod pretrain;
pub mod proposal;
pub mod semantic_prior;
pub mod synth_data;
pub mod train_eval;

pub use error::{Error, Result};
