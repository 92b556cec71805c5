pub mod downstream;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod event_data;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod pretrain;
pub mod seeding;
pub mod sequence;

pub use error::{Error, Result};
pub use model::{ModelConfig, PulseModel};
