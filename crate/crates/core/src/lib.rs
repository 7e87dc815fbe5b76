pub mod cli;
pub mod envs;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod moe;
pub mod ppo;
pub mod tensor;

pub use error::{Error, Result};
