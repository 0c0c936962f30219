pub mod cli;
pub mod datasets;
pub mod envs;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod planning;
pub mod representation;
pub mod uncertainty;

pub use error::{Error, Result};
