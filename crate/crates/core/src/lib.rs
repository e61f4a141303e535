pub mod config;
pub mod container;
pub mod error;
pub mod idest;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod symreg;
pub mod sysgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
