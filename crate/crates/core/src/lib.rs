pub mod cli;
pub mod error;
pub mod methods;
pub mod metrics;
pub mod numerics;
pub mod oracle;
pub mod plot;
pub mod predictor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
