pub mod data;
pub mod env;
pub mod error;
pub mod mixer;
pub mod model;
pub mod numkernel;
pub mod rng;
pub mod rollout;
pub mod ssm;
pub mod train;
pub mod verify;

pub use error::{DmmError, Result};
