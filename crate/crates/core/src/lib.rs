pub mod autodiff;
pub mod envs;
pub mod error;
pub mod harness;
pub mod learner;
pub mod planner;
pub mod replay;
pub mod world_model;

pub use error::{Error, Result};
