pub mod autodiff;
pub mod baselines;
pub mod error;
pub mod inference;
pub mod instance;
pub mod model;
pub mod report;
pub mod rng;
pub mod solution;
pub mod sparse;
pub mod tensor;
pub mod training;
pub mod vrplib;

pub use error::{Error, Result};
