pub mod adversarial;
pub mod attack;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod network;
pub mod rng;
pub mod secure;
pub mod tensor;

pub use error::{Error, Result};
