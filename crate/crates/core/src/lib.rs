//! Role-aware conditional inference for daily ecosystem flux prediction.

pub mod data;
pub mod encoders;
pub mod evaluation;
pub mod io;
pub mod error;
pub mod params;
pub mod predictor;
pub mod retrieval;
pub mod rng;
pub mod synthetic;
pub mod tape;
pub mod training;
pub mod temporal;

pub use error::{RaciError, Result};
