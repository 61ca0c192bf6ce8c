pub mod autodiff;
pub mod backbone;
pub mod domain;
pub mod engine;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
