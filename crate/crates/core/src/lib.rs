pub mod active_loop;
pub mod detector;
pub mod error;
pub mod eval;
pub mod formats;
pub mod model;
pub mod scoring;
pub mod simulate;
pub mod strategy;

pub use error::{Error, Result};
