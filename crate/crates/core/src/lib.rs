pub mod audit;
pub mod backbone;
pub mod box_ops;
pub mod cli;
pub mod data;
pub mod decoder;
pub mod eval;
mod error;
pub mod hffa;
pub mod inference;
pub mod loss;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
