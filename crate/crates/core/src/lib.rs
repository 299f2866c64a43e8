pub mod analysis;
pub mod attacks;
pub mod data;
pub mod defense;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod timing;

pub use error::{Error, Result};
