//! Class-wise invertible perturbations that make an image dataset
//! unlearnable, with key-based restoration.

mod bytes;

pub mod augment;
pub mod crafting;
pub mod dataset;
pub mod eval;
pub mod error;
pub mod locks;
pub mod models;
pub mod train;

pub use error::{Error, Result};
