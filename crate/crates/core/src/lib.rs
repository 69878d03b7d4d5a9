pub mod config;
pub mod dino;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod mil;
pub mod params;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
