pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod latent;
pub mod losses;
pub mod networks;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
