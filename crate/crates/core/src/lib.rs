pub mod bench;
pub mod crystal;
pub mod elements;
pub mod equivariant;
pub mod error;
pub mod featurize;
pub mod io;
pub mod potential;
pub mod simulate;
pub mod training;

pub use error::{Error, Result};
