pub mod alignment;
pub mod bench;
pub mod error;
pub mod infotheory;
pub mod matching;
pub mod model;
pub mod numerics;
pub mod permutation;
pub mod synthdata;

pub use error::{AtaError, Result};
pub use permutation::Permutation;
