//! Detection and classification of the Hauck-Donner effect in vector
//! generalized linear models.

pub mod error;
pub mod families;
pub mod hde;
pub mod links;
pub mod numkit;
pub mod scenarios;
pub mod stats;
pub mod tables2x2;
pub mod tests_alt;
pub mod vglm;

pub use error::{Error, Result};
pub use numkit::Matrix;
