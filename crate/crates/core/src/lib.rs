pub mod autodiff;
pub mod banded;
pub mod constitutive;
pub mod error;
pub mod fields;
pub mod inference;
pub mod forward;
pub mod mesh;
pub mod nn;
pub mod postproc;
pub mod residuals;
pub mod run;
pub mod sparse;

pub use error::{Error, Result};
