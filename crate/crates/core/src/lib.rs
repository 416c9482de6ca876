//! Quantized one-pass averaged SGD for linear regression: simulation,
//! closed-form risk terms and upper bounds.

pub mod bounds;
pub mod engine;
pub mod error;
pub mod harness;
pub mod quantizers;
pub mod risk;
pub mod spectrum;

pub use error::{Error, Result};
pub use quantizers::{QuantizerSpec, SiteQuantizers};
pub use spectrum::{ProblemSpec, QuantizedGeometry, Regime};
