//! Differentiable building blocks for document encoders.

pub mod params;
pub mod tape;
pub mod transformer;

pub use params::ParamSet;
pub use tape::{Mat, Tape, Var};
pub use transformer::{TransformerConfig, TransformerEncoder};
