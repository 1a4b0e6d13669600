//! Bayesian structured time-series models fitted with a built-in
//! No-U-Turn sampler.

pub mod artifacts;
pub mod auto_order;
pub mod autodiff;
pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod model;
pub mod nuts;
pub mod priors;
pub mod selection;
pub mod series;

pub use error::{Error, Result};
