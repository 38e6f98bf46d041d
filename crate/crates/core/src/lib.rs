//! Permutation-based testing of marginal interactions between two classes.
//!
//! For every feature pair the per-class sample correlations are Fisher
//! transformed and differenced, `T = atanh(r1) - atanh(r2)`. The false
//! discovery rate of the top-ranked pairs is estimated from a null built by
//! permuting class labels of the within-class standardized data.
//!
//! Modules, roughly in pipeline order:
//!
//! - [`data`]: loading, validation, standardization and nuisance projection
//! - [`stats`]: correlation kernels, Fisher transform, pair statistics
//! - [`fdr`]: permutation null and FDR curves (plus the normal-theory variant)
//! - [`logistic`]: the pairwise logistic-regression baseline with BH
//! - [`simulate`]: block-equicorrelated simulations and consistency probes
//! - [`graph`]: interaction graphs and their export

pub mod data;
pub mod error;
pub mod fdr;
pub mod graph;
pub mod logistic;
pub mod simulate;
pub mod stats;
pub mod tsv;

pub use error::{Error, Result};
