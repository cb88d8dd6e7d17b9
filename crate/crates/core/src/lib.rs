//! Informative relation-label mining for scene-graph predicate classifiers.
//!
//! Predicates are split into an explicit set (spatial and positional words)
//! and an implicit set. A classifier is first trained on pairs annotated with
//! implicit predicates, then used to impute implicit labels for pairs that
//! were annotated with explicit ones. The imputed and original labels are
//! averaged and the model keeps training on them under manifold mixup.

pub mod augment;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod mining;
pub mod model;
pub mod taxonomy;
pub mod trainer;

pub use error::{Error, Result};
