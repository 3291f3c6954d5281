//! Pooled logistic regression for privacy-preserving analysis.
//!
//! Individual covariate values are replaced by outcome-stratified pool sums
//! before analysis: cases are randomly partitioned into pools of g cases,
//! controls into pools of g controls, and a logistic regression with a
//! pool-count offset fit to the pool-level sums estimates the same odds
//! ratios as the individual-level model. Because only aggregates are needed,
//! the pooled dataset can also be assembled across a network of nodes that
//! each hold a share of the records, with chained masked summation keeping
//! per-node sums private; no individual covariate value ever leaves a node.
//!
//! Modules:
//! - [`model`]: records, linear-predictor terms, the privacy guard.
//! - [`pooling`]: pool plans, offsets, pooled-row aggregation.
//! - [`glm`]: the IRLS solver with offsets, LRT, confidence intervals.
//! - [`securesum`]: chained masked summation and the exact fixed-point mode.
//! - [`protocol`]: coordinator/node state machines and transports.
//! - [`simulate`]: data generator and replication harness.
//! - [`files`]: CSV and config formats, fit reports.
//!
//! The numeric core is generic over the scalar type via [`num::Real`];
//! the concrete types re-exported at the crate root default to `f64`.

pub mod files;
pub mod glm;
pub mod model;
pub mod num;
pub mod pooling;
pub mod protocol;
pub mod rng;
pub mod securesum;
pub mod simulate;

pub use glm::{fit, fit_named, DesignRow, FitOptions, FitResult, LrtResult};
pub use model::{MicroRecord, ModelSpec, StudyMeta, Term, Transform};
pub use pooling::{PoolPlan, PooledRow, SizePolicy};

/// Crate version, embedded in output file headers.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
