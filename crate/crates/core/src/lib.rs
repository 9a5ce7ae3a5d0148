//! Search over block stacking style codes (BSSC).
//!
//! The pipeline builds a constrained candidate set of maximal codes, learns a
//! linear refinement of the standardized codes, clusters the refined codes and
//! picks batches of cluster representatives with a Gaussian-process surrogate
//! and Monte-Carlo expected improvement. An analytic FLOPs/parameter model
//! supplies the cost constraint.
//!
//! Data-parallel loops (candidate sampling, k-means assignment, refinement,
//! acquisition scoring) run on rayon when the `parallel` feature is enabled
//! and [`Exec::Parallel`] is selected. Both execution modes produce
//! bit-identical results.

pub mod candidates;
pub mod cluster;
pub mod cost;
pub mod error;
pub mod evaluator;
pub mod exec;
pub mod gp;
pub mod journal;
pub mod linalg;
pub mod plan;
pub mod refiner;
pub mod rng;
pub mod search;
pub mod space;

pub use candidates::{CandidateSet, Lattice};
pub use cost::{Constraint, CostReport, Metric};
pub use error::{Error, Result};
pub use evaluator::{Evaluator, ExternalEvaluator, OracleShape, SyntheticOracle};
pub use exec::Exec;
pub use gp::GpModel;
pub use plan::NetworkPlan;
pub use refiner::{LinearRefiner, RefinerConfig};
pub use search::{SearchConfig, SearchResult};
pub use space::{Bssc, Family, Preset, SearchSpace, StandardizationStats};
