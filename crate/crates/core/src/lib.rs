//! Max-plus approximate value iteration for deterministic MDPs.

pub mod benchmarks;
pub mod dictionaries;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod matching_pursuit;
pub mod maxplus;
pub mod mdp;
pub mod reduced_vi;
pub mod scalar;

/// Crate version recorded in experiment metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, Result};
pub use grid::{Grid, Metric};
pub use scalar::Scalar;

pub use maxplus::{Coefficients, Dictionary, ExtendedValue, ValueVector};
pub use mdp::DeterministicMdp;

/// Double-precision instantiations.
pub type Value = ExtendedValue<f64>;
pub type Values = ValueVector<f64>;
pub type Coeffs = Coefficients<f64>;
pub type Dict = Dictionary<f64>;
pub type Mdp = DeterministicMdp<f64>;
pub type Forms = reduced_vi::CompiledForms<f64>;
pub type Problem = benchmarks::BenchmarkProblem<f64>;
