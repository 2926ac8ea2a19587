//! Design and evaluation of group sequential crossover trials comparing
//! several experimental treatments to a shared control, with strong
//! control of the familywise error rate.
//!
//! The crate is layered bottom-up:
//!
//! - [`sequences`]: period-balanced complete-block sequence sets and
//!   per-patient design matrices.
//! - [`covariance`]: closed-form covariance algebra of the linear mixed
//!   model and the canonical joint distribution of the test statistics.
//! - [`mvn`]: multivariate normal rectangle probabilities.
//! - [`evaluator`]: stopping-path enumeration and operating characteristics.
//! - [`designer`]: power-family boundaries and group size search.
//! - [`simulator`]: patient-level Monte Carlo with ML/REML fitting.

pub mod covariance;
pub mod designer;
pub mod error;
pub mod evaluator;
pub mod mvn;
pub mod sequences;
pub mod simulator;

pub use covariance::{JointDistribution, StageAllocation, VarianceComponents};
pub use designer::{BoundarySolution, PowerFamilySpec, RoundingRule, SolverOptions};
pub use error::{Error, Result};
pub use evaluator::{OperatingCharacteristics, StoppingPath, TrialDesign};
pub use mvn::{IntegrationResult, MvnOptions, RectangleProblem};
pub use sequences::{SequenceFamily, SequenceSet};
pub use simulator::{AnalysisProcedure, Estimation, SimulationReport, TrueParameters};
