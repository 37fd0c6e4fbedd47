//! Bayesian joint models for a longitudinal biomarker and a delayed-entry
//! time-to-event outcome: fitting, consensus fitting, dynamic prediction,
//! predictive accuracy and simulation.

pub mod accuracy;
pub mod basis;
pub mod cohort;
pub mod consensus;
pub mod dynpred;
pub mod error;
pub mod hazard;
pub mod inference;
pub mod model;
pub mod quadrature;
pub mod rng;
pub mod simulate;
pub mod stats;
pub mod trajectory;

pub use basis::SplineBasis;
pub use cohort::{Cohort, Observation, SubjectRecord};
pub use error::{Error, Result};
pub use hazard::{Link, LinkKind};
pub use inference::{fit, FitResult, McmcConfig, ParameterVector, Priors};
pub use model::ModelSpec;
pub use trajectory::DesignKind;
