//! Bayesian estimation of the joint model.

pub mod diagnostics;
pub mod fit;
pub mod likelihood;
pub mod params;
pub mod priors;
pub mod sampler;

pub use diagnostics::{compute_dic, compute_rhat, CoefSummary, Dic};
pub use fit::{fit, fit_with_basis, FitResult, McmcConfig};
pub use likelihood::{log_posterior, loglik_conditional, Block, Engine, State};
pub use params::{ParamLayout, ParameterVector};
pub use priors::Priors;
pub use sampler::{mh_accept, mh_step, AdaptiveProposal};
