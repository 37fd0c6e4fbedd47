//! Model specification shared by fitting, prediction and simulation.

use serde::{Deserialize, Serialize};

use crate::basis::{SplineBasis, DEFAULT_DEGREE, DEFAULT_N_BASIS};
use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::hazard::LinkKind;
use crate::trajectory::{DesignKind, LongitudinalDesign};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub design: DesignKind,
    pub link: LinkKind,
    /// Baseline spline dimension Q.
    pub n_basis: usize,
    pub degree: usize,
    /// Length of each subject's baseline survival covariate vector.
    pub n_survival_covariates: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            design: DesignKind::Screening,
            link: LinkKind::ValueSlope,
            n_basis: DEFAULT_N_BASIS,
            degree: DEFAULT_DEGREE,
            n_survival_covariates: 0,
        }
    }
}

impl ModelSpec {
    pub fn with_link(link: LinkKind) -> Self {
        ModelSpec {
            link,
            ..ModelSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_basis < self.degree + 1 {
            return Err(Error::Config(format!(
                "n_basis {} must be at least degree + 1 = {}",
                self.n_basis,
                self.degree + 1
            )));
        }
        if self.degree > 8 {
            return Err(Error::Config(format!("spline degree {} too large", self.degree)));
        }
        if self.link.uses_slope() && !self.design.differentiable() {
            return Err(Error::NotDifferentiable);
        }
        Ok(())
    }

    pub fn n_fixed(&self) -> usize {
        self.design.n_fixed()
    }

    pub fn n_random(&self) -> usize {
        self.design.n_random()
    }

    /// Baseline basis for `cohort`: knots at quantiles of observed event ages,
    /// boundary from the earliest entry to the latest exit.
    pub fn place_basis(&self, cohort: &Cohort) -> Result<SplineBasis> {
        self.validate()?;
        let span = cohort.age_span().ok_or(Error::EmptyInput("cohort"))?;
        SplineBasis::from_event_quantiles(&cohort.event_ages(), self.n_basis, self.degree, span)
    }
}
