//! Prior densities on the unconstrained parameterization.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::params::{chol_factor, ParamLayout, ParameterVector};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Priors {
    /// Normal(0, sd) on every β, γ, α and baseline coefficient.
    pub coef_sd: f64,
    pub log_sigma_mean: f64,
    pub log_sigma_sd: f64,
    /// Inverse-Wishart degrees of freedom on B; `None` means q + 2.
    pub iw_df: Option<f64>,
    /// Exponent applied to the whole prior density (1/S for S data splits).
    pub tempering: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            coef_sd: 10.0,
            log_sigma_mean: 0.0,
            log_sigma_sd: 2.0,
            iw_df: None,
            tempering: 1.0,
        }
    }
}

pub fn log_normal(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * z * z
}

/// ln Γ_q(a).
pub fn ln_mvgamma(q: usize, a: f64) -> f64 {
    let qf = q as f64;
    qf * (qf - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (0..q).map(|j| ln_gamma(a - j as f64 / 2.0)).sum::<f64>()
}

/// Inverse-Wishart(identity, df) log density evaluated at L L'.
pub fn log_inv_wishart_identity(l: &DMatrix<f64>, df: f64) -> f64 {
    let q = l.nrows();
    let qf = q as f64;
    let logdet: f64 = 2.0 * (0..q).map(|k| l[(k, k)].ln()).sum::<f64>();
    // tr(B^-1) = ||L^-1||_F^2
    let linv = l
        .clone()
        .solve_lower_triangular(&DMatrix::identity(q, q))
        .expect("positive diagonal");
    let tr = linv.iter().map(|x| x * x).sum::<f64>();
    -0.5 * df * qf * std::f64::consts::LN_2 - ln_mvgamma(q, df / 2.0) - 0.5 * (df + qf + 1.0) * logdet - 0.5 * tr
}

/// log |∂B/∂(log-Cholesky coordinates)|.
pub fn log_chol_jacobian(q: usize, log_chol: &[f64]) -> f64 {
    let mut acc = q as f64 * std::f64::consts::LN_2;
    let mut idx = 0;
    for r in 0..q {
        idx += r;
        // diagonal entry of row r sits at idx
        acc += (q - r + 1) as f64 * log_chol[idx];
        idx += 1;
    }
    acc
}

impl Priors {
    pub fn validate(&self) -> Result<()> {
        let ok = self.coef_sd > 0.0
            && self.log_sigma_sd > 0.0
            && self.tempering > 0.0
            && self.coef_sd.is_finite()
            && self.log_sigma_mean.is_finite()
            && self.tempering.is_finite();
        if !ok {
            return Err(Error::Config(format!("invalid prior settings {self:?}")));
        }
        Ok(())
    }

    pub fn iw_df(&self, q: usize) -> f64 {
        self.iw_df.unwrap_or(q as f64 + 2.0)
    }

    pub fn coef(&self, xs: &[f64]) -> f64 {
        self.tempering * xs.iter().map(|&x| log_normal(x, 0.0, self.coef_sd)).sum::<f64>()
    }

    pub fn log_sigma(&self, log_sigma: f64) -> f64 {
        self.tempering * log_normal(log_sigma, self.log_sigma_mean, self.log_sigma_sd)
    }

    /// Tempered inverse-Wishart density on B plus the (untempered)
    /// log-Cholesky Jacobian.
    pub fn b_cov(&self, q: usize, log_chol: &[f64]) -> f64 {
        let l = chol_factor(q, log_chol);
        self.tempering * log_inv_wishart_identity(&l, self.iw_df(q)) + log_chol_jacobian(q, log_chol)
    }

    /// Full log prior density of θ in the unconstrained coordinates.
    pub fn log_density(&self, theta: &ParameterVector) -> f64 {
        let layout: ParamLayout = theta.layout();
        self.coef(&theta.beta)
            + self.b_cov(layout.q, &theta.log_chol)
            + self.log_sigma(theta.log_sigma)
            + self.coef(&theta.gamma)
            + self.coef(&theta.alpha)
            + self.coef(&theta.gamma_h0)
    }
}
