//! Flattened parameter layout and the structured parameter vector.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazard::LinkKind;
use crate::model::ModelSpec;
use crate::trajectory::LongitudinalDesign;

/// Sizes and offsets of each parameter group in the flattened vector
/// `[beta, log-Cholesky(B), log sigma, gamma, alpha, gamma_h0]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub p: usize,
    pub q: usize,
    pub n_gamma: usize,
    pub n_alpha: usize,
    pub n_h0: usize,
}

impl ParamLayout {
    pub fn new(spec: &ModelSpec, n_h0: usize) -> Self {
        ParamLayout {
            p: spec.n_fixed(),
            q: spec.n_random(),
            n_gamma: spec.n_survival_covariates,
            n_alpha: spec.link.n_alpha(),
            n_h0,
        }
    }

    pub fn n_chol(&self) -> usize {
        self.q * (self.q + 1) / 2
    }

    pub fn beta(&self) -> std::ops::Range<usize> {
        0..self.p
    }

    pub fn chol(&self) -> std::ops::Range<usize> {
        let s = self.p;
        s..s + self.n_chol()
    }

    pub fn log_sigma(&self) -> usize {
        self.p + self.n_chol()
    }

    pub fn gamma(&self) -> std::ops::Range<usize> {
        let s = self.log_sigma() + 1;
        s..s + self.n_gamma
    }

    pub fn alpha(&self) -> std::ops::Range<usize> {
        let s = self.gamma().end;
        s..s + self.n_alpha
    }

    pub fn gamma_h0(&self) -> std::ops::Range<usize> {
        let s = self.alpha().end;
        s..s + self.n_h0
    }

    pub fn len(&self) -> usize {
        self.gamma_h0().end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names of the flattened (unconstrained) coordinates.
    pub fn unconstrained_names(&self, spec: &ModelSpec) -> Vec<String> {
        let mut out: Vec<String> = spec
            .design
            .fixed_names()
            .into_iter()
            .map(|n| format!("beta[{n}]"))
            .collect();
        for (r, c) in chol_indices(self.q) {
            out.push(if r == c {
                format!("log_chol_B[{r},{c}]")
            } else {
                format!("chol_B[{r},{c}]")
            });
        }
        out.push("log_sigma".into());
        out.extend((0..self.n_gamma).map(|k| format!("gamma[{k}]")));
        out.extend(spec.link.alpha_names().iter().map(|s| s.to_string()));
        out.extend((0..self.n_h0).map(|k| format!("gamma_h0[{k}]")));
        out
    }

    /// Names of the natural-scale coefficients reported in summaries.
    pub fn natural_names(&self, spec: &ModelSpec) -> Vec<String> {
        let mut out: Vec<String> = spec
            .design
            .fixed_names()
            .into_iter()
            .map(|n| format!("beta[{n}]"))
            .collect();
        for (r, c) in chol_indices(self.q) {
            out.push(format!("B[{r},{c}]"));
        }
        out.push("sigma".into());
        out.extend((0..self.n_gamma).map(|k| format!("gamma[{k}]")));
        out.extend(spec.link.alpha_names().iter().map(|s| s.to_string()));
        out.extend((0..self.n_h0).map(|k| format!("gamma_h0[{k}]")));
        out
    }

    /// Maps a flattened draw to natural-scale coefficients, in the order of
    /// [`natural_names`](Self::natural_names).
    pub fn to_natural(&self, v: &[f64]) -> Vec<f64> {
        let l = chol_factor(self.q, &v[self.chol()]);
        let b = &l * l.transpose();
        let mut out = v[self.beta()].to_vec();
        for (r, c) in chol_indices(self.q) {
            out.push(b[(r, c)]);
        }
        out.push(v[self.log_sigma()].exp());
        out.extend_from_slice(&v[self.gamma().start..]);
        out
    }
}

/// Lower-triangle index pairs in storage order: row by row, column ascending.
pub fn chol_indices(q: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..q).flat_map(|r| (0..=r).map(move |c| (r, c)))
}

/// Lower-triangular factor with exponentiated diagonal.
pub fn chol_factor(q: usize, log_chol: &[f64]) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(q, q);
    for ((r, c), &v) in chol_indices(q).zip(log_chol) {
        l[(r, c)] = if r == c { v.exp() } else { v };
    }
    l
}

/// Inverse of [`chol_factor`] applied to the Cholesky factor of an SPD matrix.
pub fn log_chol_of(b: &DMatrix<f64>) -> Result<Vec<f64>> {
    let q = b.nrows();
    let chol = nalgebra::Cholesky::new(b.clone())
        .ok_or_else(|| Error::InvalidRecord("random-effects covariance is not positive definite".into()))?;
    let l = chol.l();
    Ok(chol_indices(q)
        .map(|(r, c)| if r == c { l[(r, c)].ln() } else { l[(r, c)] })
        .collect())
}

/// θ with B and σ held in their unconstrained forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub beta: Vec<f64>,
    pub log_chol: Vec<f64>,
    pub log_sigma: f64,
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub gamma_h0: Vec<f64>,
}

impl ParameterVector {
    pub fn from_natural(
        beta: Vec<f64>,
        b_cov: &DMatrix<f64>,
        sigma: f64,
        gamma: Vec<f64>,
        alpha: Vec<f64>,
        gamma_h0: Vec<f64>,
    ) -> Result<Self> {
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(Error::InvalidRecord(format!("residual sd must be positive, got {sigma}")));
        }
        Ok(ParameterVector {
            beta,
            log_chol: log_chol_of(b_cov)?,
            log_sigma: sigma.ln(),
            gamma,
            alpha,
            gamma_h0,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    pub fn q(&self) -> usize {
        // n(n+1)/2 = len
        let n = self.log_chol.len();
        ((((8 * n + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize
    }

    pub fn chol_factor(&self) -> DMatrix<f64> {
        chol_factor(self.q(), &self.log_chol)
    }

    pub fn b_cov(&self) -> DMatrix<f64> {
        let l = self.chol_factor();
        &l * l.transpose()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            p: self.beta.len(),
            q: self.q(),
            n_gamma: self.gamma.len(),
            n_alpha: self.alpha.len(),
            n_h0: self.gamma_h0.len(),
        }
    }

    pub fn check(&self, layout: &ParamLayout) -> Result<()> {
        let mine = self.layout();
        if mine != *layout || self.log_chol.len() != layout.n_chol() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: layout.len(),
                actual: self.flatten().len(),
            });
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.layout().len());
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.log_chol);
        v.push(self.log_sigma);
        v.extend_from_slice(&self.gamma);
        v.extend_from_slice(&self.alpha);
        v.extend_from_slice(&self.gamma_h0);
        v
    }

    pub fn reconstruct(layout: &ParamLayout, v: &[f64]) -> Result<Self> {
        if v.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                what: "flattened parameter vector",
                expected: layout.len(),
                actual: v.len(),
            });
        }
        Ok(ParameterVector {
            beta: v[layout.beta()].to_vec(),
            log_chol: v[layout.chol()].to_vec(),
            log_sigma: v[layout.log_sigma()],
            gamma: v[layout.gamma()].to_vec(),
            alpha: v[layout.alpha()].to_vec(),
            gamma_h0: v[layout.gamma_h0()].to_vec(),
        })
    }

    pub fn link_kind_matches(&self, kind: LinkKind) -> bool {
        self.alpha.len() == kind.n_alpha()
    }
}
