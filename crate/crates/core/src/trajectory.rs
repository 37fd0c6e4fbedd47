//! Longitudinal sub-model: the subject-specific mean trajectory, its time
//! derivative and its integral from entry.

use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::cohort::SubjectRecord;
use crate::error::{Error, Result};
use crate::quadrature;

/// Fixed- and random-effects covariate rows as functions of age.
pub trait LongitudinalDesign: Debug + Send + Sync {
    fn n_fixed(&self) -> usize;
    fn n_random(&self) -> usize;
    fn fixed_row(&self, subject: &SubjectRecord, t: f64, out: &mut [f64]);
    fn random_row(&self, subject: &SubjectRecord, t: f64, out: &mut [f64]);
    /// Whether [`fixed_row_dt`](Self::fixed_row_dt) and
    /// [`random_row_dt`](Self::random_row_dt) are available.
    fn differentiable(&self) -> bool;
    fn fixed_row_dt(&self, _subject: &SubjectRecord, _t: f64, _out: &mut [f64]) -> Result<()> {
        Err(Error::NotDifferentiable)
    }
    fn random_row_dt(&self, _subject: &SubjectRecord, _t: f64, _out: &mut [f64]) -> Result<()> {
        Err(Error::NotDifferentiable)
    }
    /// When fixed column `x` equals a per-subject constant times random
    /// column `z` at every age, returns `(z, constant)`. Moving mass between
    /// the two then leaves the trajectory unchanged.
    fn absorbed_column(&self, _subject: &SubjectRecord, _x: usize) -> Option<(usize, f64)> {
        None
    }
    fn fixed_names(&self) -> Vec<String>;
}

/// Built-in designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    /// X = (1, age, age0, manuf), Z = (1, age).
    #[default]
    Screening,
    /// X = (1, age), Z = (1, age).
    LinearAge,
}

impl LongitudinalDesign for DesignKind {
    fn n_fixed(&self) -> usize {
        match self {
            DesignKind::Screening => 4,
            DesignKind::LinearAge => 2,
        }
    }

    fn n_random(&self) -> usize {
        2
    }

    fn fixed_row(&self, subject: &SubjectRecord, t: f64, out: &mut [f64]) {
        out[0] = 1.0;
        out[1] = t;
        if let DesignKind::Screening = self {
            out[2] = subject.age0;
            out[3] = subject.manuf;
        }
    }

    fn random_row(&self, _subject: &SubjectRecord, t: f64, out: &mut [f64]) {
        out[0] = 1.0;
        out[1] = t;
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn fixed_row_dt(&self, _subject: &SubjectRecord, _t: f64, out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        out[1] = 1.0;
        Ok(())
    }

    fn random_row_dt(&self, _subject: &SubjectRecord, _t: f64, out: &mut [f64]) -> Result<()> {
        out[0] = 0.0;
        out[1] = 1.0;
        Ok(())
    }

    fn absorbed_column(&self, subject: &SubjectRecord, x: usize) -> Option<(usize, f64)> {
        match (self, x) {
            (_, 0) => Some((0, 1.0)),
            (_, 1) => Some((1, 1.0)),
            (DesignKind::Screening, 2) => Some((0, subject.age0)),
            (DesignKind::Screening, 3) => Some((0, subject.manuf)),
            _ => None,
        }
    }

    fn fixed_names(&self) -> Vec<String> {
        let names: &[&str] = match self {
            DesignKind::Screening => &["intercept", "age", "age0", "manuf"],
            DesignKind::LinearAge => &["intercept", "age"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

/// Runs `f` with zeroed scratch rows of lengths `p` and `q`, on the stack when small.
fn with_scratch<R>(p: usize, q: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> R) -> R {
    if p <= 16 && q <= 16 {
        let mut x = [0.0; 16];
        let mut z = [0.0; 16];
        f(&mut x[..p], &mut z[..q])
    } else {
        let mut x = vec![0.0; p];
        let mut z = vec![0.0; q];
        f(&mut x, &mut z)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A design paired with fixed effects and one subject's random effects.
#[derive(Debug, Clone, Copy)]
pub struct Trajectory<'a> {
    pub design: &'a dyn LongitudinalDesign,
    pub beta: &'a [f64],
    pub b: &'a [f64],
}

impl<'a> Trajectory<'a> {
    pub fn new(design: &'a dyn LongitudinalDesign, beta: &'a [f64], b: &'a [f64]) -> Result<Self> {
        if beta.len() != design.n_fixed() {
            return Err(Error::DimensionMismatch {
                what: "fixed effects",
                expected: design.n_fixed(),
                actual: beta.len(),
            });
        }
        if b.len() != design.n_random() {
            return Err(Error::DimensionMismatch {
                what: "random effects",
                expected: design.n_random(),
                actual: b.len(),
            });
        }
        Ok(Trajectory { design, beta, b })
    }

    /// m(t) = β·X(t) + b·Z(t)
    pub fn value(&self, subject: &SubjectRecord, t: f64) -> f64 {
        with_scratch(self.beta.len(), self.b.len(), |x, z| {
            self.design.fixed_row(subject, t, x);
            self.design.random_row(subject, t, z);
            dot(self.beta, x) + dot(self.b, z)
        })
    }

    /// m'(t) from the design's analytic derivative.
    pub fn slope(&self, subject: &SubjectRecord, t: f64) -> Result<f64> {
        if !self.design.differentiable() {
            return Err(Error::NotDifferentiable);
        }
        with_scratch(self.beta.len(), self.b.len(), |x, z| {
            self.design.fixed_row_dt(subject, t, x)?;
            self.design.random_row_dt(subject, t, z)?;
            Ok(dot(self.beta, x) + dot(self.b, z))
        })
    }

    /// ∫_{from}^{t} m(s) ds by 15-point Gauss–Legendre.
    pub fn cumulative(&self, subject: &SubjectRecord, from: f64, t: f64) -> Result<f64> {
        if t < from {
            return Err(Error::InvalidInterval { a: from, b: t });
        }
        Ok(quadrature::integrate(from, t, |s| self.value(subject, s)))
    }
}

pub fn m_value(
    design: &dyn LongitudinalDesign,
    beta: &[f64],
    b: &[f64],
    subject: &SubjectRecord,
    t: f64,
) -> Result<f64> {
    Ok(Trajectory::new(design, beta, b)?.value(subject, t))
}

pub fn m_slope(
    design: &dyn LongitudinalDesign,
    beta: &[f64],
    b: &[f64],
    subject: &SubjectRecord,
    t: f64,
) -> Result<f64> {
    Trajectory::new(design, beta, b)?.slope(subject, t)
}

pub fn m_cumulative(
    design: &dyn LongitudinalDesign,
    beta: &[f64],
    b: &[f64],
    subject: &SubjectRecord,
    t0: f64,
    t: f64,
) -> Result<f64> {
    Trajectory::new(design, beta, b)?.cumulative(subject, t0, t)
}
