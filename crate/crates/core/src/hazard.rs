//! Survival sub-model: link functions, individual hazard with delayed entry,
//! cumulative hazard by panelled Gauss–Legendre quadrature, survival probability.

use serde::{Deserialize, Serialize};

use crate::basis::SplineBasis;
use crate::cohort::SubjectRecord;
use crate::error::{Error, Result};
use crate::quadrature;
use crate::trajectory::Trajectory;

/// Which functional of the trajectory enters the hazard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkKind {
    #[serde(rename = "value")]
    Value,
    #[serde(rename = "slope")]
    Slope,
    #[serde(rename = "value+slope")]
    ValueSlope,
    #[serde(rename = "cumulative")]
    Cumulative,
}

impl LinkKind {
    pub const ALL: [LinkKind; 4] = [
        LinkKind::Value,
        LinkKind::Slope,
        LinkKind::ValueSlope,
        LinkKind::Cumulative,
    ];

    pub fn n_alpha(self) -> usize {
        match self {
            LinkKind::ValueSlope => 2,
            _ => 1,
        }
    }

    pub fn alpha_names(self) -> &'static [&'static str] {
        match self {
            LinkKind::Value => &["alpha1"],
            LinkKind::Slope => &["alpha2"],
            LinkKind::ValueSlope => &["alpha1", "alpha2"],
            LinkKind::Cumulative => &["alpha3"],
        }
    }

    pub fn uses_value(self) -> bool {
        matches!(self, LinkKind::Value | LinkKind::ValueSlope)
    }

    pub fn uses_slope(self) -> bool {
        matches!(self, LinkKind::Slope | LinkKind::ValueSlope)
    }

    pub fn uses_cumulative(self) -> bool {
        matches!(self, LinkKind::Cumulative)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LinkKind::Value => "value",
            LinkKind::Slope => "slope",
            LinkKind::ValueSlope => "value+slope",
            LinkKind::Cumulative => "cumulative",
        }
    }
}

impl std::str::FromStr for LinkKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LinkKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown link kind `{s}`")))
    }
}

/// A link kind together with its association coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Link {
    CurrentValue { alpha1: f64 },
    CurrentSlope { alpha2: f64 },
    ValueAndSlope { alpha1: f64, alpha2: f64 },
    CumulativeLevel { alpha3: f64 },
}

impl Link {
    pub fn from_kind(kind: LinkKind, alpha: &[f64]) -> Result<Link> {
        if alpha.len() != kind.n_alpha() {
            return Err(Error::DimensionMismatch {
                what: "association coefficients",
                expected: kind.n_alpha(),
                actual: alpha.len(),
            });
        }
        Ok(match kind {
            LinkKind::Value => Link::CurrentValue { alpha1: alpha[0] },
            LinkKind::Slope => Link::CurrentSlope { alpha2: alpha[0] },
            LinkKind::ValueSlope => Link::ValueAndSlope {
                alpha1: alpha[0],
                alpha2: alpha[1],
            },
            LinkKind::Cumulative => Link::CumulativeLevel { alpha3: alpha[0] },
        })
    }

    pub fn kind(&self) -> LinkKind {
        match self {
            Link::CurrentValue { .. } => LinkKind::Value,
            Link::CurrentSlope { .. } => LinkKind::Slope,
            Link::ValueAndSlope { .. } => LinkKind::ValueSlope,
            Link::CumulativeLevel { .. } => LinkKind::Cumulative,
        }
    }

    pub fn alphas(&self) -> Vec<f64> {
        match *self {
            Link::CurrentValue { alpha1 } => vec![alpha1],
            Link::CurrentSlope { alpha2 } => vec![alpha2],
            Link::ValueAndSlope { alpha1, alpha2 } => vec![alpha1, alpha2],
            Link::CumulativeLevel { alpha3 } => vec![alpha3],
        }
    }
}

/// exp of a B-spline expansion in age.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineHazard {
    pub basis: SplineBasis,
    pub coeffs: Vec<f64>,
}

impl BaselineHazard {
    pub fn new(basis: SplineBasis, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != basis.dim() {
            return Err(Error::DimensionMismatch {
                what: "baseline coefficients",
                expected: basis.dim(),
                actual: coeffs.len(),
            });
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidRecord("non-finite baseline coefficient".into()));
        }
        Ok(BaselineHazard { basis, coeffs })
    }

    /// Constant hazard `rate` on `support`.
    pub fn flat(rate: f64, support: (f64, f64)) -> Result<Self> {
        let basis = SplineBasis::new(0, Vec::new(), support)?;
        BaselineHazard::new(basis, vec![rate.ln()])
    }

    pub fn log_h0(&self, t: f64) -> Result<f64> {
        self.basis.log_h0(&self.coeffs, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalParams {
    /// Coefficients on the baseline survival covariates (may be empty).
    pub gamma: Vec<f64>,
    pub link: Link,
    pub baseline: BaselineHazard,
}

impl SurvivalParams {
    fn covariate_term(&self, subject: &SubjectRecord) -> Result<f64> {
        if subject.survival_covariates.len() != self.gamma.len() {
            return Err(Error::DimensionMismatch {
                what: "survival covariates",
                expected: self.gamma.len(),
                actual: subject.survival_covariates.len(),
            });
        }
        Ok(self
            .gamma
            .iter()
            .zip(&subject.survival_covariates)
            .map(|(g, x)| g * x)
            .sum())
    }
}

/// α·f(m(t)) for the configured link.
pub fn link_value(link: &Link, traj: &Trajectory<'_>, subject: &SubjectRecord, t: f64) -> Result<f64> {
    if t < subject.t0 {
        return Err(Error::BeforeEntry { t, t0: subject.t0 });
    }
    Ok(match *link {
        Link::CurrentValue { alpha1 } => alpha1 * traj.value(subject, t),
        Link::CurrentSlope { alpha2 } => alpha2 * traj.slope(subject, t)?,
        Link::ValueAndSlope { alpha1, alpha2 } => {
            alpha1 * traj.value(subject, t) + alpha2 * traj.slope(subject, t)?
        }
        Link::CumulativeLevel { alpha3 } => alpha3 * traj.cumulative(subject, subject.t0, t)?,
    })
}

/// log h_i(t) for t after entry.
pub fn log_hazard(
    params: &SurvivalParams,
    traj: &Trajectory<'_>,
    subject: &SubjectRecord,
    t: f64,
) -> Result<f64> {
    if t <= subject.t0 {
        return Err(Error::BeforeEntry { t, t0: subject.t0 });
    }
    Ok(params.baseline.log_h0(t)? + params.covariate_term(subject)? + link_value(&params.link, traj, subject, t)?)
}

/// ∫_a^b h_i(s) ds with the default panel count.
pub fn cumulative_hazard(
    params: &SurvivalParams,
    traj: &Trajectory<'_>,
    subject: &SubjectRecord,
    a: f64,
    b: f64,
) -> Result<f64> {
    cumulative_hazard_panels(params, traj, subject, a, b, quadrature::panel_count(a, b))
}

/// ∫_a^b h_i(s) ds over `panels` equal Gauss–Legendre panels.
pub fn cumulative_hazard_panels(
    params: &SurvivalParams,
    traj: &Trajectory<'_>,
    subject: &SubjectRecord,
    a: f64,
    b: f64,
    panels: usize,
) -> Result<f64> {
    if b < a || a < subject.t0 || !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidInterval { a, b });
    }
    let basis = &params.baseline.basis;
    for t in [a, b] {
        if !basis.contains(t) {
            return Err(Error::OutsideSupport {
                age: t,
                lo: basis.boundary.0,
                hi: basis.boundary.1,
            });
        }
    }
    if a == b {
        return Ok(0.0);
    }
    let mut nodes = Vec::with_capacity(panels * quadrature::GL_POINTS);
    quadrature::panel_nodes_n(a, b, panels.max(1), &mut nodes);
    let mut acc = 0.0;
    for (s, w) in nodes {
        acc += w * log_hazard(params, traj, subject, s)?.exp();
    }
    Ok(acc)
}

/// S_i(t) = exp(-∫_{t0}^{t} h_i).
pub fn survival_prob(
    params: &SurvivalParams,
    traj: &Trajectory<'_>,
    subject: &SubjectRecord,
    t: f64,
) -> Result<f64> {
    if t < subject.t0 {
        return Err(Error::BeforeEntry { t, t0: subject.t0 });
    }
    Ok((-cumulative_hazard(params, traj, subject, subject.t0, t)?).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::tests::subject;
    use crate::trajectory::DesignKind;
    use rand::{Rng, SeedableRng};

    fn flat(rate: f64, link: Link) -> SurvivalParams {
        SurvivalParams {
            gamma: vec![],
            link,
            baseline: BaselineHazard::flat(rate, (40.0, 90.0)).unwrap(),
        }
    }

    const D: DesignKind = DesignKind::LinearAge;

    #[test]
    fn value_and_slope_link_from_table_coefficients() {
        let s = subject(45.0, 1.0);
        let beta = [9.135, -0.114, 0.017, 0.163];
        let d = DesignKind::Screening;
        let traj = Trajectory::new(&d, &beta, &[0.0, 0.0]).unwrap();
        let link = Link::ValueAndSlope { alpha1: 0.116, alpha2: 0.042 };
        let v = link_value(&link, &traj, &s, 50.0).unwrap();
        assert!((v - 0.501320).abs() < 1e-12, "{v}");
    }

    #[test]
    fn zero_alpha_gives_zero_link() {
        let s = subject(45.0, 1.0);
        let traj = Trajectory::new(&D, &[3.0, 0.1], &[0.2, 0.01]).unwrap();
        for kind in LinkKind::ALL {
            let link = Link::from_kind(kind, &vec![0.0; kind.n_alpha()]).unwrap();
            assert_eq!(link_value(&link, &traj, &s, 52.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn cumulative_link_matches_quadrature_oracle() {
        let s = subject(45.0, 1.0);
        let beta = [3.0, -0.05];
        let b = [0.4, 0.01];
        let traj = Trajectory::new(&D, &beta, &b).unwrap();
        let link = Link::CumulativeLevel { alpha3: 0.7 };
        let t = 53.3;
        // trapezoid with many panels on the linear trajectory
        let n = 20000;
        let h = (t - 45.0) / n as f64;
        let m = |x: f64| beta[0] + b[0] + (beta[1] + b[1]) * x;
        let mut trap = 0.5 * (m(45.0) + m(t));
        for k in 1..n {
            trap += m(45.0 + k as f64 * h);
        }
        trap *= h;
        let v = link_value(&link, &traj, &s, t).unwrap();
        assert!((v - 0.7 * trap).abs() < 1e-10);
    }

    #[test]
    fn log_hazard_basics() {
        let s = subject(45.0, 0.0);
        let traj = Trajectory::new(&D, &[3.0, -0.05], &[0.0, 0.0]).unwrap();
        let p = flat(1.0, Link::CurrentValue { alpha1: 0.0 });
        assert_eq!(log_hazard(&p, &traj, &s, 50.0).unwrap(), 0.0);
        assert!(matches!(log_hazard(&p, &traj, &s, 45.0), Err(Error::BeforeEntry { .. })));

        let basis = SplineBasis::new(3, vec![55.0, 65.0], (40.0, 90.0)).unwrap();
        let mut coeffs: Vec<f64> = (0..basis.dim()).map(|q| 0.1 * q as f64 - 3.0).collect();
        let mut p = SurvivalParams {
            gamma: vec![],
            link: Link::CurrentValue { alpha1: 0.2 },
            baseline: BaselineHazard::new(basis.clone(), coeffs.clone()).unwrap(),
        };
        let before = log_hazard(&p, &traj, &s, 61.0).unwrap();
        coeffs.iter_mut().for_each(|c| *c += 1.25);
        p.baseline = BaselineHazard::new(basis, coeffs).unwrap();
        let after = log_hazard(&p, &traj, &s, 61.0).unwrap();
        assert!((after - before - 1.25).abs() < 1e-13);
    }

    #[test]
    fn log_hazard_matches_sum_of_parts() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let basis = SplineBasis::new(3, vec![52.0, 60.0, 68.0], (40.0, 90.0)).unwrap();
        let d = DesignKind::Screening;
        for _ in 0..100 {
            let mut s = subject(rng.random_range(40.0..60.0), rng.random_range(0..2) as f64);
            s.survival_covariates = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let beta: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = vec![rng.random_range(-1.0..1.0), rng.random_range(-0.1..0.1)];
            let coeffs: Vec<f64> = (0..basis.dim()).map(|_| rng.random_range(-6.0..-2.0)).collect();
            let gamma = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let kind = LinkKind::ALL[rng.random_range(0..4)];
            let alpha: Vec<f64> = (0..kind.n_alpha()).map(|_| rng.random_range(-0.5..0.5)).collect();
            let p = SurvivalParams {
                gamma: gamma.clone(),
                link: Link::from_kind(kind, &alpha).unwrap(),
                baseline: BaselineHazard::new(basis.clone(), coeffs.clone()).unwrap(),
            };
            let t = s.t0 + rng.random_range(0.01..25.0);
            let traj = Trajectory::new(&d, &beta, &b).unwrap();
            // independent assembly
            let full_basis = basis.eval(t).unwrap();
            let lh0: f64 = full_basis.iter().zip(&coeffs).map(|(x, c)| x * c).sum();
            let cov = gamma[0] * s.survival_covariates[0] + gamma[1] * s.survival_covariates[1];
            let m = beta[0] + beta[1] * t + beta[2] * s.age0 + beta[3] * s.manuf + b[0] + b[1] * t;
            let dm = beta[1] + b[1];
            let int = |u: f64| {
                (beta[0] + beta[2] * s.age0 + beta[3] * s.manuf + b[0]) * u + 0.5 * (beta[1] + b[1]) * u * u
            };
            let cm = int(t) - int(s.t0);
            let link = match kind {
                LinkKind::Value => alpha[0] * m,
                LinkKind::Slope => alpha[0] * dm,
                LinkKind::ValueSlope => alpha[0] * m + alpha[1] * dm,
                LinkKind::Cumulative => alpha[0] * cm,
            };
            let want = lh0 + cov + link;
            let got = log_hazard(&p, &traj, &s, t).unwrap();
            assert!((got - want).abs() < 1e-12 * (1.0 + want.abs()), "{kind:?}: {got} vs {want}");
        }
    }

    #[test]
    fn constant_hazard_integral() {
        let s = subject(40.0, 0.0);
        let traj = Trajectory::new(&D, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let p = flat(0.1, Link::CurrentValue { alpha1: 0.0 });
        let h = cumulative_hazard(&p, &traj, &s, 40.0, 50.0).unwrap();
        assert!((h - 1.0).abs() < 1e-10);
        assert_eq!(cumulative_hazard(&p, &traj, &s, 45.0, 45.0).unwrap(), 0.0);
        assert!(cumulative_hazard(&p, &traj, &s, 46.0, 45.0).is_err());
        let sp = survival_prob(&p, &traj, &s, 50.0).unwrap();
        assert!((sp - (-1.0f64).exp()).abs() < 1e-8);
        assert_eq!(survival_prob(&p, &traj, &s, 40.0).unwrap(), 1.0);
    }

    #[test]
    fn log_linear_hazard_closed_form() {
        // log h(s) = log(0.02) + 0.3 (2 + 0.05 s): flat baseline and a value link
        let s = subject(42.0, 0.0);
        let beta = [2.0, 0.05];
        let traj = Trajectory::new(&D, &beta, &[0.0, 0.0]).unwrap();
        let p = flat(0.02, Link::CurrentValue { alpha1: 0.3 });
        let c0 = 0.02f64.ln() + 0.3 * 2.0;
        let c1 = 0.3 * 0.05;
        let (a, b) = (42.0, 57.5);
        let want = ((c0 + c1 * b).exp() - (c0 + c1 * a).exp()) / c1;
        let got = cumulative_hazard(&p, &traj, &s, a, b).unwrap();
        assert!(((got - want) / want).abs() < 1e-8);
    }

    #[test]
    fn additivity_monotonicity_and_panel_convergence() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let basis = SplineBasis::new(3, vec![55.0, 70.0], (40.0, 90.0)).unwrap();
        let s = subject(44.0, 1.0);
        let d = DesignKind::Screening;
        let beta = [9.155, -0.114, 0.017, 0.162];
        let b = [0.3, 0.02];
        let traj = Trajectory::new(&d, &beta, &b).unwrap();
        let p = SurvivalParams {
            gamma: vec![],
            link: Link::ValueAndSlope { alpha1: 0.116, alpha2: 0.042 },
            baseline: BaselineHazard::new(basis.clone(), vec![-6.0, -5.5, -5.2, -5.0, -4.9, -4.8]).unwrap(),
        };
        for _ in 0..20 {
            let a = 44.0 + rng.random_range(0.0..10.0);
            let m = a + rng.random_range(0.0..10.0);
            let c = m + rng.random_range(0.0..10.0);
            let ab = cumulative_hazard(&p, &traj, &s, a, m).unwrap();
            let bc = cumulative_hazard(&p, &traj, &s, m, c).unwrap();
            let ac = cumulative_hazard(&p, &traj, &s, a, c).unwrap();
            assert!((ab + bc - ac).abs() < 1e-9);
        }
        let mut grid: Vec<f64> = (0..30).map(|_| rng.random_range(44.0..90.0)).collect();
        grid.sort_by(f64::total_cmp);
        let surv: Vec<f64> = grid.iter().map(|&t| survival_prob(&p, &traj, &s, t).unwrap()).collect();
        assert!(surv.windows(2).all(|w| w[0] >= w[1]));
        assert!(surv.iter().all(|&x| x > 0.0 && x <= 1.0));

        // smooth configuration: flat baseline, value link
        let smooth = flat(0.01, Link::CurrentValue { alpha1: 0.2 });
        let n = quadrature::panel_count(44.0, 63.0);
        let h1 = cumulative_hazard_panels(&smooth, &traj, &s, 44.0, 63.0, n).unwrap();
        let h2 = cumulative_hazard_panels(&smooth, &traj, &s, 44.0, 63.0, 2 * n).unwrap();
        assert!(((h1 - h2) / h1).abs() < 1e-8);
    }
}
