//! Synthetic screening cohorts drawn from a known joint model.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::SplineBasis;
use crate::cohort::{BiomarkerKind, Cohort, Observation, SubjectRecord, Transform};
use crate::error::{Error, Result};
use crate::hazard::{self, BaselineHazard, Link, LinkKind, SurvivalParams};
use crate::quadrature;
use crate::rng::{domain, stream};
use crate::trajectory::{DesignKind, LongitudinalDesign, Trajectory};

/// Baseline hazard of the generating model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BaselineTruth {
    Flat { rate: f64 },
    /// log h0(t) = ln(rate_at_50) + growth·(t − 50).
    Gompertz { rate_at_50: f64, growth: f64 },
    Spline(BaselineHazard),
}

impl BaselineTruth {
    fn hazard(&self, support: (f64, f64), shift: f64) -> Result<BaselineHazard> {
        let mut b = match self {
            BaselineTruth::Flat { rate } => {
                if !(*rate > 0.0) {
                    return Err(Error::Config("baseline rate must be positive".into()));
                }
                BaselineHazard::flat(*rate, support)?
            }
            BaselineTruth::Gompertz { rate_at_50, growth } => {
                if !(*rate_at_50 > 0.0) {
                    return Err(Error::Config("baseline rate must be positive".into()));
                }
                let basis = SplineBasis::new(1, vec![], support)?;
                let at = |t: f64| rate_at_50.ln() + growth * (t - 50.0);
                BaselineHazard::new(basis, vec![at(support.0), at(support.1)])?
            }
            BaselineTruth::Spline(h) => h.clone(),
        };
        b.coeffs.iter_mut().for_each(|c| *c += shift);
        Ok(b)
    }
}

/// Generating parameters on their natural scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrueParams {
    pub beta: Vec<f64>,
    /// Random-effects covariance, row by row.
    pub b_cov: Vec<Vec<f64>>,
    pub sigma: f64,
    #[serde(default)]
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub baseline: BaselineTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_subjects: usize,
    pub design: DesignKind,
    pub link: LinkKind,
    pub truth: TrueParams,
    pub entry_age: (f64, f64),
    pub visit_interval: f64,
    pub visit_jitter: (f64, f64),
    /// Inclusive range of scheduled visits per subject.
    pub visits: (usize, usize),
    pub manufacturer_prob: f64,
    /// Upper end of the hazard support; later event times are reported as +∞.
    pub support_max: f64,
    /// When set, the baseline is shifted so that roughly this fraction of
    /// subjects has an observed event.
    pub target_event_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_subjects: 1000,
            design: DesignKind::Screening,
            link: LinkKind::ValueSlope,
            truth: TrueParams {
                beta: vec![9.155, -0.114, 0.017, 0.162],
                b_cov: vec![vec![32.5, -0.55], vec![-0.55, 0.01]],
                sigma: 0.603,
                gamma: vec![],
                alpha: vec![0.116, 0.042],
                baseline: BaselineTruth::Gompertz {
                    rate_at_50: 0.02,
                    growth: 0.03,
                },
            },
            entry_age: (40.0, 74.0),
            visit_interval: 1.0,
            visit_jitter: (-0.1, 0.25),
            visits: (2, 13),
            manufacturer_prob: 0.5,
            support_max: 100.0,
            target_event_fraction: None,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_subjects < 1 {
            return bad("n_subjects must be at least 1".into());
        }
        if !(self.entry_age.0 <= self.entry_age.1) {
            return bad("entry age range is empty".into());
        }
        if self.visits.0 < 2 || self.visits.1 < self.visits.0 {
            return bad("visit range must allow at least two visits".into());
        }
        if self.visit_interval + self.visit_jitter.0 <= 0.0 || self.visit_jitter.1 < self.visit_jitter.0 {
            return bad("visit spacing must stay positive".into());
        }
        let horizon = self.entry_age.1
            + (self.visits.1 - 1) as f64 * (self.visit_interval + self.visit_jitter.1);
        if self.support_max < horizon {
            return bad(format!(
                "support_max {} is below the latest possible visit {horizon}",
                self.support_max
            ));
        }
        let t = &self.truth;
        if t.beta.len() != self.design.n_fixed() {
            return bad(format!("beta needs {} entries", self.design.n_fixed()));
        }
        let q = self.design.n_random();
        if t.b_cov.len() != q || t.b_cov.iter().any(|r| r.len() != q) {
            return bad(format!("b_cov must be {q}x{q}"));
        }
        if t.alpha.len() != self.link.n_alpha() {
            return bad(format!("link {} needs {} alpha values", self.link.as_str(), self.link.n_alpha()));
        }
        if !(t.sigma >= 0.0) {
            return bad("sigma must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.manufacturer_prob) {
            return bad("manufacturer_prob must lie in [0, 1]".into());
        }
        if let Some(f) = self.target_event_fraction {
            if !(f > 0.0 && f < 1.0) {
                return bad("target_event_fraction must lie in (0, 1)".into());
            }
        }
        Ok(())
    }

    fn b_cov_factor(&self) -> Result<DMatrix<f64>> {
        let q = self.design.n_random();
        let m = DMatrix::from_fn(q, q, |r, c| self.truth.b_cov[r][c]);
        if m.iter().all(|v| *v == 0.0) {
            return Ok(m);
        }
        nalgebra::Cholesky::new(m)
            .map(|c| c.l())
            .ok_or_else(|| Error::Config("b_cov is not positive definite".into()))
    }
}

/// Hidden per-subject truth behind a simulated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub subject_id: String,
    pub b: Vec<f64>,
    /// +∞ when no event occurs within the hazard support.
    pub true_event_age: f64,
    pub censor_age: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedCohort {
    pub cohort: Cohort,
    pub truth: Vec<SubjectTruth>,
    /// Log-baseline shift applied to meet the target event fraction.
    pub baseline_shift: f64,
}

impl SimulatedCohort {
    pub fn event_fraction(&self) -> f64 {
        self.cohort.n_events() as f64 / self.cohort.len().max(1) as f64
    }
}

/// Solves ∫_{t0}^{T} h = −ln U by bisection to 1e-8 years. Returns +∞ when
/// the cumulative hazard up to the end of the support stays below −ln U.
pub fn simulate_event_time_from_u(
    params: &SurvivalParams,
    traj: &Trajectory<'_>,
    subject: &SubjectRecord,
    u: f64,
) -> Result<f64> {
    let target = -u.ln();
    let t0 = subject.t0;
    if target <= 0.0 {
        return Ok(t0);
    }
    let hi_support = params.baseline.basis.boundary.1;
    let full = |t: f64| hazard::cumulative_hazard(params, traj, subject, t0, t);
    // cheap panel walk for a bracket, then bisect on the same integral callers
    // evaluate, so quadrature error cannot separate the two near a knot
    let mut a = t0;
    let mut acc = 0.0;
    let mut b = loop {
        if a >= hi_support {
            return Ok(f64::INFINITY);
        }
        let b = (a + quadrature::PANEL_WIDTH).min(hi_support);
        let piece = hazard::cumulative_hazard_panels(params, traj, subject, a, b, 1)?;
        if acc + piece >= target {
            break b;
        }
        acc += piece;
        a = b;
    };
    while full(b)? < target {
        if b >= hi_support {
            return Ok(f64::INFINITY);
        }
        b = (b + quadrature::PANEL_WIDTH).min(hi_support);
    }
    let mut lo = if a > t0 && full(a)? < target { a } else { t0 };
    let mut hi = b;
    while hi - lo > 1e-8 {
        let mid = 0.5 * (lo + hi);
        if full(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Draws U ~ Uniform(0, 1) and inverts the cumulative hazard.
pub fn simulate_event_time<R: Rng + ?Sized>(
    params: &SurvivalParams,
    traj: &Trajectory<'_>,
    subject: &SubjectRecord,
    rng: &mut R,
) -> Result<f64> {
    let u: f64 = 1.0 - rng.random::<f64>();
    simulate_event_time_from_u(params, traj, subject, u)
}

const MAX_ATTEMPTS: usize = 100;

fn simulate_subject(
    cfg: &SimConfig,
    lfac: &DMatrix<f64>,
    params: &SurvivalParams,
    index: usize,
) -> Result<(SubjectRecord, SubjectTruth)> {
    let design = cfg.design;
    let q = design.n_random();
    let mut rng = stream(cfg.seed, domain::SUBJECT, index as u64);
    let subject_id = format!("S{index:05}");
    for _ in 0..MAX_ATTEMPTS {
        let t0 = if cfg.entry_age.1 > cfg.entry_age.0 {
            rng.random_range(cfg.entry_age.0..cfg.entry_age.1)
        } else {
            cfg.entry_age.0
        };
        let manuf = f64::from(u8::from(rng.random_bool(cfg.manufacturer_prob)));
        let covs: Vec<f64> = (0..cfg.truth.gamma.len()).map(|_| rng.sample(StandardNormal)).collect();
        let z: Vec<f64> = (0..q).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..q).map(|r| (0..=r).map(|c| lfac[(r, c)] * z[c]).sum()).collect();
        let n_visits = rng.random_range(cfg.visits.0..=cfg.visits.1);
        let mut ages = vec![t0];
        for _ in 1..n_visits {
            let jitter = if cfg.visit_jitter.1 > cfg.visit_jitter.0 {
                rng.random_range(cfg.visit_jitter.0..cfg.visit_jitter.1)
            } else {
                cfg.visit_jitter.0
            };
            let last = *ages.last().expect("nonempty");
            ages.push(last + cfg.visit_interval + jitter);
        }
        let censor = *ages.last().expect("nonempty");
        let noise: Vec<f64> = (0..n_visits).map(|_| rng.sample::<f64, _>(StandardNormal) * cfg.truth.sigma).collect();
        let mut subject = SubjectRecord {
            subject_id: subject_id.clone(),
            t0,
            age0: t0,
            manuf,
            survival_covariates: covs,
            observations: Vec::new(),
            event_age: censor,
            event: false,
        };
        let traj = Trajectory::new(&design, &cfg.truth.beta, &b)?;
        let t_star = simulate_event_time(params, &traj, &subject, &mut rng)?;
        if t_star < ages[1] {
            continue;
        }
        let (exit, event) = if t_star <= censor { (t_star, true) } else { (censor, false) };
        subject.observations = ages
            .iter()
            .zip(&noise)
            .filter(|(a, _)| **a <= exit)
            .map(|(&age, e)| Observation {
                age,
                value: traj.value(&subject, age) + e,
            })
            .collect();
        subject.event_age = exit;
        subject.event = event;
        let truth = SubjectTruth {
            subject_id,
            b,
            true_event_age: t_star,
            censor_age: censor,
        };
        return Ok((subject, truth));
    }
    Err(Error::Simulation(format!(
        "subject {index}: event before the second visit in {MAX_ATTEMPTS} attempts"
    )))
}

fn simulate_with_shift(cfg: &SimConfig, shift: f64) -> Result<SimulatedCohort> {
    let lfac = cfg.b_cov_factor()?;
    let params = SurvivalParams {
        gamma: cfg.truth.gamma.clone(),
        link: Link::from_kind(cfg.link, &cfg.truth.alpha)?,
        baseline: cfg.truth.baseline.hazard((cfg.entry_age.0, cfg.support_max), shift)?,
    };
    let pairs: Vec<(SubjectRecord, SubjectTruth)> = (0..cfg.n_subjects)
        .into_par_iter()
        .map(|i| simulate_subject(cfg, &lfac, &params, i))
        .collect::<Result<_>>()?;
    let (subjects, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(SimulatedCohort {
        cohort: Cohort::new(subjects, BiomarkerKind::DenseArea, Transform::None)?,
        truth,
        baseline_shift: shift,
    })
}

/// Simulates a cohort; with a target event fraction, bisects a common shift
/// of the log baseline hazard using the same random streams at every step.
pub fn simulate_cohort(cfg: &SimConfig) -> Result<SimulatedCohort> {
    cfg.validate()?;
    let Some(target) = cfg.target_event_fraction else {
        return simulate_with_shift(cfg, 0.0);
    };
    let (mut lo, mut hi) = (-12.0, 6.0);
    let mut best = simulate_with_shift(cfg, 0.0)?;
    for _ in 0..40 {
        let err = best.event_fraction() - target;
        if err.abs() <= 0.5 / cfg.n_subjects as f64 + 1e-12 {
            break;
        }
        if err < 0.0 {
            lo = best.baseline_shift;
        } else {
            hi = best.baseline_shift;
        }
        if hi - lo < 1e-6 {
            break;
        }
        best = simulate_with_shift(cfg, 0.5 * (lo + hi))?;
    }
    let achieved = best.event_fraction();
    if (achieved - target).abs() > 0.02 {
        log::warn!("target event fraction {target} not attainable; achieved {achieved:.4}");
    }
    Ok(best)
}

/// Hidden-truth CSV: `subject_id,b0,b1,true_event_age,censor_age`.
pub fn write_truth_csv(truth: &[SubjectTruth], path: impl AsRef<Path>) -> Result<()> {
    let q = truth.first().map_or(2, |t| t.b.len());
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let bnames: Vec<String> = (0..q).map(|k| format!("b{k}")).collect();
    writeln!(out, "subject_id,{},true_event_age,censor_age", bnames.join(","))?;
    for t in truth {
        let bs: Vec<String> = t.b.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{},{},{},{}", t.subject_id, bs.join(","), t.true_event_age, t.censor_age)?;
    }
    out.flush()?;
    Ok(())
}
