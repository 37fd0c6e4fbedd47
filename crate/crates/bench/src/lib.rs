//! Shared fixtures for the kernel benchmarks.

use jointrisk_core::inference::ParameterVector;
use jointrisk_core::simulate::{simulate_cohort, SimConfig, TrueParams};
use jointrisk_core::{Cohort, ModelSpec, SplineBasis};
use nalgebra::DMatrix;

pub struct Fixture {
    pub cohort: Cohort,
    pub spec: ModelSpec,
    pub basis: SplineBasis,
    pub theta: ParameterVector,
    pub b: Vec<Vec<f64>>,
}

/// Simulated cohort with parameters set at the generating values and a flat-ish
/// baseline so the likelihood is finite everywhere.
pub fn fixture(n_subjects: usize) -> Fixture {
    let cfg = SimConfig {
        n_subjects,
        seed: 11,
        visits: (4, 8),
        ..Default::default()
    };
    let sim = simulate_cohort(&cfg).expect("default simulation");
    let spec = ModelSpec::default();
    let basis = spec.place_basis(&sim.cohort).expect("basis");
    let t: &TrueParams = &cfg.truth;
    let q = t.b_cov.len();
    let b_cov = DMatrix::from_fn(q, q, |r, c| t.b_cov[r][c]);
    let theta = ParameterVector::from_natural(
        t.beta.clone(),
        &b_cov,
        t.sigma,
        Vec::new(),
        t.alpha.clone(),
        vec![-6.0; basis.dim()],
    )
    .expect("valid truth");
    let b = sim.truth.iter().map(|s| s.b.clone()).collect();
    Fixture {
        cohort: sim.cohort,
        spec,
        basis,
        theta,
        b,
    }
}
