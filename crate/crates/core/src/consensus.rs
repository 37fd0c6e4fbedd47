//! Consensus Monte Carlo: disjoint data splits fitted independently under a
//! tempered prior, then combined draw by draw with precision weights.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::SplineBasis;
use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::inference::diagnostics::{summarize, CoefSummary, Dic};
use crate::inference::{fit_with_basis, FitResult, McmcConfig, Priors};
use crate::model::ModelSpec;
use crate::rng::{derive_seed, domain, stream};
use crate::stats::{mean, variance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitPlan {
    pub n_splits: usize,
    pub stratify_by_event: bool,
    pub weighting: Weighting,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            n_splits: 12,
            stratify_by_event: true,
            weighting: Weighting::Full,
        }
    }
}

/// How split draws are weighted when combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Per-coefficient inverse variances.
    Diagonal,
    /// Inverse sample covariance matrices. Keeps cross-coefficient
    /// correlation, which matters for weakly identified association terms.
    #[default]
    Full,
}

/// Per-split fit diagnostics kept with a combined result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDiagnostics {
    pub split: usize,
    pub seed: u64,
    pub n_subjects: usize,
    pub n_events: usize,
    pub max_rhat: f64,
    pub dic: Dic,
    pub acceptance: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusProvenance {
    pub n_splits: usize,
    pub stratify_by_event: bool,
    #[serde(default)]
    pub weighting: Weighting,
    pub master_seed: u64,
    pub splits: Vec<SplitDiagnostics>,
}

/// Draws of one split, flattened over (chain, iteration).
#[derive(Debug, Clone, PartialEq)]
pub struct SubPosterior {
    pub split: usize,
    pub draws: Vec<Vec<f64>>,
    pub variance: Vec<f64>,
}

impl SubPosterior {
    pub fn new(split: usize, draws: Vec<Vec<f64>>) -> Result<Self> {
        let d = draws.first().map_or(0, Vec::len);
        if draws.iter().any(|v| v.len() != d) {
            return Err(Error::DimensionMismatch {
                what: "sub-posterior draw",
                expected: d,
                actual: draws.iter().map(Vec::len).find(|&l| l != d).unwrap_or(d),
            });
        }
        let variance = (0..d)
            .map(|k| variance(&draws.iter().map(|v| v[k]).collect::<Vec<_>>()))
            .collect();
        Ok(SubPosterior { split, draws, variance })
    }

    pub fn from_fit(split: usize, fit: &FitResult) -> Result<Self> {
        SubPosterior::new(split, fit.draws.iter().flatten().cloned().collect())
    }
}

fn deal(order: &[usize], n_splits: usize, start: usize, out: &mut [Vec<usize>]) -> usize {
    let mut k = start;
    for &i in order {
        out[k % n_splits].push(i);
        k += 1;
    }
    k % n_splits
}

/// Subject indices for each split.
pub fn assign_splits<R: Rng + ?Sized>(cohort: &Cohort, plan: &SplitPlan, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if plan.n_splits < 2 {
        return Err(Error::UsePlainFit);
    }
    if cohort.len() < plan.n_splits {
        return Err(Error::Config(format!(
            "{} subjects cannot fill {} splits",
            cohort.len(),
            plan.n_splits
        )));
    }
    for attempt in 0..2 {
        let mut out = vec![Vec::new(); plan.n_splits];
        if plan.stratify_by_event {
            let (mut ev, mut cens): (Vec<usize>, Vec<usize>) =
                (0..cohort.len()).partition(|&i| cohort.subjects[i].event);
            ev.shuffle(rng);
            cens.shuffle(rng);
            let next = deal(&ev, plan.n_splits, 0, &mut out);
            deal(&cens, plan.n_splits, next, &mut out);
        } else {
            let mut all: Vec<usize> = (0..cohort.len()).collect();
            all.shuffle(rng);
            deal(&all, plan.n_splits, 0, &mut out);
        }
        for part in &mut out {
            part.sort_unstable();
        }
        match out.iter().position(|p| !p.iter().any(|&i| cohort.subjects[i].event)) {
            None => return Ok(out),
            Some(s) if attempt == 1 => return Err(Error::SplitWithoutEvents(s)),
            Some(s) => log::warn!("split {s} has no events; reshuffling"),
        }
    }
    unreachable!()
}

/// Random disjoint sub-cohorts covering `cohort`.
pub fn split_cohort<R: Rng + ?Sized>(cohort: &Cohort, plan: &SplitPlan, rng: &mut R) -> Result<Vec<Cohort>> {
    Ok(assign_splits(cohort, plan, rng)?
        .iter()
        .map(|idx| cohort.subset(idx))
        .collect())
}

/// Fits every split with the prior raised to 1/S, each with its own seed.
pub fn fit_splits(
    subcohorts: &[Cohort],
    spec: &ModelSpec,
    basis: &SplineBasis,
    priors: &Priors,
    config: &McmcConfig,
) -> Result<Vec<FitResult>> {
    let s = subcohorts.len();
    let tempered = Priors {
        tempering: priors.tempering / s as f64,
        ..*priors
    };
    subcohorts
        .par_iter()
        .enumerate()
        .map(|(k, sub)| {
            let cfg = McmcConfig {
                seed: derive_seed(config.seed, domain::SPLIT, k as u64),
                ..config.clone()
            };
            fit_with_basis(sub, spec, basis, &tempered, &cfg)
        })
        .collect()
}

fn check_subs(subs: &[SubPosterior]) -> Result<(usize, usize)> {
    let first = subs.first().ok_or(Error::EmptyInput("sub-posteriors"))?;
    let (g, d) = (first.draws.len(), first.variance.len());
    for s in subs {
        if s.draws.len() != g {
            return Err(Error::DimensionMismatch {
                what: "sub-posterior draw count",
                expected: g,
                actual: s.draws.len(),
            });
        }
        if s.variance.len() != d {
            return Err(Error::DimensionMismatch {
                what: "sub-posterior dimension",
                expected: d,
                actual: s.variance.len(),
            });
        }
        if let Some(k) = s.variance.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::DegenerateSubPosterior {
                split: s.split,
                coefficient: k,
            });
        }
    }
    Ok((g, d))
}

/// θ_g = Σ_s w_s θ_{s,g} / Σ_s w_s per coefficient, with w_s = 1/Var_s.
pub fn combine_draws(subs: &[SubPosterior]) -> Result<Vec<Vec<f64>>> {
    let (g, d) = check_subs(subs)?;
    let weights: Vec<Vec<f64>> = subs.iter().map(|s| s.variance.iter().map(|v| 1.0 / v).collect()).collect();
    let wsum: Vec<f64> = (0..d).map(|k| weights.iter().map(|w| w[k]).sum()).collect();
    Ok((0..g)
        .map(|i| {
            (0..d)
                .map(|k| {
                    subs.iter()
                        .zip(&weights)
                        .map(|(s, w)| w[k] * s.draws[i][k])
                        .sum::<f64>()
                        / wsum[k]
                })
                .collect()
        })
        .collect())
}

/// θ_g = (Σ_s W_s)⁻¹ Σ_s W_s θ_{s,g} with W_s the inverse sample covariance
/// of split s.
pub fn combine_draws_full(subs: &[SubPosterior]) -> Result<Vec<Vec<f64>>> {
    let (g, d) = check_subs(subs)?;
    let mut weights = Vec::with_capacity(subs.len());
    let mut total = DMatrix::<f64>::zeros(d, d);
    for s in subs {
        let n = s.draws.len() as f64;
        let m = DVector::from_fn(d, |k, _| s.draws.iter().map(|v| v[k]).sum::<f64>() / n);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for v in &s.draws {
            let x = DVector::from_column_slice(v) - &m;
            cov.ger(1.0, &x, &x, 1.0);
        }
        cov /= n - 1.0;
        let w = cov
            .cholesky()
            .ok_or(Error::DegenerateSubPosterior {
                split: s.split,
                coefficient: 0,
            })?
            .inverse();
        total += &w;
        weights.push(w);
    }
    let solver = total.cholesky().ok_or(Error::NonFiniteTarget("summed precision".into()))?;
    Ok((0..g)
        .map(|i| {
            let mut acc = DVector::<f64>::zeros(d);
            for (s, w) in subs.iter().zip(&weights) {
                acc.gemv(1.0, w, &DVector::from_column_slice(&s.draws[i]), 1.0);
            }
            solver.solve(&acc).iter().copied().collect()
        })
        .collect())
}

/// Full consensus pipeline returning a result shaped like a plain fit.
pub fn consensus_fit(
    cohort: &Cohort,
    spec: &ModelSpec,
    priors: &Priors,
    config: &McmcConfig,
    plan: &SplitPlan,
) -> Result<FitResult> {
    if cohort.n_events() == 0 {
        return Err(Error::NoEvents);
    }
    config.validate()?;
    let basis = spec.place_basis(cohort)?;
    let mut rng = stream(config.seed, domain::SPLIT_ASSIGN, 0);
    let parts = assign_splits(cohort, plan, &mut rng)?;
    let subcohorts: Vec<Cohort> = parts.iter().map(|idx| cohort.subset(idx)).collect();
    let fits = fit_splits(&subcohorts, spec, &basis, priors, config)?;
    let subs: Vec<SubPosterior> = fits
        .iter()
        .enumerate()
        .map(|(k, f)| SubPosterior::from_fit(k, f))
        .collect::<Result<_>>()?;
    let combined = match plan.weighting {
        Weighting::Diagonal => combine_draws(&subs)?,
        Weighting::Full => combine_draws_full(&subs)?,
    };

    let n_chains = config.n_chains;
    let per_chain = combined.len() / n_chains;
    let draws: Vec<Vec<Vec<f64>>> = combined.chunks(per_chain).map(|c| c.to_vec()).collect();
    let layout = fits[0].layout;
    let names = layout.natural_names(spec);
    let natural: Vec<Vec<Vec<f64>>> = draws
        .iter()
        .map(|c| c.iter().map(|v| layout.to_natural(v)).collect())
        .collect();
    let summaries: Vec<CoefSummary> = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let chains: Vec<Vec<f64>> = natural.iter().map(|c| c.iter().map(|v| v[k]).collect()).collect();
            summarize(name, &chains)
        })
        .collect::<Result<_>>()?;

    let dic = fits.iter().fold(Dic::from_parts(0.0, 0.0), |acc, f| {
        Dic::from_parts(acc.dbar + f.dic.dbar, acc.dhat + f.dic.dhat)
    });
    let mut re_means = vec![Vec::new(); cohort.len()];
    for (idx, f) in parts.iter().zip(&fits) {
        for (&i, b) in idx.iter().zip(&f.re_means) {
            re_means[i] = b.clone();
        }
    }
    let mut acceptance = BTreeMap::new();
    for key in fits[0].acceptance.keys() {
        let v: Vec<f64> = fits.iter().map(|f| f.acceptance[key]).collect();
        acceptance.insert(key.clone(), mean(&v));
    }
    let splits = fits
        .iter()
        .zip(&subcohorts)
        .enumerate()
        .map(|(k, (f, c))| SplitDiagnostics {
            split: k,
            seed: f.config.seed,
            n_subjects: c.len(),
            n_events: c.n_events(),
            max_rhat: f.max_rhat(),
            dic: f.dic,
            acceptance: f.acceptance.clone(),
        })
        .collect();
    Ok(FitResult {
        spec: *spec,
        priors: *priors,
        config: config.clone(),
        basis,
        layout,
        names: layout.unconstrained_names(spec),
        summaries,
        dic,
        acceptance,
        subject_ids: cohort.subjects.iter().map(|s| s.subject_id.clone()).collect(),
        re_means,
        draws,
        consensus: Some(ConsensusProvenance {
            n_splits: plan.n_splits,
            stratify_by_event: plan.stratify_by_event,
            weighting: plan.weighting,
            master_seed: config.seed,
            splits,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Observation, SubjectRecord};
    use crate::inference::{mh_step, AdaptiveProposal};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn toy_cohort(n: usize, n_events: usize) -> Cohort {
        let subjects = (0..n)
            .map(|i| SubjectRecord {
                subject_id: format!("s{i:03}"),
                t0: 50.0,
                age0: 50.0,
                manuf: 0.0,
                survival_covariates: vec![],
                observations: vec![
                    Observation { age: 50.0, value: 1.0 },
                    Observation { age: 51.0, value: 1.1 },
                ],
                event_age: 52.0,
                event: i < n_events,
            })
            .collect();
        Cohort::new(subjects, Default::default(), Default::default()).unwrap()
    }

    #[test]
    fn single_split_rejected() {
        let c = toy_cohort(10, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = SplitPlan { n_splits: 1, ..SplitPlan::default() };
        assert!(matches!(split_cohort(&c, &plan, &mut rng), Err(Error::UsePlainFit)));
    }

    #[test]
    fn stratified_one_event_per_split() {
        let c = toy_cohort(120, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let parts = split_cohort(&c, &SplitPlan::default(), &mut rng).unwrap();
        assert_eq!(parts.len(), 12);
        assert!(parts.iter().all(|p| p.n_events() == 1 && p.len() == 10));
    }

    #[test]
    fn too_few_events_is_error() {
        let c = toy_cohort(40, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = SplitPlan { n_splits: 4, ..SplitPlan::default() };
        assert!(matches!(split_cohort(&c, &plan, &mut rng), Err(Error::SplitWithoutEvents(_))));
    }

    #[test]
    fn union_and_disjointness() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let n = rng.random_range(20..200);
            let e = rng.random_range(8..n / 2);
            let c = toy_cohort(n, e);
            let s = rng.random_range(2..8);
            let plan = SplitPlan { n_splits: s, stratify_by_event: trial % 2 == 0, ..SplitPlan::default() };
            match assign_splits(&c, &plan, &mut rng) {
                Ok(parts) => {
                    let mut all: Vec<usize> = parts.concat();
                    all.sort_unstable();
                    assert_eq!(all, (0..n).collect::<Vec<_>>());
                    if plan.stratify_by_event {
                        let counts: Vec<usize> = parts
                            .iter()
                            .map(|p| p.iter().filter(|&&i| c.subjects[i].event).count())
                            .collect();
                        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
                    }
                }
                Err(Error::SplitWithoutEvents(_)) => assert!(!plan.stratify_by_event),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn equal_and_unequal_weights() {
        let a = SubPosterior { split: 0, draws: vec![vec![1.0]], variance: vec![1.0] };
        let b = SubPosterior { split: 1, draws: vec![vec![3.0]], variance: vec![1.0] };
        assert_eq!(combine_draws(&[a.clone(), b.clone()]).unwrap(), vec![vec![2.0]]);
        let b4 = SubPosterior { variance: vec![4.0], ..b };
        let got = combine_draws(&[a.clone(), b4.clone()]).unwrap()[0][0];
        assert!((got - (1.0 + 0.25 * 3.0) / 1.25).abs() < 1e-15);
        // relabeling invariance
        let swapped = combine_draws(&[b4, a]).unwrap()[0][0];
        assert!((got - swapped).abs() < 1e-15);
    }

    #[test]
    fn identical_subposteriors_reproduce_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random(), rng.random::<f64>() * 3.0]).collect();
        let s = SubPosterior::new(0, draws.clone()).unwrap();
        let subs: Vec<SubPosterior> = (0..3).map(|k| SubPosterior { split: k, ..s.clone() }).collect();
        let c = combine_draws(&subs).unwrap();
        assert_eq!(c.len(), draws.len());
        for (x, y) in c.iter().flatten().zip(draws.iter().flatten()) {
            assert!((x - y).abs() < 1e-14);
        }
        let f = combine_draws_full(&subs).unwrap();
        for (x, y) in f.iter().flatten().zip(draws.iter().flatten()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn full_weighting_recovers_correlated_gaussian_product() {
        // two splits, exact bivariate normal draws with opposite correlation
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let covs = [
            DMatrix::from_row_slice(2, 2, &[1.0, 0.8, 0.8, 1.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 2.0]),
        ];
        let means = [DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![-1.0, 2.0])];
        let subs: Vec<SubPosterior> = (0..2)
            .map(|k| {
                let l = covs[k].clone().cholesky().unwrap().l();
                let draws = (0..40_000)
                    .map(|_| {
                        let z = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
                        (&means[k] + &l * z).iter().copied().collect()
                    })
                    .collect();
                SubPosterior::new(k, draws).unwrap()
            })
            .collect();
        // product of the two densities, by hand
        let p0 = covs[0].clone().try_inverse().unwrap();
        let p1 = covs[1].clone().try_inverse().unwrap();
        let cov = (&p0 + &p1).try_inverse().unwrap();
        let want = &cov * (&p0 * &means[0] + &p1 * &means[1]);
        let c = combine_draws_full(&subs).unwrap();
        for k in 0..2 {
            let xs: Vec<f64> = c.iter().map(|v| v[k]).collect();
            assert!((mean(&xs) - want[k]).abs() < 0.02, "coef {k}: {} vs {}", mean(&xs), want[k]);
            assert!((variance(&xs) / cov[(k, k)] - 1.0).abs() < 0.05);
        }
        let d = combine_draws(&subs).unwrap();
        let xs: Vec<f64> = d.iter().map(|v| v[0]).collect();
        assert!((mean(&xs) - want[0]).abs() > 0.1, "diagonal weights should miss here");
    }

    #[test]
    fn degenerate_and_mismatched_inputs() {
        let a = SubPosterior::new(0, vec![vec![1.0]; 5]).unwrap();
        let b = SubPosterior::new(1, vec![vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(
            combine_draws(&[a, b.clone()]),
            Err(Error::DegenerateSubPosterior { split: 0, coefficient: 0 })
        ));
        let c = SubPosterior::new(2, vec![vec![1.0], vec![2.0], vec![0.0]]).unwrap();
        assert!(combine_draws(&[b, c]).is_err());
    }

    /// Normal mean with known sd 1 and a Normal(0, 10) prior, sampled by MH on
    /// each split under the tempered prior.
    #[test]
    fn conjugate_normal_mean_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = Normal::new(2.0, 1.0).unwrap();
        let y: Vec<f64> = (0..400).map(|_| truth.sample(&mut rng)).collect();
        let s = 4;
        let priors = Priors { tempering: 1.0 / s as f64, ..Priors::default() };
        let subs: Vec<SubPosterior> = y
            .chunks(100)
            .enumerate()
            .map(|(k, chunk)| {
                let target = |m: &[f64]| {
                    priors.coef(m) - 0.5 * chunk.iter().map(|v| (v - m[0]).powi(2)).sum::<f64>()
                };
                let mut prop = AdaptiveProposal::isotropic(1, 0.2, 0.44);
                let mut x = vec![0.0];
                let mut lp = target(&x);
                let mut r = stream(9, domain::SPLIT, k as u64);
                for t in 0..3000 {
                    mh_step(&mut x, &mut lp, &mut prop, target, &mut r, Some(t));
                }
                let draws = (0..40_000)
                    .map(|_| {
                        mh_step(&mut x, &mut lp, &mut prop, target, &mut r, None);
                        x.clone()
                    })
                    .collect();
                SubPosterior::new(k, draws).unwrap()
            })
            .collect();
        let c: Vec<f64> = combine_draws(&subs).unwrap().into_iter().map(|v| v[0]).collect();
        let prec = y.len() as f64 + 0.01;
        let post_mean = y.iter().sum::<f64>() / prec;
        let post_sd = prec.recip().sqrt();
        let (m, sd) = (mean(&c), variance(&c).sqrt());
        assert!(((m - post_mean) / post_mean).abs() < 0.03, "{m} vs {post_mean}");
        assert!(((sd - post_sd) / post_sd).abs() < 0.05, "{sd} vs {post_sd}");
    }
}
