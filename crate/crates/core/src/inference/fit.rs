//! Multi-chain Metropolis-within-Gibbs driver.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::diagnostics::{compute_dic, summarize, CoefSummary, Dic};
use super::likelihood::{small_solve_upper_t, Block, Engine, Scratch, MAX_Q};
use super::params::{log_chol_of, ParamLayout, ParameterVector};
use super::priors::Priors;
use super::sampler::{laplace_covariance, mh_accept, AdaptiveProposal};
use crate::basis::SplineBasis;
use crate::cohort::Cohort;
use crate::consensus::ConsensusProvenance;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::rng::{domain, stream};
use crate::stats::mean;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcConfig {
    pub n_chains: usize,
    pub n_iter: usize,
    pub n_warmup: usize,
    pub seed: u64,
    pub target_acceptance: f64,
    /// Fractions of warmup at which proposal shapes are re-estimated.
    pub adapt_fractions: Vec<f64>,
    /// Repeated updates per iteration for the cheap and the slow blocks.
    pub sigma_updates: usize,
    pub survival_updates: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_chains: 3,
            n_iter: 8500,
            n_warmup: 3500,
            seed: 0,
            target_acceptance: 0.234,
            adapt_fractions: vec![0.15, 0.3, 0.6, 0.9],
            sigma_updates: 3,
            survival_updates: 3,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains < 2 {
            return Err(Error::Config("at least two chains are required for R-hat".into()));
        }
        if self.n_warmup >= self.n_iter {
            return Err(Error::Config(format!(
                "n_warmup ({}) must be below n_iter ({})",
                self.n_warmup, self.n_iter
            )));
        }
        if self.n_iter - self.n_warmup < 4 {
            return Err(Error::Config("need at least 4 retained iterations".into()));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::Config("target acceptance must lie in (0, 1)".into()));
        }
        if self.adapt_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("adaptation fractions must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn n_retained(&self) -> usize {
        self.n_iter - self.n_warmup
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub priors: Priors,
    pub config: McmcConfig,
    pub basis: SplineBasis,
    pub layout: ParamLayout,
    /// Names of the flattened coordinates stored in `draws`.
    pub names: Vec<String>,
    /// Natural-scale coefficient summaries.
    pub summaries: Vec<CoefSummary>,
    pub dic: Dic,
    pub acceptance: BTreeMap<String, f64>,
    pub subject_ids: Vec<String>,
    /// Posterior mean random effects per subject.
    pub re_means: Vec<Vec<f64>>,
    /// `draws[chain][iteration]` is a flattened parameter vector.
    pub draws: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consensus: Option<ConsensusProvenance>,
}

impl FitResult {
    pub fn max_rhat(&self) -> f64 {
        self.summaries.iter().map(|s| s.rhat).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn converged(&self, threshold: f64) -> bool {
        self.summaries.iter().all(|s| s.rhat < threshold)
    }

    pub fn summary(&self, name: &str) -> Option<&CoefSummary> {
        self.summaries.iter().find(|s| s.name == name)
    }

    pub fn n_draws(&self) -> usize {
        self.draws.iter().map(Vec::len).sum()
    }

    /// All retained draws, chain by chain.
    pub fn posterior(&self) -> Result<Vec<ParameterVector>> {
        self.draws
            .iter()
            .flatten()
            .map(|v| ParameterVector::reconstruct(&self.layout, v))
            .collect()
    }

    /// Per-chain sequences of coefficient `k` of the flattened vector.
    pub fn chains_of(&self, k: usize) -> Vec<Vec<f64>> {
        self.draws.iter().map(|c| c.iter().map(|v| v[k]).collect()).collect()
    }

    /// Draws as CSV: a chain column followed by one column per flattened coordinate.
    pub fn write_draws_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
            line: 0,
            message: e.to_string(),
        })?;
        let csv_err = |e: csv::Error| Error::Csv {
            line: 0,
            message: e.to_string(),
        };
        let mut header = vec!["chain".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (c, chain) in self.draws.iter().enumerate() {
            for v in chain {
                let mut row = vec![c.to_string()];
                row.extend(v.iter().map(|x| x.to_string()));
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Fits the joint model, placing the baseline basis on this cohort.
pub fn fit(cohort: &Cohort, spec: &ModelSpec, priors: &Priors, config: &McmcConfig) -> Result<FitResult> {
    if cohort.n_events() == 0 {
        return Err(Error::NoEvents);
    }
    let basis = spec.place_basis(cohort)?;
    fit_with_basis(cohort, spec, &basis, priors, config)
}

/// Fits the joint model with a given baseline basis.
pub fn fit_with_basis(
    cohort: &Cohort,
    spec: &ModelSpec,
    basis: &SplineBasis,
    priors: &Priors,
    config: &McmcConfig,
) -> Result<FitResult> {
    config.validate()?;
    priors.validate()?;
    if cohort.is_empty() {
        return Err(Error::EmptyInput("cohort"));
    }
    let engine = Engine::new(cohort, spec, basis)?;
    let (theta0, b0) = engine.initial_values()?;
    let st0 = engine.state(theta0, b0)?;
    if !engine.log_posterior(&st0, priors).is_finite() {
        return Err(Error::NonFiniteTarget("log posterior at the initial values".into()));
    }
    let shapes: Vec<DMatrix<f64>> = Block::ALL
        .iter()
        .map(|&blk| block_shape(&engine, &st0, blk, priors))
        .collect();
    log::info!(
        "fitting {} subjects, {} chains x {} iterations",
        cohort.len(),
        config.n_chains,
        config.n_iter
    );
    let outputs: Vec<ChainOutput> = (0..config.n_chains)
        .into_par_iter()
        .map(|c| run_chain(&engine, priors, config, &st0, &shapes, c))
        .collect::<Result<_>>()?;
    assemble(cohort, &engine, priors, config, outputs)
}

fn block_shape(engine: &Engine, st: &super::likelihood::State, block: Block, priors: &Priors) -> DMatrix<f64> {
    let x = engine.block_values(st, block);
    let h = vec![1e-3; x.len()];
    let mut sc = Scratch::default();
    laplace_covariance(&x, &h, |v| engine.block_eval(st, block, v, priors, &mut sc))
}

struct ChainOutput {
    draws: Vec<Vec<f64>>,
    deviances: Vec<f64>,
    b_sum: Vec<f64>,
    acceptance: Vec<(String, f64)>,
}

/// |Lᵀ(b − m)|² for a row-major lower factor L.
fn upper_norm2(l: &[f64], q: usize, b: &[f64], m: &[f64]) -> f64 {
    let mut acc = 0.0;
    for c in 0..q {
        let mut v = 0.0;
        for r in c..q {
            v += l[r * q + c] * (b[r] - m[r]);
        }
        acc += v * v;
    }
    acc
}

fn run_chain(
    engine: &Engine,
    priors: &Priors,
    config: &McmcConfig,
    st0: &super::likelihood::State,
    shapes: &[DMatrix<f64>],
    chain: usize,
) -> Result<ChainOutput> {
    let mut rng = stream(config.seed, domain::CHAIN, chain as u64);
    let mut st = st0.clone();
    let mut sc = Scratch::default();
    let target = config.target_acceptance;
    let mut props: Vec<AdaptiveProposal> = shapes.iter().map(|s| AdaptiveProposal::new(s, target)).collect();

    // overdispersed starts for all but the first chain
    if chain > 0 {
        let mut jrng = stream(config.seed, domain::INIT, chain as u64);
        for (k, &blk) in Block::ALL.iter().enumerate() {
            let cur = engine.block_values(&st, blk);
            let l = super::sampler::robust_chol(&shapes[k]);
            let z: Vec<f64> = (0..cur.len()).map(|_| jrng.sample(StandardNormal)).collect();
            let vals: Vec<f64> = (0..cur.len())
                .map(|r| cur[r] + (0..=r).map(|c| l[(r, c)] * z[c]).sum::<f64>())
                .collect();
            if engine.block_eval(&st, blk, &vals, priors, &mut sc).is_finite() {
                engine.block_commit(&mut st, blk, &vals, &mut sc);
            }
        }
        engine.refresh(&mut st);
    }

    let q = engine.q();
    let nsub = engine.n_subjects();
    let (mut re_prop, mut re_acc) = (0u64, 0u64);
    let boundaries: Vec<usize> = config
        .adapt_fractions
        .iter()
        .map(|f| ((f * config.n_warmup as f64).round() as usize).max(1))
        .collect();
    let mut out = ChainOutput {
        draws: Vec::with_capacity(config.n_retained()),
        deviances: Vec::with_capacity(config.n_retained()),
        b_sum: vec![0.0; st.b.len()],
        acceptance: Vec::new(),
    };
    let mut lchol = [0.0; MAX_Q * MAX_Q];
    let mut bnew = [0.0; MAX_Q];

    for it in 0..config.n_iter {
        let warm = it < config.n_warmup;
        if it == config.n_warmup {
            props.iter_mut().for_each(AdaptiveProposal::reset_counts);
            re_prop = 0;
            re_acc = 0;

        }
        if it % 100 == 0 {
            engine.refresh(&mut st);
        }

        // random effects, one subject at a time, by independence proposals from
        // the Gaussian longitudinal conditional; only the survival part is left
        // for the acceptance ratio to correct
        let mut mean = [0.0; MAX_Q];
        for i in 0..nsub {
            if !engine.re_precision_chol(&st, i, &mut lchol) {
                continue;
            }
            let lq = &lchol[..q * q];
            engine.re_conditional_mean(&st, i, lq, &mut mean);
            let mut z = [0.0; MAX_Q];
            for v in z.iter_mut().take(q) {
                *v = rng.sample(StandardNormal);
            }
            let zz: f64 = z[..q].iter().map(|v| v * v).sum();
            small_solve_upper_t(lq, q, &mut z[..q]);
            for k in 0..q {
                bnew[k] = mean[k] + z[k];
            }
            let cur = upper_norm2(lq, q, &st.b[i * q..(i + 1) * q], &mean[..q]);
            let (delta, rss, ll) = engine.re_eval(&st, i, &bnew[..q], &mut sc);
            if mh_accept(delta + 0.5 * zz - 0.5 * cur, &mut rng) {
                engine.re_commit(&mut st, i, &bnew[..q], rss, ll, &sc);
                re_acc += 1;
            }
        }
        re_prop += nsub as u64;

        engine.shift_gibbs(&mut st, priors, &mut rng);

        for (k, &blk) in Block::ALL.iter().enumerate() {
            let reps = match blk {
                Block::Beta => 1,
                Block::LogSigma => config.sigma_updates,
                Block::BCov => 1,
                Block::Survival => config.survival_updates,
            };
            if blk == Block::BCov {
                let ok = engine.bcov_gibbs(&mut st, priors, &mut rng);
                props[k].count(ok);
                continue;
            }
            for _ in 0..reps {
                let cur_vals = engine.block_values(&st, blk);
                let cur = engine.block_current(&st, blk, priors);
                let prop = props[k].propose(&cur_vals, &mut rng);
                let new = engine.block_eval(&st, blk, &prop, priors, &mut sc);
                let acc = mh_accept(new - cur, &mut rng);
                if acc {
                    engine.block_commit(&mut st, blk, &prop, &mut sc);
                }
                props[k].count(acc);
                if warm {
                    props[k].adapt(acc, it);
                }
            }
        }

        if warm {
            for (k, &blk) in Block::ALL.iter().enumerate() {
                props[k].record(&engine.block_values(&st, blk));
            }
            if boundaries.contains(&(it + 1)) {
                for p in props.iter_mut() {
                    p.end_window(it + 1);
                }
            }
        } else {
            out.draws.push(st.theta.flatten());
            out.deviances.push(-2.0 * engine.loglik(&st));
            for (s, b) in out.b_sum.iter_mut().zip(&st.b) {
                *s += b;
            }
        }
    }
    for (k, blk) in Block::ALL.iter().enumerate() {
        out.acceptance.push((blk.name().to_string(), props[k].acceptance_rate()));
    }
    out.acceptance.push((
        "random_effects".into(),
        if re_prop == 0 { f64::NAN } else { re_acc as f64 / re_prop as f64 },
    ));
    log::debug!("chain {chain} done: {:?}", out.acceptance);
    Ok(out)
}

fn assemble(
    cohort: &Cohort,
    engine: &Engine,
    priors: &Priors,
    config: &McmcConfig,
    outputs: Vec<ChainOutput>,
) -> Result<FitResult> {
    let layout = engine.layout;
    let spec = engine.spec;
    let natural_names = layout.natural_names(&spec);
    let natural: Vec<Vec<Vec<f64>>> = outputs
        .iter()
        .map(|o| o.draws.iter().map(|d| layout.to_natural(d)).collect())
        .collect();
    let summaries: Vec<CoefSummary> = natural_names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let chains: Vec<Vec<f64>> = natural.iter().map(|c| c.iter().map(|v| v[k]).collect()).collect();
            summarize(name, &chains)
        })
        .collect::<Result<_>>()?;

    let total = outputs.iter().map(|o| o.draws.len()).sum::<usize>() as f64;
    let mut b_mean = vec![0.0; outputs[0].b_sum.len()];
    for o in &outputs {
        for (m, s) in b_mean.iter_mut().zip(&o.b_sum) {
            *m += s / total;
        }
    }
    let theta_bar = natural_mean_theta(&layout, &summaries)?;
    let st_bar = engine.state(theta_bar, b_mean.clone())?;
    let dhat = -2.0 * engine.loglik(&st_bar);
    let deviances: Vec<f64> = outputs.iter().flat_map(|o| o.deviances.iter().copied()).collect();
    let dic = compute_dic(&deviances, dhat)?;

    let mut acceptance = BTreeMap::new();
    for (k, (name, _)) in outputs[0].acceptance.iter().enumerate() {
        let rates: Vec<f64> = outputs.iter().map(|o| o.acceptance[k].1).collect();
        acceptance.insert(name.clone(), mean(&rates));
    }
    Ok(FitResult {
        spec,
        priors: *priors,
        config: config.clone(),
        basis: engine.basis.clone(),
        layout,
        names: layout.unconstrained_names(&spec),
        summaries,
        dic,
        acceptance,
        subject_ids: cohort.subjects.iter().map(|s| s.subject_id.clone()).collect(),
        re_means: engine.split_b(&b_mean),
        draws: outputs.into_iter().map(|o| o.draws).collect(),
        consensus: None,
    })
}

/// Parameter vector at the natural-scale posterior means in `summaries`.
pub(crate) fn natural_mean_theta(layout: &ParamLayout, summaries: &[CoefSummary]) -> Result<ParameterVector> {
    let m: Vec<f64> = summaries.iter().map(|s| s.mean).collect();
    let q = layout.q;
    let mut b = DMatrix::zeros(q, q);
    for (k, (r, c)) in super::params::chol_indices(q).enumerate() {
        b[(r, c)] = m[layout.p + k];
        b[(c, r)] = m[layout.p + k];
    }
    let nat_sigma = layout.p + layout.n_chol();
    let tail = &m[nat_sigma + 1..];
    Ok(ParameterVector {
        beta: m[..layout.p].to_vec(),
        log_chol: log_chol_of(&b)?,
        log_sigma: m[nat_sigma].ln(),
        gamma: tail[..layout.n_gamma].to_vec(),
        alpha: tail[layout.n_gamma..layout.n_gamma + layout.n_alpha].to_vec(),
        gamma_h0: tail[layout.n_gamma + layout.n_alpha..].to_vec(),
    })
}
