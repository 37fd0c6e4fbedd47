//! Convergence and fit diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{mean, quantile};

/// Split-R̂. Each chain is cut into two halves (dropping a middle draw when
/// the length is odd) and the classic between/within formula is applied.
/// Returns +∞ when the within-chain variance vanishes.
pub fn compute_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::Config("R-hat needs at least two chains".into()));
    }
    let len = chains[0].len();
    if len < 4 || chains.iter().any(|c| c.len() != len) {
        return Err(Error::Config("R-hat needs equal chain lengths of at least 4".into()));
    }
    let n = len / 2;
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..n], &c[len - n..]])
        .collect();
    let m = halves.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let grand = mean(&means);
    let b = nf / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 || !w.is_finite() {
        log::warn!("zero within-chain variance; R-hat undefined");
        return Ok(f64::INFINITY);
    }
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    Ok((var_plus / w).sqrt())
}

/// Posterior mean and central 95% interval from pooled draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefSummary {
    pub name: String,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub rhat: f64,
}

/// Summaries of one coefficient across chains.
pub fn summarize(name: &str, chains: &[Vec<f64>]) -> Result<CoefSummary> {
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    if pooled.is_empty() {
        return Err(Error::EmptyInput("posterior draws"));
    }
    Ok(CoefSummary {
        name: name.to_string(),
        mean: mean(&pooled),
        lo: quantile(&pooled, 0.025),
        hi: quantile(&pooled, 0.975),
        rhat: compute_rhat(chains)?,
    })
}

/// Conditional deviance information criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dic {
    /// Posterior mean deviance D̄.
    pub dbar: f64,
    /// Deviance at the posterior means, D(θ̄, b̄).
    pub dhat: f64,
    pub pd: f64,
    pub dic: f64,
}

impl Dic {
    pub fn from_parts(dbar: f64, dhat: f64) -> Dic {
        let pd = dbar - dhat;
        Dic {
            dbar,
            dhat,
            pd,
            dic: dbar + pd,
        }
    }
}

/// DIC from per-draw deviances and the deviance at the posterior mean.
pub fn compute_dic(deviances: &[f64], dhat: f64) -> Result<Dic> {
    if deviances.is_empty() {
        return Err(Error::EmptyInput("deviance draws"));
    }
    Ok(Dic::from_parts(mean(deviances), dhat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn identical_chains_give_sub_unit_rhat() {
        let c: Vec<f64> = (0..40).map(|k| (k % 2) as f64).collect();
        let r = compute_rhat(&[c.clone(), c]).unwrap();
        let n = 20.0;
        assert!((r - ((n - 1.0) / n as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn same_distribution_chains_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = Normal::new(0.0, 1.0).unwrap();
        let chains: Vec<Vec<f64>> = (0..2).map(|_| (0..10_000).map(|_| d.sample(&mut rng)).collect()).collect();
        let r = compute_rhat(&chains).unwrap();
        assert!((1.0..=1.01).contains(&r) || (r - 1.0).abs() < 1e-3, "{r}");
    }

    #[test]
    fn separated_chains_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = Normal::new(0.0, 1.0).unwrap();
        let chains: Vec<Vec<f64>> = [0.0, 10.0]
            .iter()
            .map(|mu| (0..1000).map(|_| mu + d.sample(&mut rng)).collect())
            .collect();
        assert!(compute_rhat(&chains).unwrap() > 1.5);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(compute_rhat(&[vec![1.0; 10]]).is_err());
        assert!(compute_rhat(&[vec![1.0; 3], vec![1.0; 3]]).is_err());
        assert_eq!(compute_rhat(&[vec![2.0; 10], vec![2.0; 10]]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn summary_percentiles_match_pooled_draws() {
        let a: Vec<f64> = (0..100).map(f64::from).collect();
        let b: Vec<f64> = (100..200).map(f64::from).collect();
        let s = summarize("x", &[a.clone(), b.clone()]).unwrap();
        let pooled: Vec<f64> = a.into_iter().chain(b).collect();
        assert_eq!(s.lo, quantile(&pooled, 0.025));
        assert_eq!(s.hi, quantile(&pooled, 0.975));
        assert_eq!(s.mean, 99.5);
    }

    #[test]
    fn degenerate_posterior_has_zero_pd() {
        let d = compute_dic(&[12.5; 20], 12.5).unwrap();
        assert_eq!(d.pd, 0.0);
        assert_eq!(d.dic, 12.5);
    }

    #[test]
    fn conjugate_normal_mean_pd_is_one() {
        // y_i ~ N(mu, 1), flat-ish prior N(0, 100^2): posterior N(ybar', 1/n')
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = Normal::new(1.3, 1.0).unwrap();
        let y: Vec<f64> = (0..50).map(|_| d.sample(&mut rng)).collect();
        let n = y.len() as f64;
        let prec = n + 1e-4;
        let post_mean = y.iter().sum::<f64>() / prec;
        let post = Normal::new(post_mean, prec.recip().sqrt()).unwrap();
        let dev = |mu: f64| y.iter().map(|v| (v - mu).powi(2) + crate::inference::likelihood::LN_2PI).sum::<f64>();
        let draws: Vec<f64> = (0..20_000).map(|_| dev(post.sample(&mut rng))).collect();
        let dic = compute_dic(&draws, dev(post_mean)).unwrap();
        assert!((dic.pd - 1.0).abs() < 0.15, "{}", dic.pd);
    }
}
