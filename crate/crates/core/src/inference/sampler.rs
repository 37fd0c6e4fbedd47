//! Random-walk Metropolis building blocks with Robbins–Monro scale adaptation
//! and windowed covariance learning.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

/// Metropolis acceptance for a log target ratio. NaN and −∞ always reject.
pub fn mh_accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    if log_ratio >= 0.0 {
        return true;
    }
    let u: f64 = rng.random();
    u.ln() < log_ratio
}

/// Gaussian random-walk proposal `x + exp(log_scale)·c·L·z` with c = 2.38/√d.
#[derive(Debug, Clone)]
pub struct AdaptiveProposal {
    dim: usize,
    chol: DMatrix<f64>,
    pub log_scale: f64,
    base: f64,
    target: f64,
    window: Vec<Vec<f64>>,
    window_start: usize,
    proposed: u64,
    accepted: u64,
}

/// Cholesky factor of a symmetric matrix after clamping its spectrum to be
/// positive, so that noisy or indefinite estimates still yield a valid shape.
pub fn robust_chol(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    if let Some(c) = nalgebra::Cholesky::new(m.clone()) {
        return c.l();
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let vals = eig.eigenvalues.map(|v| if v.is_finite() { v.max(1e-6 * top) } else { top });
    let fixed = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    nalgebra::Cholesky::new((&fixed + fixed.transpose()) * 0.5)
        .map(|c| c.l())
        .unwrap_or_else(|| DMatrix::identity(d, d) * top.sqrt())
}

impl AdaptiveProposal {
    pub fn new(cov: &DMatrix<f64>, target: f64) -> Self {
        let dim = cov.nrows();
        AdaptiveProposal {
            dim,
            chol: robust_chol(cov),
            log_scale: 0.0,
            base: 2.38 / (dim.max(1) as f64).sqrt(),
            target,
            window: Vec::new(),
            window_start: 0,
            proposed: 0,
            accepted: 0,
        }
    }

    /// Fixed scalar scale, no shape: `x + scale·z`.
    pub fn isotropic(dim: usize, scale: f64, target: f64) -> Self {
        let mut p = AdaptiveProposal::new(&DMatrix::identity(dim, dim), target);
        p.base = 1.0;
        if scale > 0.0 {
            p.log_scale = scale.ln();
        } else {
            p.log_scale = f64::NEG_INFINITY;
        }
        p
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn propose<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let s = self.base * self.log_scale.exp();
        let z: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut out = x.to_vec();
        if s == 0.0 {
            return out;
        }
        for r in 0..self.dim {
            let mut acc = 0.0;
            for c in 0..=r {
                acc += self.chol[(r, c)] * z[c];
            }
            out[r] += s * acc;
        }
        out
    }

    /// Robbins–Monro step on the log scale with gain (t + 1)^-0.6, where `t`
    /// counts iterations since the shape was last replaced.
    pub fn adapt(&mut self, accepted: bool, t: usize) {
        if !self.log_scale.is_finite() {
            return;
        }
        let t = t.saturating_sub(self.window_start);
        let eta = (t as f64 + 1.0).powf(-0.6);
        self.log_scale += eta * (f64::from(u8::from(accepted)) - self.target);
        self.log_scale = self.log_scale.clamp(-30.0, 10.0);
    }

    pub fn record(&mut self, x: &[f64]) {
        self.window.push(x.to_vec());
    }

    /// Replaces the proposal shape with the regularized empirical covariance of
    /// the samples recorded since the previous call.
    pub fn end_window(&mut self, t: usize) {
        let n = self.window.len();
        let d = self.dim;
        if n > 2 * d + 10 {
            let mut mean = vec![0.0; d];
            for x in &self.window {
                for k in 0..d {
                    mean[k] += x[k] / n as f64;
                }
            }
            let mut cov = DMatrix::<f64>::zeros(d, d);
            for x in &self.window {
                for r in 0..d {
                    for c in 0..=r {
                        cov[(r, c)] += (x[r] - mean[r]) * (x[c] - mean[c]) / (n - 1) as f64;
                    }
                }
            }
            for r in 0..d {
                for c in 0..r {
                    cov[(c, r)] = cov[(r, c)];
                }
            }
            if (0..d).all(|k| cov[(k, k)] > 0.0 && cov[(k, k)].is_finite()) {
                for k in 0..d {
                    cov[(k, k)] *= 1.0 + 1e-3;
                    cov[(k, k)] += 1e-12;
                }
                self.chol = robust_chol(&cov);
                self.log_scale = 0.0;
                self.window_start = t;
            }
        }
        self.window.clear();
    }

    pub fn count(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
    }

    pub fn reset_counts(&mut self) {
        self.proposed = 0;
        self.accepted = 0;
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// One Metropolis step on `x` for an arbitrary log target. `logp` caches the
/// target at `x`. During warmup pass the iteration index as `adapt_at`.
pub fn mh_step<R: Rng + ?Sized, F: FnMut(&[f64]) -> f64>(
    x: &mut Vec<f64>,
    logp: &mut f64,
    proposal: &mut AdaptiveProposal,
    mut target: F,
    rng: &mut R,
    adapt_at: Option<usize>,
) -> bool {
    let y = proposal.propose(x, rng);
    let lq = target(&y);
    let accepted = mh_accept(lq - *logp, rng);
    if accepted {
        *x = y;
        *logp = lq;
    }
    proposal.count(accepted);
    if let Some(t) = adapt_at {
        proposal.adapt(accepted, t);
    }
    accepted
}

/// Covariance implied by the negative finite-difference Hessian of `f` at `x`,
/// with steps `h`. Falls back to a diagonal guess when curvature is unusable.
pub fn laplace_covariance<F: FnMut(&[f64]) -> f64>(x: &[f64], h: &[f64], mut f: F) -> DMatrix<f64> {
    let d = x.len();
    let f0 = f(x);
    let mut hess = DMatrix::zeros(d, d);
    let mut at = |dx: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(k, v) in dx {
            y[k] += v;
        }
        f(&y)
    };
    for i in 0..d {
        let (fp, fm) = (at(&[(i, h[i])]), at(&[(i, -h[i])]));
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let v = (at(&[(i, h[i]), (j, h[j])]) - at(&[(i, h[i]), (j, -h[j])]) - at(&[(i, -h[i]), (j, h[j])])
                + at(&[(i, -h[i]), (j, -h[j])]))
                / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    let neg = -hess;
    if neg.iter().all(|v| v.is_finite()) {
        let chol = robust_chol(&neg);
        let ok = (0..d).all(|k| chol[(k, k)] > 0.0 && chol[(k, k)].is_finite());
        if ok {
            let linv = chol.solve_lower_triangular(&DMatrix::identity(d, d)).expect("positive diagonal");
            return linv.transpose() * linv;
        }
    }
    DMatrix::from_diagonal_element(d, d, 0.01)
}
