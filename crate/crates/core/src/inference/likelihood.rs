//! Conditional joint log-likelihood and log posterior.
//!
//! [`loglik_conditional`] and [`log_posterior`] evaluate directly through the
//! trajectory and hazard operations. [`Engine`] evaluates the same quantities
//! on precomputed design rows and quadrature nodes, with per-subject caches so
//! that samplers can update one block at a time.

use nalgebra::DMatrix;

use super::params::{ParamLayout, ParameterVector};
use super::priors::Priors;
use crate::basis::SplineBasis;
use crate::cohort::{Cohort, SubjectRecord};
use crate::error::{Error, Result};
use crate::hazard::{self, BaselineHazard, Link, LinkKind, SurvivalParams};
use crate::model::ModelSpec;
use crate::quadrature;
use crate::trajectory::{LongitudinalDesign, Trajectory};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Largest random-effects dimension handled by the cached engine.
pub const MAX_Q: usize = 4;

fn check_b(cohort: &Cohort, q: usize, b_all: &[Vec<f64>]) -> Result<()> {
    if b_all.len() != cohort.len() {
        return Err(Error::DimensionMismatch {
            what: "random effects per subject",
            expected: cohort.len(),
            actual: b_all.len(),
        });
    }
    if let Some(bad) = b_all.iter().find(|b| b.len() != q) {
        return Err(Error::DimensionMismatch {
            what: "random-effects vector",
            expected: q,
            actual: bad.len(),
        });
    }
    Ok(())
}

pub(crate) fn survival_params(spec: &ModelSpec, basis: &SplineBasis, theta: &ParameterVector) -> Result<SurvivalParams> {
    Ok(SurvivalParams {
        gamma: theta.gamma.clone(),
        link: Link::from_kind(spec.link, &theta.alpha)?,
        baseline: BaselineHazard::new(basis.clone(), theta.gamma_h0.clone())?,
    })
}

/// One subject's conditional log-likelihood: longitudinal normal densities,
/// minus the cumulative hazard from entry to exit, plus the log hazard at an event.
pub fn subject_loglik(
    spec: &ModelSpec,
    surv: &SurvivalParams,
    theta: &ParameterVector,
    subject: &SubjectRecord,
    b: &[f64],
) -> Result<f64> {
    let traj = Trajectory::new(&spec.design, &theta.beta, b)?;
    let sigma = theta.sigma();
    let mut ll = 0.0;
    for o in &subject.observations {
        let r = (o.value - traj.value(subject, o.age)) / sigma;
        ll += -0.5 * LN_2PI - sigma.ln() - 0.5 * r * r;
    }
    ll -= hazard::cumulative_hazard(surv, &traj, subject, subject.t0, subject.event_age)?;
    if subject.event {
        ll += hazard::log_hazard(surv, &traj, subject, subject.event_age)?;
    }
    Ok(ll)
}

/// Σ_i log p(Y_i, T_i, δ_i | b_i, θ). Non-finite values map to −∞.
pub fn loglik_conditional(
    cohort: &Cohort,
    spec: &ModelSpec,
    basis: &SplineBasis,
    theta: &ParameterVector,
    b_all: &[Vec<f64>],
) -> Result<f64> {
    check_b(cohort, spec.n_random(), b_all)?;
    let surv = survival_params(spec, basis, theta)?;
    let mut total = 0.0;
    for (s, b) in cohort.subjects.iter().zip(b_all) {
        total += subject_loglik(spec, &surv, theta, s, b)?;
    }
    Ok(if total.is_finite() { total } else { f64::NEG_INFINITY })
}

/// log N(b; 0, B) with B = L L'.
pub fn log_re_density(l: &DMatrix<f64>, b: &[f64]) -> f64 {
    let q = l.nrows();
    let v = DMatrix::from_column_slice(q, 1, b);
    let u = l.clone().solve_lower_triangular(&v).expect("positive diagonal");
    let logdet: f64 = 2.0 * (0..q).map(|k| l[(k, k)].ln()).sum::<f64>();
    -0.5 * (q as f64 * LN_2PI + logdet + u.iter().map(|x| x * x).sum::<f64>())
}

/// Conditional log-likelihood plus random-effects densities plus the log prior
/// (Jacobian terms included, in the unconstrained coordinates).
pub fn log_posterior(
    cohort: &Cohort,
    spec: &ModelSpec,
    basis: &SplineBasis,
    theta: &ParameterVector,
    b_all: &[Vec<f64>],
    priors: &Priors,
) -> Result<f64> {
    let ll = loglik_conditional(cohort, spec, basis, theta, b_all)?;
    let l = theta.chol_factor();
    let re: f64 = b_all.iter().map(|b| log_re_density(&l, b)).sum();
    let total = ll + re + priors.log_density(theta);
    Ok(if total.is_finite() { total } else { f64::NEG_INFINITY })
}

#[derive(Debug, Clone, Copy)]
struct Span {
    obs: (usize, usize),
    /// Quadrature nodes; the event node, when present, sits at `quad.1`.
    quad: (usize, usize),
    event: bool,
}

/// Precomputed per-subject design rows and quadrature nodes.
#[derive(Debug, Clone)]
pub struct Engine {
    pub spec: ModelSpec,
    pub basis: SplineBasis,
    pub layout: ParamLayout,
    p: usize,
    q: usize,
    nl: usize,
    nb: usize,
    spans: Vec<Span>,
    y: Vec<f64>,
    x: Vec<f64>,
    z: Vec<f64>,
    w: Vec<f64>,
    bstart: Vec<u32>,
    bval: Vec<f64>,
    fx: Vec<f64>,
    fz: Vec<f64>,
    covs: Vec<f64>,
    ztz: Vec<f64>,
    // absorbed fixed columns as (random col, fixed col), the per-subject
    // factors (subject-major) and their cross-products
    absorbed: Vec<(usize, usize)>,
    absorb_f: Vec<f64>,
    absorb_ff: Vec<f64>,
}

/// Per-chain parameter state and derived caches.
#[derive(Debug, Clone)]
pub struct State {
    pub theta: ParameterVector,
    /// Random effects, row-major N × q.
    pub b: Vec<f64>,
    mu: Vec<f64>,
    feat: Vec<f64>,
    base: Vec<f64>,
    cov: Vec<f64>,
    rss: Vec<f64>,
    llsurv: Vec<f64>,
    /// Σ_i b_i b_i'.
    s_mat: [f64; MAX_Q * MAX_Q],
    b_sum: [f64; MAX_Q],
    binv: [f64; MAX_Q * MAX_Q],
    logdet_b: f64,
}

/// Buffers for evaluating proposals without touching the state.
#[derive(Debug, Clone, Default)]
pub struct Scratch {
    mu: Vec<f64>,
    feat: Vec<f64>,
    base: Vec<f64>,
    cov: Vec<f64>,
    rss: Vec<f64>,
    llsurv: Vec<f64>,
    local: Vec<f64>,
}

/// Parameter groups updated jointly by a random-walk proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Beta,
    LogSigma,
    BCov,
    /// γ, α and the baseline coefficients.
    Survival,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::Beta, Block::LogSigma, Block::BCov, Block::Survival];

    pub fn name(self) -> &'static str {
        match self {
            Block::Beta => "beta",
            Block::LogSigma => "log_sigma",
            Block::BCov => "b_cov",
            Block::Survival => "survival",
        }
    }
}

#[inline]
fn surv_sum(w: &[f64], base: &[f64], feat: &[f64], nl: usize, alpha: &[f64], c: f64, event: bool) -> f64 {
    let k = w.len();
    let eta = |j: usize| {
        let mut e = base[j] + c;
        for l in 0..nl {
            e += alpha[l] * feat[j * nl + l];
        }
        e
    };
    let mut h = 0.0;
    for (j, wj) in w.iter().enumerate() {
        h += wj * eta(j).exp();
    }
    let mut ll = -h;
    if event {
        ll += eta(k);
    }
    ll
}

/// Cholesky of a small SPD matrix in place (lower triangle); false if not PD.
pub(crate) fn small_chol(a: &mut [f64], q: usize) -> bool {
    for j in 0..q {
        let mut d = a[j * q + j];
        for k in 0..j {
            d -= a[j * q + k] * a[j * q + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * q + j] = d;
        for i in j + 1..q {
            let mut s = a[i * q + j];
            for k in 0..j {
                s -= a[i * q + k] * a[j * q + k];
            }
            a[i * q + j] = s / d;
        }
        for k in j + 1..q {
            a[j * q + k] = 0.0;
        }
    }
    true
}

/// Solves L' x = z in place for lower-triangular L.
pub(crate) fn small_solve_upper_t(l: &[f64], q: usize, z: &mut [f64]) {
    for i in (0..q).rev() {
        let mut s = z[i];
        for k in i + 1..q {
            s -= l[k * q + i] * z[k];
        }
        z[i] = s / l[i * q + i];
    }
}

fn quad_form(m: &[f64], q: usize, v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for r in 0..q {
        for c in 0..q {
            acc += v[r] * m[r * q + c] * v[c];
        }
    }
    acc
}

impl Engine {
    pub fn new(cohort: &Cohort, spec: &ModelSpec, basis: &SplineBasis) -> Result<Engine> {
        spec.validate()?;
        let design = &spec.design;
        let (p, q) = (design.n_fixed(), design.n_random());
        if q > MAX_Q {
            return Err(Error::Config(format!("at most {MAX_Q} random effects supported")));
        }
        let nl = spec.link.n_alpha();
        let nb = basis.degree + 1;
        let layout = ParamLayout::new(spec, basis.dim());
        let (gl_x, gl_w) = quadrature::gl15();
        let mut e = Engine {
            spec: *spec,
            basis: basis.clone(),
            layout,
            p,
            q,
            nl,
            nb,
            spans: Vec::with_capacity(cohort.len()),
            y: Vec::new(),
            x: Vec::new(),
            z: Vec::new(),
            w: Vec::new(),
            bstart: Vec::new(),
            bval: Vec::new(),
            fx: Vec::new(),
            fz: Vec::new(),
            covs: Vec::new(),
            ztz: Vec::new(),
            absorbed: Vec::new(),
            absorb_f: Vec::new(),
            absorb_ff: Vec::new(),
        };
        let mut xr = vec![0.0; p];
        let mut zr = vec![0.0; q];
        let mut bv = vec![0.0; nb];
        let mut nodes = Vec::new();
        for s in &cohort.subjects {
            if s.survival_covariates.len() != spec.n_survival_covariates {
                return Err(Error::DimensionMismatch {
                    what: "survival covariates",
                    expected: spec.n_survival_covariates,
                    actual: s.survival_covariates.len(),
                });
            }
            e.covs.extend_from_slice(&s.survival_covariates);
            let o0 = e.y.len();
            let mut ztz = vec![0.0; q * q];
            for o in &s.observations {
                design.fixed_row(s, o.age, &mut xr);
                design.random_row(s, o.age, &mut zr);
                e.y.push(o.value);
                e.x.extend_from_slice(&xr);
                e.z.extend_from_slice(&zr);
                for r in 0..q {
                    for c in 0..q {
                        ztz[r * q + c] += zr[r] * zr[c];
                    }
                }
            }
            e.ztz.extend_from_slice(&ztz);
            nodes.clear();
            if s.event_age > s.t0 {
                quadrature::panel_nodes(s.t0, s.event_age, &mut nodes);
            }
            let q0 = e.w.len();
            if s.event {
                nodes.push((s.event_age, 0.0));
            }
            for &(t, wt) in &nodes {
                let start = basis.eval_nonzero(t, &mut bv)?;
                e.bstart.push(start as u32);
                e.bval.extend_from_slice(&bv);
                e.w.push(wt);
                for kind in link_features(spec.link) {
                    match kind {
                        Feature::Value => {
                            design.fixed_row(s, t, &mut xr);
                            design.random_row(s, t, &mut zr);
                        }
                        Feature::Slope => {
                            design.fixed_row_dt(s, t, &mut xr)?;
                            design.random_row_dt(s, t, &mut zr)?;
                        }
                        Feature::Cumulative => {
                            xr.fill(0.0);
                            zr.fill(0.0);
                            let mut xt = vec![0.0; p];
                            let mut zt = vec![0.0; q];
                            let (mid, half) = (0.5 * (t + s.t0), 0.5 * (t - s.t0));
                            for (gx, gw) in gl_x.iter().zip(gl_w) {
                                let u = mid + half * gx;
                                design.fixed_row(s, u, &mut xt);
                                design.random_row(s, u, &mut zt);
                                for k in 0..p {
                                    xr[k] += half * gw * xt[k];
                                }
                                for k in 0..q {
                                    zr[k] += half * gw * zt[k];
                                }
                            }
                        }
                    }
                    e.fx.extend_from_slice(&xr);
                    e.fz.extend_from_slice(&zr);
                }
            }
            // the event node is stored with zero weight, after the quadrature nodes
            let quad_end = q0 + nodes.len() - usize::from(s.event);
            e.spans.push(Span {
                obs: (o0, e.y.len()),
                quad: (q0, quad_end),
                event: s.event,
            });
        }
        for xcol in 0..p {
            let cols: Vec<Option<(usize, f64)>> = cohort.subjects.iter().map(|s| design.absorbed_column(s, xcol)).collect();
            let Some(Some((zc, _))) = cols.first().copied() else { continue };
            if cols.iter().all(|c| matches!(c, Some((z, _)) if *z == zc)) {
                e.absorbed.push((zc, xcol));
            }
        }
        let c = e.absorbed.len();
        for s in &cohort.subjects {
            for &(_, xcol) in &e.absorbed {
                e.absorb_f.push(design.absorbed_column(s, xcol).map_or(0.0, |v| v.1));
            }
        }
        e.absorb_ff = vec![0.0; c * c];
        for f in e.absorb_f.chunks_exact(c.max(1)).take(if c == 0 { 0 } else { cohort.len() }) {
            for a in 0..c {
                for b in 0..c {
                    e.absorb_ff[a * c + b] += f[a] * f[b];
                }
            }
        }
        Ok(e)
    }

    pub fn n_subjects(&self) -> usize {
        self.spans.len()
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn p(&self) -> usize {
        self.p
    }

    fn n_nodes_with_events(&self) -> usize {
        self.w.len()
    }

    /// Builds a state with all caches filled.
    pub fn state(&self, theta: ParameterVector, b: Vec<f64>) -> Result<State> {
        theta.check(&self.layout)?;
        if b.len() != self.n_subjects() * self.q {
            return Err(Error::DimensionMismatch {
                what: "random effects",
                expected: self.n_subjects() * self.q,
                actual: b.len(),
            });
        }
        let m = self.n_nodes_with_events();
        let mut st = State {
            theta,
            b,
            mu: vec![0.0; self.n_obs()],
            feat: vec![0.0; m * self.nl],
            base: vec![0.0; m],
            cov: vec![0.0; self.n_subjects()],
            rss: vec![0.0; self.n_subjects()],
            llsurv: vec![0.0; self.n_subjects()],
            s_mat: [0.0; MAX_Q * MAX_Q],
            b_sum: [0.0; MAX_Q],
            binv: [0.0; MAX_Q * MAX_Q],
            logdet_b: 0.0,
        };
        self.refresh(&mut st);
        Ok(st)
    }

    /// Recomputes every cache from θ and b.
    pub fn refresh(&self, st: &mut State) {
        let (p, q, nl) = (self.p, self.q, self.nl);
        for (i, sp) in self.spans.iter().enumerate() {
            let bi = &st.b[i * q..(i + 1) * q];
            let mut rss = 0.0;
            for o in sp.obs.0..sp.obs.1 {
                let m = dot(&st.theta.beta, &self.x[o * p..(o + 1) * p]) + dot(bi, &self.z[o * q..(o + 1) * q]);
                st.mu[o] = m;
                rss += (self.y[o] - m) * (self.y[o] - m);
            }
            st.rss[i] = rss;
            let end = sp.quad.1 + usize::from(sp.event);
            for k in sp.quad.0..end {
                for l in 0..nl {
                    let f = k * nl + l;
                    st.feat[f] = dot(&st.theta.beta, &self.fx[f * p..(f + 1) * p]) + dot(bi, &self.fz[f * q..(f + 1) * q]);
                }
            }
        }
        self.fill_base(&st.theta.gamma_h0, &mut st.base);
        self.fill_cov(&st.theta.gamma, &mut st.cov);
        for i in 0..self.n_subjects() {
            st.llsurv[i] = self.subject_surv(i, &st.base, &st.feat, &st.theta.alpha, st.cov[i]);
        }
        self.refresh_b_stats(st);
        self.refresh_bcov(st);
    }

    fn refresh_b_stats(&self, st: &mut State) {
        let q = self.q;
        st.s_mat = [0.0; MAX_Q * MAX_Q];
        st.b_sum = [0.0; MAX_Q];
        for bi in st.b.chunks_exact(q) {
            for r in 0..q {
                st.b_sum[r] += bi[r];
                for c in 0..q {
                    st.s_mat[r * q + c] += bi[r] * bi[c];
                }
            }
        }
    }

    fn refresh_bcov(&self, st: &mut State) {
        let (binv, logdet) = self.bcov_inverse(&st.theta.log_chol);
        st.binv = binv;
        st.logdet_b = logdet;
    }

    fn bcov_inverse(&self, log_chol: &[f64]) -> ([f64; MAX_Q * MAX_Q], f64) {
        let q = self.q;
        let l = super::params::chol_factor(q, log_chol);
        let linv = l.solve_lower_triangular(&DMatrix::identity(q, q)).expect("positive diagonal");
        let inv = linv.transpose() * &linv;
        let mut out = [0.0; MAX_Q * MAX_Q];
        for r in 0..q {
            for c in 0..q {
                out[r * q + c] = inv[(r, c)];
            }
        }
        let logdet = 2.0 * super::params::chol_indices(q)
            .zip(log_chol)
            .filter(|((r, c), _)| r == c)
            .map(|(_, v)| *v)
            .sum::<f64>();
        (out, logdet)
    }

    fn fill_base(&self, coeffs: &[f64], out: &mut [f64]) {
        let nb = self.nb;
        for (k, o) in out.iter_mut().enumerate() {
            let s = self.bstart[k] as usize;
            let vals = &self.bval[k * nb..(k + 1) * nb];
            *o = dot(vals, &coeffs[s..s + nb]);
        }
    }

    fn fill_cov(&self, gamma: &[f64], out: &mut [f64]) {
        let g = gamma.len();
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(gamma, &self.covs[i * g..(i + 1) * g]);
        }
    }

    fn subject_surv(&self, i: usize, base: &[f64], feat: &[f64], alpha: &[f64], c: f64) -> f64 {
        let sp = self.spans[i];
        let end = sp.quad.1 + usize::from(sp.event);
        surv_sum(
            &self.w[sp.quad.0..sp.quad.1],
            &base[sp.quad.0..end],
            &feat[sp.quad.0 * self.nl..end * self.nl],
            self.nl,
            alpha,
            c,
            sp.event,
        )
    }

    fn ll_long(&self, log_sigma: f64, rss: f64) -> f64 {
        let n = self.n_obs() as f64;
        -0.5 * n * LN_2PI - n * log_sigma - 0.5 * rss * (-2.0 * log_sigma).exp()
    }

    fn re_ll(&self, binv: &[f64], logdet: f64, s_mat: &[f64]) -> f64 {
        let q = self.q;
        let n = self.n_subjects() as f64;
        let tr: f64 = (0..q * q).map(|k| binv[k] * s_mat[k]).sum();
        -0.5 * n * (q as f64 * LN_2PI + logdet) - 0.5 * tr
    }

    pub fn total_rss(&self, st: &State) -> f64 {
        st.rss.iter().sum()
    }

    /// Conditional log-likelihood from the caches.
    pub fn loglik(&self, st: &State) -> f64 {
        let ll = self.ll_long(st.theta.log_sigma, self.total_rss(st)) + st.llsurv.iter().sum::<f64>();
        if ll.is_finite() {
            ll
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn re_loglik(&self, st: &State) -> f64 {
        self.re_ll(&st.binv, st.logdet_b, &st.s_mat)
    }

    pub fn log_posterior(&self, st: &State, priors: &Priors) -> f64 {
        let lp = self.loglik(st) + self.re_loglik(st) + priors.log_density(&st.theta);
        if lp.is_finite() {
            lp
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn block_values(&self, st: &State, block: Block) -> Vec<f64> {
        let t = &st.theta;
        match block {
            Block::Beta => t.beta.clone(),
            Block::LogSigma => vec![t.log_sigma],
            Block::BCov => t.log_chol.clone(),
            Block::Survival => [t.gamma.as_slice(), &t.alpha, &t.gamma_h0].concat(),
        }
    }

    fn split_survival<'v>(&self, vals: &'v [f64]) -> (&'v [f64], &'v [f64], &'v [f64]) {
        let g = self.layout.n_gamma;
        let a = self.layout.n_alpha;
        (&vals[..g], &vals[g..g + a], &vals[g + a..])
    }

    /// Terms of the log posterior that depend on `block`, at the current state.
    pub fn block_current(&self, st: &State, block: Block, priors: &Priors) -> f64 {
        let t = &st.theta;
        match block {
            Block::Beta => {
                self.ll_long(t.log_sigma, self.total_rss(st)) + st.llsurv.iter().sum::<f64>() + priors.coef(&t.beta)
            }
            Block::LogSigma => self.ll_long(t.log_sigma, self.total_rss(st)) + priors.log_sigma(t.log_sigma),
            Block::BCov => self.re_loglik(st) + priors.b_cov(self.q, &t.log_chol),
            Block::Survival => {
                st.llsurv.iter().sum::<f64>() + priors.coef(&t.gamma) + priors.coef(&t.alpha) + priors.coef(&t.gamma_h0)
            }
        }
    }

    /// Same terms as [`block_current`](Self::block_current) with the block set to
    /// `vals`; derived quantities go to `sc` for a subsequent commit.
    pub fn block_eval(&self, st: &State, block: Block, vals: &[f64], priors: &Priors, sc: &mut Scratch) -> f64 {
        let out = match block {
            Block::Beta => {
                let p = self.p;
                let d: Vec<f64> = vals.iter().zip(&st.theta.beta).map(|(a, b)| a - b).collect();
                let d = d.as_slice();
                sc.mu.clear();
                sc.mu.extend(st.mu.iter().enumerate().map(|(o, m)| m + dot(d, &self.x[o * p..(o + 1) * p])));
                sc.feat.clear();
                sc.feat.extend(st.feat.iter().enumerate().map(|(f, v)| v + dot(d, &self.fx[f * p..(f + 1) * p])));
                sc.rss.clear();
                sc.llsurv.clear();
                for (i, sp) in self.spans.iter().enumerate() {
                    let mut rss = 0.0;
                    for o in sp.obs.0..sp.obs.1 {
                        let r = self.y[o] - sc.mu[o];
                        rss += r * r;
                    }
                    sc.rss.push(rss);
                    sc.llsurv.push(self.subject_surv(i, &st.base, &sc.feat, &st.theta.alpha, st.cov[i]));
                }
                self.ll_long(st.theta.log_sigma, sc.rss.iter().sum()) + sc.llsurv.iter().sum::<f64>() + priors.coef(vals)
            }
            Block::LogSigma => self.ll_long(vals[0], self.total_rss(st)) + priors.log_sigma(vals[0]),
            Block::BCov => {
                let (binv, logdet) = self.bcov_inverse(vals);
                self.re_ll(&binv, logdet, &st.s_mat) + priors.b_cov(self.q, vals)
            }
            Block::Survival => {
                let (g, a, h0) = self.split_survival(vals);
                sc.base.resize(st.base.len(), 0.0);
                self.fill_base(h0, &mut sc.base);
                sc.cov.resize(st.cov.len(), 0.0);
                self.fill_cov(g, &mut sc.cov);
                sc.llsurv.clear();
                for i in 0..self.n_subjects() {
                    let v = self.subject_surv(i, &sc.base, &st.feat, a, sc.cov[i]);
                    sc.llsurv.push(v);
                }
                sc.llsurv.iter().sum::<f64>() + priors.coef(g) + priors.coef(a) + priors.coef(h0)
            }
        };
        if out.is_finite() {
            out
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Moves the block to `vals`, using the derived quantities left in `sc` by
    /// the matching [`block_eval`](Self::block_eval) call.
    pub fn block_commit(&self, st: &mut State, block: Block, vals: &[f64], sc: &mut Scratch) {
        match block {
            Block::Beta => {
                st.theta.beta.copy_from_slice(vals);
                std::mem::swap(&mut st.mu, &mut sc.mu);
                std::mem::swap(&mut st.feat, &mut sc.feat);
                std::mem::swap(&mut st.rss, &mut sc.rss);
                std::mem::swap(&mut st.llsurv, &mut sc.llsurv);
            }
            Block::LogSigma => st.theta.log_sigma = vals[0],
            Block::BCov => {
                st.theta.log_chol.copy_from_slice(vals);
                self.refresh_bcov(st);
            }
            Block::Survival => {
                let (g, a, h0) = self.split_survival(vals);
                st.theta.gamma.copy_from_slice(g);
                st.theta.alpha.copy_from_slice(a);
                st.theta.gamma_h0.copy_from_slice(h0);
                std::mem::swap(&mut st.base, &mut sc.base);
                std::mem::swap(&mut st.cov, &mut sc.cov);
                std::mem::swap(&mut st.llsurv, &mut sc.llsurv);
            }
        }
    }

    /// Change in log posterior from replacing subject `i`'s random effects by
    /// `b_new`. The proposed survival features are left in `sc`.
    pub fn re_eval(&self, st: &State, i: usize, b_new: &[f64], sc: &mut Scratch) -> (f64, f64, f64) {
        let (q, nl) = (self.q, self.nl);
        let sp = self.spans[i];
        let bi = &st.b[i * q..(i + 1) * q];
        let mut d = [0.0; MAX_Q];
        for k in 0..q {
            d[k] = b_new[k] - bi[k];
        }
        let d = &d[..q];
        let mut rss = 0.0;
        for o in sp.obs.0..sp.obs.1 {
            let r = self.y[o] - st.mu[o] - dot(d, &self.z[o * q..(o + 1) * q]);
            rss += r * r;
        }
        let end = sp.quad.1 + usize::from(sp.event);
        sc.local.clear();
        for f in sp.quad.0 * nl..end * nl {
            sc.local.push(st.feat[f] + dot(d, &self.fz[f * q..(f + 1) * q]));
        }
        let llsurv = surv_sum(
            &self.w[sp.quad.0..sp.quad.1],
            &st.base[sp.quad.0..end],
            &sc.local,
            nl,
            &st.theta.alpha,
            st.cov[i],
            sp.event,
        );
        let inv_s2 = (-2.0 * st.theta.log_sigma).exp();
        let re_old = quad_form(&st.binv, q, bi);
        let re_new = quad_form(&st.binv, q, b_new);
        let delta = -0.5 * (rss - st.rss[i]) * inv_s2 + (llsurv - st.llsurv[i]) - 0.5 * (re_new - re_old);
        let delta = if delta.is_nan() { f64::NEG_INFINITY } else { delta };
        (delta, rss, llsurv)
    }

    pub fn re_commit(&self, st: &mut State, i: usize, b_new: &[f64], rss: f64, llsurv: f64, sc: &Scratch) {
        let (q, nl) = (self.q, self.nl);
        let sp = self.spans[i];
        let mut d = [0.0; MAX_Q];
        for k in 0..q {
            d[k] = b_new[k] - st.b[i * q + k];
        }
        for o in sp.obs.0..sp.obs.1 {
            st.mu[o] += dot(&d[..q], &self.z[o * q..(o + 1) * q]);
        }
        let end = sp.quad.1 + usize::from(sp.event);
        st.feat[sp.quad.0 * nl..end * nl].copy_from_slice(&sc.local);
        for r in 0..q {
            let (old_r, new_r) = (st.b[i * q + r], b_new[r]);
            st.b_sum[r] += new_r - old_r;
            for c in 0..q {
                let (old_c, new_c) = (st.b[i * q + c], b_new[c]);
                st.s_mat[r * q + c] += new_r * new_c - old_r * old_c;
            }
        }
        st.b[i * q..(i + 1) * q].copy_from_slice(b_new);
        st.rss[i] = rss;
        st.llsurv[i] = llsurv;
    }

    /// Lower Cholesky factor of the precision (Z_i'Z_i/σ² + B⁻¹) of subject
    /// `i`'s Gaussian longitudinal conditional, written to `out` (q × q).
    pub fn re_precision_chol(&self, st: &State, i: usize, out: &mut [f64]) -> bool {
        let q = self.q;
        let inv_s2 = (-2.0 * st.theta.log_sigma).exp();
        for k in 0..q * q {
            out[k] = self.ztz[i * q * q + k] * inv_s2 + st.binv[k];
        }
        small_chol(&mut out[..q * q], q)
    }

    /// Mean of subject `i`'s Gaussian longitudinal conditional given the
    /// precision factor from [`re_precision_chol`](Self::re_precision_chol).
    pub fn re_conditional_mean(&self, st: &State, i: usize, lchol: &[f64], out: &mut [f64]) {
        let q = self.q;
        let sp = self.spans[i];
        let bi = &st.b[i * q..(i + 1) * q];
        let inv_s2 = (-2.0 * st.theta.log_sigma).exp();
        out[..q].fill(0.0);
        for o in sp.obs.0..sp.obs.1 {
            let zo = &self.z[o * q..(o + 1) * q];
            // y - Xβ, recovered from the cached mean
            let r = self.y[o] - st.mu[o] + dot(bi, zo);
            for k in 0..q {
                out[k] += zo[k] * r * inv_s2;
            }
        }
        for r in 0..q {
            let mut v = out[r];
            for k in 0..r {
                v -= lchol[r * q + k] * out[k];
            }
            out[r] = v / lchol[r * q + r];
        }
        small_solve_upper_t(lchol, q, &mut out[..q]);
    }

    /// Exact draw of B from its inverse-Wishart full conditional.
    pub fn bcov_gibbs<R: rand::Rng + ?Sized>(&self, st: &mut State, priors: &Priors, rng: &mut R) -> bool {
        let q = self.q;
        let tau = priors.tempering;
        let n = self.n_subjects() as f64;
        let df = tau * (priors.iw_df(q) + q as f64 + 1.0) + n - q as f64 - 1.0;
        let psi = DMatrix::from_fn(q, q, |r, c| st.s_mat[r * q + c] + if r == c { tau } else { 0.0 });
        let Some(b) = draw_inv_wishart(&psi, df, rng) else {
            return false;
        };
        let Ok(lc) = super::params::log_chol_of(&b) else {
            return false;
        };
        st.theta.log_chol = lc;
        self.refresh_bcov(st);
        true
    }

    /// Exact Gibbs draw of a translation moving mass between each absorbed
    /// fixed effect and the random effects of every subject, scaled by the
    /// subject's covariate. The conditional likelihood is unchanged by it.
    pub fn shift_gibbs<R: rand::Rng + ?Sized>(&self, st: &mut State, priors: &Priors, rng: &mut R) {
        let c = self.absorbed.len();
        if c == 0 || self.n_subjects() == 0 {
            return;
        }
        let q = self.q;
        let prior_prec = priors.tempering / (priors.coef_sd * priors.coef_sd);
        // δ enters as β_x += δ, b_i,z -= f_i δ; the conditional of δ is Gaussian
        let mut fb = vec![0.0; c * q];
        for (bi, f) in st.b.chunks_exact(q).zip(self.absorb_f.chunks_exact(c)) {
            for a in 0..c {
                for k in 0..q {
                    fb[a * q + k] += f[a] * bi[k];
                }
            }
        }
        let mut lam = vec![0.0; c * c];
        let mut mean = vec![0.0; c];
        for (a, &(za, xa)) in self.absorbed.iter().enumerate() {
            let mut ha = 0.0;
            for k in 0..q {
                ha += st.binv[za * q + k] * fb[a * q + k];
            }
            mean[a] = ha - prior_prec * st.theta.beta[xa];
            for (bb, &(zb, _)) in self.absorbed.iter().enumerate() {
                lam[a * c + bb] = self.absorb_ff[a * c + bb] * st.binv[za * q + zb];
            }
            lam[a * c + a] += prior_prec;
        }
        if !small_chol(&mut lam, c) {
            return;
        }
        for i in 0..c {
            let mut s = mean[i];
            for k in 0..i {
                s -= lam[i * c + k] * mean[k];
            }
            mean[i] = s / lam[i * c + i];
        }
        small_solve_upper_t(&lam, c, &mut mean);
        let mut z: Vec<f64> = (0..c).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        small_solve_upper_t(&lam, c, &mut z);
        let delta: Vec<f64> = mean.iter().zip(&z).map(|(m, z)| m + z).collect();
        for (a, &(_, xa)) in self.absorbed.iter().enumerate() {
            st.theta.beta[xa] += delta[a];
        }
        for (bi, f) in st.b.chunks_exact_mut(q).zip(self.absorb_f.chunks_exact(c)) {
            for (a, &(za, _)) in self.absorbed.iter().enumerate() {
                bi[za] -= f[a] * delta[a];
            }
        }
        self.refresh_b_stats(st);
    }

    /// Posterior-mean random effects per subject as nested vectors.
    pub fn split_b(&self, b: &[f64]) -> Vec<Vec<f64>> {
        b.chunks_exact(self.q).map(|c| c.to_vec()).collect()
    }
}

#[derive(Clone, Copy)]
enum Feature {
    Value,
    Slope,
    Cumulative,
}

fn link_features(kind: LinkKind) -> &'static [Feature] {
    match kind {
        LinkKind::Value => &[Feature::Value],
        LinkKind::Slope => &[Feature::Slope],
        LinkKind::ValueSlope => &[Feature::Value, Feature::Slope],
        LinkKind::Cumulative => &[Feature::Cumulative],
    }
}

/// IW(Ψ, ν) by inverting a Bartlett-decomposed Wishart(Ψ⁻¹, ν) draw.
pub(crate) fn draw_inv_wishart<R: rand::Rng + ?Sized>(psi: &DMatrix<f64>, df: f64, rng: &mut R) -> Option<DMatrix<f64>> {
    let q = psi.nrows();
    if !(df > q as f64 - 1.0) {
        return None;
    }
    let l = psi.clone().cholesky()?.inverse().cholesky()?.l();
    let mut a = DMatrix::<f64>::zeros(q, q);
    for r in 0..q {
        let chi = rand_distr::ChiSquared::new(df - r as f64).ok()?;
        a[(r, r)] = rng.sample(chi).sqrt();
        for c in 0..r {
            a[(r, c)] = rng.sample(rand_distr::StandardNormal);
        }
    }
    let la = l * a;
    let w = &la * la.transpose();
    let b = w.cholesky()?.inverse();
    b.iter().all(|v| v.is_finite()).then_some(b)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

impl Engine {
    /// Starting values: least-squares fixed effects ignoring random effects,
    /// per-subject least-squares random effects on the residuals, their sample
    /// covariance for B, no association, and a flat baseline at the crude
    /// event rate.
    pub fn initial_values(&self) -> Result<(ParameterVector, Vec<f64>)> {
        let (p, q) = (self.p, self.q);
        let n = self.n_obs();
        if n < p {
            return Err(Error::EmptyInput("longitudinal observations"));
        }
        let x = DMatrix::from_row_slice(n, p, &self.x);
        let y = nalgebra::DVector::from_column_slice(&self.y);
        let mut xtx = x.transpose() * &x;
        let ridge = 1e-10 * xtx.trace().max(1.0);
        for k in 0..p {
            xtx[(k, k)] += ridge;
        }
        let beta = xtx
            .cholesky()
            .ok_or_else(|| Error::InvalidRecord("fixed-effects design is rank deficient".into()))?
            .solve(&(x.transpose() * &y));
        let resid = &y - &x * &beta;

        let mut b = vec![0.0; self.n_subjects() * q];
        let mut sse = 0.0;
        for (i, sp) in self.spans.iter().enumerate() {
            let (o0, o1) = sp.obs;
            if o1 == o0 {
                continue;
            }
            let z = DMatrix::from_row_slice(o1 - o0, q, &self.z[o0 * q..o1 * q]);
            let r = resid.rows(o0, o1 - o0).into_owned();
            let mut ztz = z.transpose() * &z;
            let lam = if o1 - o0 >= q { 1e-8 } else { 1.0 } * ztz.trace().max(1.0);
            for k in 0..q {
                ztz[(k, k)] += lam;
            }
            if let Some(ch) = ztz.cholesky() {
                let bi = ch.solve(&(z.transpose() * &r));
                let fitted = &z * &bi;
                sse += (r - fitted).norm_squared();
                b[i * q..(i + 1) * q].copy_from_slice(bi.as_slice());
            }
        }
        let dof = n.saturating_sub(self.n_subjects() * q).max(1);
        let mut sigma2 = sse / dof as f64;
        if !(sigma2 > 1e-8) {
            sigma2 = (resid.norm_squared() / n as f64).max(1e-4);
        }

        let nsub = self.n_subjects();
        let mut bcov = DMatrix::identity(q, q);
        if nsub >= 2 {
            let mut mean = vec![0.0; q];
            for bi in b.chunks_exact(q) {
                for k in 0..q {
                    mean[k] += bi[k] / nsub as f64;
                }
            }
            bcov = DMatrix::zeros(q, q);
            for bi in b.chunks_exact(q) {
                for r in 0..q {
                    for c in 0..q {
                        bcov[(r, c)] += (bi[r] - mean[r]) * (bi[c] - mean[c]) / (nsub - 1) as f64;
                    }
                }
            }
            let mut jitter = 1e-6 * (0..q).map(|k| bcov[(k, k)]).fold(1e-6, f64::max);
            while bcov.clone().cholesky().is_none() {
                for k in 0..q {
                    bcov[(k, k)] += jitter;
                }
                jitter *= 10.0;
            }
        }

        let events = self.spans.iter().filter(|s| s.event).count();
        if events == 0 {
            return Err(Error::NoEvents);
        }
        let exposure: f64 = self.w.iter().sum();
        let rate = events as f64 / exposure.max(1e-12);
        let theta = ParameterVector::from_natural(
            beta.as_slice().to_vec(),
            &bcov,
            sigma2.sqrt(),
            vec![0.0; self.layout.n_gamma],
            vec![0.0; self.layout.n_alpha],
            vec![rate.ln(); self.layout.n_h0],
        )?;
        Ok((theta, b))
    }
}
