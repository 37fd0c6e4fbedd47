//! Time-dependent predictive accuracy with inverse-probability-of-censoring
//! weights: dynamic AUC, Brier score, paired bootstrap differences and
//! k-fold cross-validation.

mod cv;

pub use cv::{kfold_cv, score_subjects, CvConfig, CvResult, FoldAssignment};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{domain, stream};
use crate::stats::quantile_sorted;

/// Product-limit survival estimate as a right-continuous step function.
#[derive(Debug, Clone, PartialEq)]
pub struct KaplanMeier {
    /// Distinct event times, increasing.
    pub times: Vec<f64>,
    /// Survival just after each time.
    pub surv: Vec<f64>,
}

impl KaplanMeier {
    /// Ŝ(t).
    pub fn eval(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            1.0
        } else {
            self.surv[k - 1]
        }
    }

    /// Ŝ(t−), the value just before t.
    pub fn eval_left(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x < t);
        if k == 0 {
            1.0
        } else {
            self.surv[k - 1]
        }
    }

    /// Ŝ(u | s) = Ŝ(u)/Ŝ(s) for u ≥ s.
    pub fn conditional(&self, u: f64, s: f64) -> Result<f64> {
        let d = self.eval(s);
        if d <= 0.0 {
            return Err(Error::CensoringExhausted(s));
        }
        Ok(self.eval(u) / d)
    }
}

pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<KaplanMeier> {
    if times.is_empty() {
        return Err(Error::EmptyInput("survival times"));
    }
    if times.len() != events.len() {
        return Err(Error::DimensionMismatch {
            what: "event flags",
            expected: times.len(),
            actual: events.len(),
        });
    }
    if times.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
        return Err(Error::InvalidRecord("survival times must be finite and non-negative".into()));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut km = KaplanMeier {
        times: Vec::new(),
        surv: Vec::new(),
    };
    let mut s = 1.0;
    let mut at_risk = times.len();
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut j = i;
        let mut d = 0usize;
        while j < order.len() && times[order[j]] == t {
            d += usize::from(events[order[j]]);
            j += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            km.times.push(t);
            km.surv.push(s);
        }
        at_risk -= j - i;
        i = j;
    }
    Ok(km)
}

/// Predicted window risks for subjects still event-free at the landmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub landmark: f64,
    pub window: f64,
    pub subject_ids: Vec<String>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(
        landmark: f64,
        window: f64,
        subject_ids: Vec<String>,
        times: Vec<f64>,
        events: Vec<bool>,
        scores: Vec<f64>,
    ) -> Result<Self> {
        let n = subject_ids.len();
        for (what, len) in [("times", times.len()), ("events", events.len()), ("scores", scores.len())] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n,
                    actual: len,
                });
            }
        }
        if let Some(i) = times.iter().position(|&t| !(t > landmark)) {
            return Err(Error::InvalidRecord(format!(
                "subject {} is not at risk at landmark {landmark}",
                subject_ids[i]
            )));
        }
        if window < 0.0 {
            return Err(Error::Config("window must be non-negative".into()));
        }
        Ok(ScoreSet {
            landmark,
            window,
            subject_ids,
            times,
            events,
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subject_ids.is_empty()
    }

    /// Observed in-window event indicator D̃.
    pub fn is_case(&self, i: usize) -> bool {
        self.events[i] && self.times[i] <= self.landmark + self.window
    }

    pub fn is_control(&self, i: usize) -> bool {
        self.times[i] > self.landmark + self.window
    }

    fn resample(&self, idx: &[usize]) -> ScoreSet {
        ScoreSet {
            landmark: self.landmark,
            window: self.window,
            subject_ids: idx.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            times: idx.iter().map(|&i| self.times[i]).collect(),
            events: idx.iter().map(|&i| self.events[i]).collect(),
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
        }
    }
}

/// Censoring survival Ĝ estimated on the landmark risk set, so Ĝ(s) = 1 and
/// Ĝ(u) is already conditional on being at risk at s.
pub fn censoring_km(set: &ScoreSet) -> Result<KaplanMeier> {
    let flags: Vec<bool> = set.events.iter().map(|e| !e).collect();
    kaplan_meier(&set.times, &flags)
}

/// Ŵ_i = 1(T > s+w)/Ĝ(s+w | s) + 1(s < T ≤ s+w) δ / Ĝ(T− | s).
pub fn ipcw_weights(set: &ScoreSet, g: &KaplanMeier) -> Result<Vec<f64>> {
    let s = set.landmark;
    let horizon = s + set.window;
    let gs = g.eval(s);
    if gs <= 0.0 {
        return Err(Error::CensoringExhausted(s));
    }
    (0..set.len())
        .map(|i| {
            if set.is_control(i) {
                let gh = g.eval(horizon) / gs;
                if gh <= 0.0 {
                    return Err(Error::CensoringExhausted(horizon));
                }
                Ok(1.0 / gh)
            } else if set.is_case(i) {
                let t = set.times[i];
                let gt = g.eval_left(t) / gs;
                if gt <= 0.0 {
                    return Err(Error::CensoringExhausted(t));
                }
                Ok(1.0 / gt)
            } else {
                Ok(0.0)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Undefined {
    NoCases,
    NoControls,
}

/// AUC, or the reason it cannot be computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Auc {
    Value(f64),
    Undefined(Undefined),
}

impl Auc {
    pub fn value(self) -> Option<f64> {
        match self {
            Auc::Value(v) => Some(v),
            Auc::Undefined(_) => None,
        }
    }
}

/// Weighted concordance between cases and controls; tied scores count ½.
pub fn dynamic_auc(set: &ScoreSet, weights: &[f64]) -> Result<Auc> {
    if weights.len() != set.len() {
        return Err(Error::DimensionMismatch {
            what: "weights",
            expected: set.len(),
            actual: weights.len(),
        });
    }
    let mut order: Vec<usize> = (0..set.len()).filter(|&i| weights[i] > 0.0).collect();
    let case_w: f64 = order.iter().filter(|&&i| set.is_case(i)).map(|&i| weights[i]).sum();
    let ctrl_w: f64 = order.iter().filter(|&&i| set.is_control(i)).map(|&i| weights[i]).sum();
    if case_w <= 0.0 {
        return Ok(Auc::Undefined(Undefined::NoCases));
    }
    if ctrl_w <= 0.0 {
        return Ok(Auc::Undefined(Undefined::NoControls));
    }
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    let mut below = 0.0;
    let mut num = 0.0;
    let mut i = 0;
    while i < order.len() {
        let v = set.scores[order[i]];
        let (mut cw, mut kw) = (0.0, 0.0);
        let mut j = i;
        while j < order.len() && set.scores[order[j]] == v {
            let k = order[j];
            if set.is_case(k) {
                cw += weights[k];
            } else if set.is_control(k) {
                kw += weights[k];
            }
            j += 1;
        }
        num += cw * (below + 0.5 * kw);
        below += kw;
        i = j;
    }
    Ok(Auc::Value(num / (case_w * ctrl_w)))
}

/// (1/n) Σ Ŵ_i (D̃_i − π_i)² over the landmark risk set.
pub fn brier_score(set: &ScoreSet, weights: &[f64]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyInput("landmark risk set"));
    }
    if weights.len() != set.len() {
        return Err(Error::DimensionMismatch {
            what: "weights",
            expected: set.len(),
            actual: weights.len(),
        });
    }
    let sum: f64 = (0..set.len())
        .map(|i| {
            let d = if set.is_case(i) { 1.0 } else { 0.0 };
            weights[i] * (d - set.scores[i]).powi(2)
        })
        .sum();
    Ok(sum / set.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: Auc,
    pub brier: f64,
}

/// AUC and Brier score with weights from the set's own censoring distribution.
pub fn evaluate(set: &ScoreSet) -> Result<Metrics> {
    let g = censoring_km(set)?;
    let w = ipcw_weights(set, &g)?;
    Ok(Metrics {
        auc: dynamic_auc(set, &w)?,
        brier: brier_score(set, &w)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaMetrics {
    /// AUC(A) − AUC(B); `None` when either is undefined.
    pub delta_auc: Option<f64>,
    pub delta_auc_ci: Option<(f64, f64)>,
    /// BS(A) − BS(B).
    pub delta_bs: f64,
    pub delta_bs_ci: (f64, f64),
    pub n_bootstrap: usize,
}

pub const DEFAULT_BOOTSTRAP: usize = 500;

/// Paired subject-level bootstrap of the metric differences between two
/// score sets over the same subjects.
pub fn delta_metrics(a: &ScoreSet, b: &ScoreSet, n_bootstrap: usize, seed: u64) -> Result<DeltaMetrics> {
    if a.subject_ids != b.subject_ids || a.times != b.times || a.events != b.events {
        return Err(Error::MismatchedSubjects);
    }
    if a.landmark != b.landmark || a.window != b.window {
        return Err(Error::MismatchedSubjects);
    }
    if n_bootstrap == 0 {
        return Err(Error::Config("n_bootstrap must be positive".into()));
    }
    let (ma, mb) = (evaluate(a)?, evaluate(b)?);
    let delta_auc = ma.auc.value().zip(mb.auc.value()).map(|(x, y)| x - y);
    let delta_bs = ma.brier - mb.brier;
    let n = a.len();
    let reps: Vec<(Option<f64>, Option<f64>)> = (0..n_bootstrap)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, domain::BOOTSTRAP, r as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let (ra, rb) = (a.resample(&idx), b.resample(&idx));
            match (evaluate(&ra), evaluate(&rb)) {
                (Ok(x), Ok(y)) => (
                    x.auc.value().zip(y.auc.value()).map(|(p, q)| p - q),
                    Some(x.brier - y.brier),
                ),
                _ => (None, None),
            }
        })
        .collect();
    let ci = |mut v: Vec<f64>| -> Option<(f64, f64)> {
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some((quantile_sorted(&v, 0.025), quantile_sorted(&v, 0.975)))
    };
    let auc_reps: Vec<f64> = reps.iter().filter_map(|r| r.0).collect();
    let bs_reps: Vec<f64> = reps.iter().filter_map(|r| r.1).collect();
    if bs_reps.len() < n_bootstrap {
        log::warn!("{} of {n_bootstrap} bootstrap replicates were unusable", n_bootstrap - bs_reps.len());
    }
    Ok(DeltaMetrics {
        delta_auc,
        delta_auc_ci: if delta_auc.is_some() { ci(auc_reps) } else { None },
        delta_bs,
        delta_bs_ci: ci(bs_reps).unwrap_or((f64::NAN, f64::NAN)),
        n_bootstrap,
    })
}
