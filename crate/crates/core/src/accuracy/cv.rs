use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ScoreSet;
use crate::basis::SplineBasis;
use crate::cohort::Cohort;
use crate::dynpred::Predictor;
use crate::error::{Error, Result};
use crate::inference::{fit_with_basis, McmcConfig, Priors};
use crate::model::ModelSpec;
use crate::rng::{derive_seed, domain, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub k: usize,
    pub landmarks: Vec<f64>,
    pub windows: Vec<f64>,
    pub n_reps: usize,
    pub seed: u64,
}

/// Fold index of every subject, in cohort order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    /// Shuffles event and non-event subjects separately and deals each group
    /// round-robin, continuing the deal across groups.
    pub fn stratified(cohort: &Cohort, k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config("cross-validation needs k >= 2".into()));
        }
        if k > cohort.len() {
            return Err(Error::Config(format!("k = {k} exceeds {} subjects", cohort.len())));
        }
        let mut rng = stream(seed, domain::FOLD, 0);
        let mut events: Vec<usize> = (0..cohort.len()).filter(|&i| cohort.subjects[i].event).collect();
        let mut others: Vec<usize> = (0..cohort.len()).filter(|&i| !cohort.subjects[i].event).collect();
        events.shuffle(&mut rng);
        others.shuffle(&mut rng);
        let mut fold_of = vec![0; cohort.len()];
        for (pos, &i) in events.iter().chain(&others).enumerate() {
            fold_of[i] = pos % k;
        }
        Ok(FoldAssignment { k, fold_of })
    }

    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub folds: FoldAssignment,
    /// Pooled out-of-fold score sets, landmark-major then window.
    pub score_sets: Vec<ScoreSet>,
}

impl CvResult {
    pub fn score_set(&self, landmark: f64, window: f64) -> Option<&ScoreSet> {
        self.score_sets.iter().find(|s| s.landmark == landmark && s.window == window)
    }
}

/// Scores the subjects `indices` of `cohort` at every landmark where they are
/// still at risk. Returns one score set per (landmark, window) pair; entries
/// keep the order of `indices`.
pub fn score_subjects(
    predictor: &Predictor,
    cohort: &Cohort,
    indices: &[usize],
    landmarks: &[f64],
    windows: &[f64],
    n_reps: usize,
    seed: u64,
) -> Result<Vec<ScoreSet>> {
    let mut out = Vec::with_capacity(landmarks.len() * windows.len());
    for (l, &s) in landmarks.iter().enumerate() {
        let mut ids = Vec::new();
        let mut times = Vec::new();
        let mut events = Vec::new();
        let mut scores: Vec<Vec<f64>> = vec![Vec::new(); windows.len()];
        for &i in indices {
            let subj = &cohort.subjects[i];
            if !(subj.t0 <= s && subj.event_age > s) {
                continue;
            }
            let sub_seed = derive_seed(derive_seed(seed, domain::SUBJECT, i as u64), domain::REPETITION, l as u64);
            let preds = predictor.predict_windows(subj, s, windows, n_reps, sub_seed)?;
            ids.push(subj.subject_id.clone());
            times.push(subj.event_age);
            events.push(subj.event);
            for (w, p) in preds.iter().enumerate() {
                scores[w].push(p.mean);
            }
        }
        for (w, &win) in windows.iter().enumerate() {
            out.push(ScoreSet::new(
                s,
                win,
                ids.clone(),
                times.clone(),
                events.clone(),
                std::mem::take(&mut scores[w]),
            )?);
        }
    }
    Ok(out)
}

/// k-fold cross-validated score sets: each subject is scored by a model fit
/// without its fold. Every fold shares the full cohort's basis boundary,
/// with knots placed on the training events.
pub fn kfold_cv(
    cohort: &Cohort,
    spec: &ModelSpec,
    priors: &Priors,
    mcmc: &McmcConfig,
    cfg: &CvConfig,
) -> Result<CvResult> {
    spec.validate()?;
    mcmc.validate()?;
    if cfg.landmarks.is_empty() || cfg.windows.is_empty() {
        return Err(Error::Config("landmarks and windows must be nonempty".into()));
    }
    let span = cohort.age_span().ok_or(Error::EmptyInput("cohort"))?;
    let max_w = cfg.windows.iter().copied().fold(0.0, f64::max);
    if let Some(&s) = cfg.landmarks.iter().find(|&&s| s + max_w > span.1) {
        return Err(Error::WindowOutsideSupport { end: s + max_w, hi: span.1 });
    }
    let folds = FoldAssignment::stratified(cohort, cfg.k, cfg.seed)?;
    let n_pairs = cfg.landmarks.len() * cfg.windows.len();
    // per (landmark, window): (cohort index, subject row) pairs gathered over folds
    let mut pooled: Vec<Vec<(usize, String, f64, bool, f64)>> = vec![Vec::new(); n_pairs];
    for f in 0..cfg.k {
        let test = folds.members(f);
        let train_idx: Vec<usize> = (0..cohort.len()).filter(|&i| folds.fold_of[i] != f).collect();
        let train = cohort.subset(&train_idx);
        if train.n_events() == 0 {
            return Err(Error::SplitWithoutEvents(f));
        }
        let basis = SplineBasis::from_event_quantiles(&train.event_ages(), spec.n_basis, spec.degree, span)?;
        let config = McmcConfig {
            seed: derive_seed(cfg.seed, domain::FOLD, f as u64 + 1),
            ..mcmc.clone()
        };
        log::info!("fold {}/{}: training on {} subjects", f + 1, cfg.k, train.len());
        let fit = fit_with_basis(&train, spec, &basis, priors, &config)?;
        let predictor = Predictor::from_fit(&fit)?;
        let sets = score_subjects(&predictor, cohort, &test, &cfg.landmarks, &cfg.windows, cfg.n_reps, cfg.seed)?;
        for (pair, set) in sets.into_iter().enumerate() {
            let lookup: std::collections::HashMap<&str, usize> =
                test.iter().map(|&i| (cohort.subjects[i].subject_id.as_str(), i)).collect();
            for j in 0..set.len() {
                let i = lookup[set.subject_ids[j].as_str()];
                pooled[pair].push((i, set.subject_ids[j].clone(), set.times[j], set.events[j], set.scores[j]));
            }
        }
    }
    let mut score_sets = Vec::with_capacity(n_pairs);
    for (pair, mut rows) in pooled.into_iter().enumerate() {
        rows.sort_by_key(|r| r.0);
        let (l, w) = (pair / cfg.windows.len(), pair % cfg.windows.len());
        score_sets.push(ScoreSet::new(
            cfg.landmarks[l],
            cfg.windows[w],
            rows.iter().map(|r| r.1.clone()).collect(),
            rows.iter().map(|r| r.2).collect(),
            rows.iter().map(|r| r.3).collect(),
            rows.iter().map(|r| r.4).collect(),
        )?);
    }
    Ok(CvResult { folds, score_sets })
}
