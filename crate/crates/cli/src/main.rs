use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use jointrisk_core::accuracy::{self, CvConfig, CvResult, DeltaMetrics, Metrics, DEFAULT_BOOTSTRAP};
use jointrisk_core::cohort::{read_cohort_csv, write_cohort_csv};
use jointrisk_core::consensus::{consensus_fit, SplitPlan};
use jointrisk_core::dynpred::{write_predictions_csv, Predictor, DEFAULT_REPETITIONS};
use jointrisk_core::rng::{derive_seed, domain};
use jointrisk_core::simulate::{simulate_cohort, write_truth_csv, SimConfig};
use jointrisk_core::stats::quantile;
use jointrisk_core::{fit, Error, FitResult, LinkKind, McmcConfig, ModelSpec, Priors};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_CONVERGENCE: u8 = 4;
const RHAT_THRESHOLD: f64 = 1.10;

#[derive(Parser)]
#[command(name = "jointrisk", version, about = "Joint longitudinal-survival risk models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a cohort and its hidden truth.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the joint model, optionally by consensus over disjoint splits.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        /// value, slope, value+slope or cumulative
        #[arg(long)]
        link: Option<LinkKind>,
        /// Number of consensus splits; 0 or 1 fits the full cohort.
        #[arg(long)]
        splits: Option<usize>,
        /// Exit 0 even when some R-hat is at or above 1.10.
        #[arg(long)]
        allow_nonconverged: bool,
    },
    /// Dynamic risk predictions from a fitted model.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
    },
    /// Cross-validated AUC and Brier score.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
    },
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: anyhow::Error) -> Self {
        Failure { code: EXIT_CONFIG, error }
    }

    fn data(error: anyhow::Error) -> Self {
        Failure { code: EXIT_DATA, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::UsePlainFit | Error::Json(_) => EXIT_CONFIG,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            error: e.into(),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    cohort_out: PathBuf,
    truth_out: PathBuf,
    #[serde(default)]
    simulation: SimConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FitConfig {
    cohort: PathBuf,
    output: PathBuf,
    #[serde(default)]
    draws_out: Option<PathBuf>,
    #[serde(default)]
    model: ModelSpec,
    #[serde(default)]
    priors: Priors,
    #[serde(default)]
    mcmc: McmcConfig,
    #[serde(default)]
    consensus: Option<SplitPlan>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictConfig {
    model: PathBuf,
    cohort: PathBuf,
    output: PathBuf,
    /// Subject ids to score; all subjects when omitted.
    #[serde(default)]
    subjects: Option<Vec<String>>,
    landmarks: Vec<f64>,
    #[serde(default = "default_window")]
    windows: Vec<f64>,
    #[serde(default = "default_reps")]
    n_reps: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedModel {
    name: String,
    #[serde(default)]
    spec: ModelSpec,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ValidateConfig {
    cohort: PathBuf,
    output: PathBuf,
    models: Vec<NamedModel>,
    #[serde(default)]
    priors: Priors,
    #[serde(default)]
    mcmc: McmcConfig,
    #[serde(default = "default_k")]
    k: usize,
    #[serde(default = "default_landmarks")]
    landmarks: Vec<f64>,
    #[serde(default = "default_windows")]
    windows: Vec<f64>,
    #[serde(default = "default_reps")]
    n_reps: usize,
    #[serde(default = "default_bootstrap")]
    n_bootstrap: usize,
}

fn default_window() -> Vec<f64> {
    vec![5.0]
}

fn default_windows() -> Vec<f64> {
    vec![2.0, 5.0]
}

fn default_landmarks() -> Vec<f64> {
    (41..=65).map(f64::from).collect()
}

fn default_reps() -> usize {
    DEFAULT_REPETITIONS
}

fn default_k() -> usize {
    5
}

fn default_bootstrap() -> usize {
    DEFAULT_BOOTSTRAP
}

fn load_config<T: DeserializeOwned>(path: &Path) -> Outcome<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(Failure::config)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .map_err(Failure::config)
}

fn with_path<T>(r: jointrisk_core::Result<T>, what: &str, path: &Path) -> Outcome<T> {
    r.map_err(|e| {
        let mut f = Failure::from(e);
        f.error = f.error.context(format!("{what} {}", path.display()));
        f
    })
}

fn cmd_simulate(common: &Common, seed: Option<u64>) -> Outcome<()> {
    let mut cfg: SimulateConfig = load_config(&common.config)?;
    if let Some(s) = seed {
        cfg.simulation.seed = s;
    }
    cfg.simulation.validate()?;
    let sim = simulate_cohort(&cfg.simulation)?;
    with_path(write_cohort_csv(&sim.cohort, &cfg.cohort_out), "writing", &cfg.cohort_out)?;
    with_path(write_truth_csv(&sim.truth, &cfg.truth_out), "writing", &cfg.truth_out)?;
    let follow: Vec<f64> = sim.cohort.subjects.iter().map(|s| s.event_age - s.t0).collect();
    let visits: Vec<f64> = sim.cohort.subjects.iter().map(|s| s.n_obs() as f64).collect();
    println!("subjects           {}", sim.cohort.len());
    println!(
        "events             {} ({:.1}%)",
        sim.cohort.n_events(),
        100.0 * sim.event_fraction()
    );
    println!(
        "follow-up (years)  median {:.1} [{:.1}-{:.1}]",
        quantile(&follow, 0.5),
        quantile(&follow, 0.25),
        quantile(&follow, 0.75)
    );
    println!("visits per subject median {:.0}", quantile(&visits, 0.5));
    Ok(())
}

fn cmd_fit(common: &Common, seed: u64, link: Option<LinkKind>, splits: Option<usize>, allow: bool) -> Outcome<()> {
    let mut cfg: FitConfig = load_config(&common.config)?;
    cfg.mcmc.seed = seed;
    if let Some(l) = link {
        cfg.model.link = l;
    }
    if let Some(n) = splits {
        cfg.consensus = (n >= 2).then(|| SplitPlan {
            n_splits: n,
            ..cfg.consensus.unwrap_or_default()
        });
    }
    cfg.model.validate()?;
    cfg.priors.validate()?;
    cfg.mcmc.validate()?;
    let cohort = with_path(read_cohort_csv(&cfg.cohort), "reading", &cfg.cohort)?;
    let result = match cfg.consensus {
        Some(plan) => consensus_fit(&cohort, &cfg.model, &cfg.priors, &cfg.mcmc, &plan)?,
        None => fit(&cohort, &cfg.model, &cfg.priors, &cfg.mcmc)?,
    };
    let json = serde_json::to_string(&result).map_err(|e| Failure::data(e.into()))?;
    fs::write(&cfg.output, json)
        .with_context(|| format!("writing {}", cfg.output.display()))
        .map_err(Failure::data)?;
    if let Some(p) = &cfg.draws_out {
        with_path(result.write_draws_csv(p), "writing", p)?;
    }
    print_summary(&result);
    if !result.converged(RHAT_THRESHOLD) {
        let msg = anyhow!(
            "max R-hat {:.3} is at or above {RHAT_THRESHOLD}; results were written",
            result.max_rhat()
        );
        if allow {
            log::warn!("{msg}");
        } else {
            return Err(Failure {
                code: EXIT_CONVERGENCE,
                error: msg,
            });
        }
    }
    Ok(())
}

fn print_summary(r: &FitResult) {
    println!("{:<18} {:>11} {:>11} {:>11} {:>7}", "coefficient", "mean", "2.5%", "97.5%", "R-hat");
    for s in &r.summaries {
        println!("{:<18} {:>11.4} {:>11.4} {:>11.4} {:>7.3}", s.name, s.mean, s.lo, s.hi, s.rhat);
    }
    println!("DIC {:.2} (pD {:.2})", r.dic.dic, r.dic.pd);
}

fn cmd_predict(common: &Common, seed: u64) -> Outcome<()> {
    let cfg: PredictConfig = load_config(&common.config)?;
    if cfg.landmarks.is_empty() || cfg.windows.is_empty() {
        return Err(Failure::config(anyhow!("landmarks and windows must be nonempty")));
    }
    if cfg.n_reps == 0 {
        return Err(Failure::config(anyhow!("n_reps must be positive")));
    }
    let text = fs::read_to_string(&cfg.model)
        .with_context(|| format!("reading {}", cfg.model.display()))
        .map_err(Failure::data)?;
    let model: FitResult = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", cfg.model.display()))
        .map_err(Failure::data)?;
    let cohort = with_path(read_cohort_csv(&cfg.cohort), "reading", &cfg.cohort)?;
    let predictor = Predictor::from_fit(&model)?;
    let chosen: Vec<usize> = match &cfg.subjects {
        None => (0..cohort.len()).collect(),
        Some(ids) => ids
            .iter()
            .map(|id| {
                cohort
                    .subjects
                    .iter()
                    .position(|s| &s.subject_id == id)
                    .ok_or_else(|| Error::UnknownSubject(id.clone()))
            })
            .collect::<jointrisk_core::Result<_>>()?,
    };
    let mut rows = Vec::new();
    for &i in &chosen {
        let subj = &cohort.subjects[i];
        for (l, &s) in cfg.landmarks.iter().enumerate() {
            if let Some(first) = subj.observations.first() {
                if s < first.age {
                    return Err(Error::LandmarkBeforeHistory { landmark: s, first: first.age }.into());
                }
            }
            let sub_seed = derive_seed(derive_seed(seed, domain::SUBJECT, i as u64), domain::REPETITION, l as u64);
            let preds = predictor
                .predict_windows(subj, s, &cfg.windows, cfg.n_reps, sub_seed)
                .map_err(|e| {
                    let mut f = Failure::from(e);
                    f.error = f.error.context(format!("subject {}", subj.subject_id));
                    f
                })?;
            rows.extend(preds);
        }
    }
    with_path(write_predictions_csv(&rows, &cfg.output), "writing", &cfg.output)?;
    println!("{} predictions written to {}", rows.len(), cfg.output.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn cmd_validate(common: &Common, seed: u64) -> Outcome<()> {
    let mut cfg: ValidateConfig = load_config(&common.config)?;
    if cfg.models.is_empty() || cfg.models.len() > 2 {
        return Err(Failure::config(anyhow!("validate takes one or two models")));
    }
    for m in &cfg.models {
        m.spec.validate()?;
    }
    cfg.priors.validate()?;
    cfg.mcmc.seed = seed;
    cfg.mcmc.validate()?;
    if cfg.k < 2 || cfg.n_reps == 0 || cfg.n_bootstrap == 0 {
        return Err(Failure::config(anyhow!("k must be at least 2; n_reps and n_bootstrap positive")));
    }
    let cohort = with_path(read_cohort_csv(&cfg.cohort), "reading", &cfg.cohort)?;
    let cv = CvConfig {
        k: cfg.k,
        landmarks: cfg.landmarks.clone(),
        windows: cfg.windows.clone(),
        n_reps: cfg.n_reps,
        seed,
    };
    let results: Vec<CvResult> = cfg
        .models
        .iter()
        .map(|m| {
            log::info!("cross-validating model {}", m.name);
            accuracy::kfold_cv(&cohort, &m.spec, &cfg.priors, &cfg.mcmc, &cv)
        })
        .collect::<jointrisk_core::Result<_>>()?;

    let two = results.len() == 2;
    let mut out = String::from("landmark,window,model,auc,bs");
    if two {
        out.push_str(",delta_auc,delta_auc_lo,delta_auc_hi,delta_bs,delta_bs_lo,delta_bs_hi");
    }
    out.push('\n');
    for (pair, set_a) in results[0].score_sets.iter().enumerate() {
        let metric = |set: &accuracy::ScoreSet| -> Option<Metrics> { accuracy::evaluate(set).ok() };
        let delta: Option<DeltaMetrics> = if two {
            let boot_seed = derive_seed(seed, domain::BOOTSTRAP, pair as u64);
            accuracy::delta_metrics(set_a, &results[1].score_sets[pair], cfg.n_bootstrap, boot_seed).ok()
        } else {
            None
        };
        for (m, res) in cfg.models.iter().zip(&results) {
            let set = &res.score_sets[pair];
            let mt = metric(set);
            out.push_str(&format!(
                "{},{},{},{},{}",
                set.landmark,
                set.window,
                m.name,
                fmt_opt(mt.and_then(|x| x.auc.value())),
                fmt_opt(mt.map(|x| x.brier))
            ));
            if two {
                let d = delta.as_ref();
                let bs_ci = d.map(|d| d.delta_bs_ci).filter(|c| c.0.is_finite());
                out.push_str(&format!(
                    ",{},{},{},{},{},{}",
                    fmt_opt(d.and_then(|d| d.delta_auc)),
                    fmt_opt(d.and_then(|d| d.delta_auc_ci).map(|c| c.0)),
                    fmt_opt(d.and_then(|d| d.delta_auc_ci).map(|c| c.1)),
                    fmt_opt(d.map(|d| d.delta_bs)),
                    fmt_opt(bs_ci.map(|c| c.0)),
                    fmt_opt(bs_ci.map(|c| c.1)),
                ));
            }
            out.push('\n');
        }
    }
    fs::write(&cfg.output, out)
        .with_context(|| format!("writing {}", cfg.output.display()))
        .map_err(Failure::data)?;
    println!(
        "{} landmark/window pairs written to {}",
        results[0].score_sets.len(),
        cfg.output.display()
    );
    Ok(())
}

fn set_threads(n: Option<usize>) -> Outcome<()> {
    if let Some(n) = n {
        if n == 0 {
            return Err(Failure::config(anyhow!("--threads must be positive")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(e.into()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome<()> {
    match &cli.command {
        Command::Simulate { common, seed } => {
            set_threads(common.threads)?;
            cmd_simulate(common, *seed)
        }
        Command::Fit {
            common,
            seed,
            link,
            splits,
            allow_nonconverged,
        } => {
            set_threads(common.threads)?;
            cmd_fit(common, *seed, *link, *splits, *allow_nonconverged)
        }
        Command::Predict { common, seed } => {
            set_threads(common.threads)?;
            cmd_predict(common, *seed)
        }
        Command::Validate { common, seed } => {
            set_threads(common.threads)?;
            cmd_validate(common, *seed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
