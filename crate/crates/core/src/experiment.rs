//! Config-driven experiments: dataset × algorithms × repeats, with optional
//! k-fold tuning, written out as `results.json`, `tau_trajectory.csv` and
//! `per_task_errors.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_syn1, generate_syn2, load_csv_dataset, split_once, CsvSchema, SplitSpec, SynConfig, TrainSize,
};
use crate::error::{Error, Result};
use crate::eval::{aggregate_runs, cross_validate, evaluate, metric_for, paired_t_test, GridAxis, HyperParam, Metric, RunSummary};
use crate::model::{MultitaskDataset, PacingConfig, TauMode, TauRecord};
use crate::par;
use crate::seeds::{seed_for, Purpose};
use crate::trainer::{Method, Variant};

/// Optional overrides on top of the syn1/syn2 defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynOverrides {
    /// Pins the generator seed; otherwise data is regenerated per repeat.
    pub seed: Option<u64>,
    pub n_tasks: Option<usize>,
    pub n_per_task: Option<usize>,
    pub n_holdout_per_task: Option<usize>,
    pub d: Option<usize>,
    pub n_groups: Option<usize>,
    pub group_rank: Option<usize>,
    pub sigma_easy: Option<f64>,
    pub sigma_hard: Option<f64>,
    pub hard_fraction: Option<f64>,
    pub noise_sd: Option<f64>,
}

impl SynOverrides {
    fn apply(&self, mut cfg: SynConfig) -> SynConfig {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(n_tasks, n_per_task, n_holdout_per_task, d, n_groups, group_rank, sigma_easy, sigma_hard, hard_fraction, noise_sd);
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetConfig {
    Syn1(SynOverrides),
    Syn2(SynOverrides),
    Csv { path: PathBuf, schema: CsvSchema },
}

impl DatasetConfig {
    pub fn label(&self) -> &'static str {
        match self {
            DatasetConfig::Syn1(_) => "syn1",
            DatasetConfig::Syn2(_) => "syn2",
            DatasetConfig::Csv { .. } => "csv",
        }
    }

    /// Generator settings for `repeat`; `None` for CSV data.
    pub fn syn_config(&self, root_seed: u64, repeat: usize) -> Option<SynConfig> {
        let (base, o): (fn(u64) -> SynConfig, &SynOverrides) = match self {
            DatasetConfig::Syn1(o) => (SynConfig::syn1, o),
            DatasetConfig::Syn2(o) => (SynConfig::syn2, o),
            DatasetConfig::Csv { .. } => return None,
        };
        let seed = o.seed.unwrap_or_else(|| seed_for(root_seed, repeat as u64, Purpose::Data));
        Some(o.apply(base(seed)))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: Option<f64>,
    pub train_count: Option<usize>,
    #[serde(default)]
    pub stratified: bool,
    pub n_repeats: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    pub grid: Vec<GridAxis>,
}

fn default_k() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub name: String,
    pub tau_rule: Option<TauMode>,
    /// Regularization strength for any method; overrides `pacing.gamma`.
    pub gamma: Option<f64>,
    pub pacing: Option<PacingConfig>,
}

impl AlgorithmConfig {
    pub fn method(&self) -> Result<Method> {
        let mut m = Method::from_name(&self.name)?;
        if let Method::Mtl(spec) = &mut m {
            if let Some(p) = &self.pacing {
                spec.pacing = p.clone();
            }
            if let Some(rule) = self.tau_rule {
                spec.tau_rule = rule;
            }
        } else if let Some(p) = &self.pacing {
            m.set_gamma(p.gamma);
        }
        if let Some(g) = self.gamma {
            m.set_gamma(g);
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub jobs: Option<usize>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitConfig,
    pub cv: Option<CvConfig>,
    #[serde(default)]
    pub algorithms: Vec<AlgorithmConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    /// Parses a config file; a relative CSV path is resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        if let DatasetConfig::Csv { path: data, .. } = &mut cfg.dataset {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        Ok(cfg)
    }

    pub fn n_repeats(&self) -> usize {
        self.split.n_repeats.unwrap_or(10)
    }

    fn split_spec(&self) -> Result<SplitSpec> {
        let train = match (self.split.train_fraction, self.split.train_count) {
            (Some(_), Some(_)) => return Err(Error::Config("set only one of split.train_fraction and split.train_count".into())),
            (Some(f), None) => TrainSize::Fraction(f),
            (None, Some(c)) => TrainSize::Count(c),
            (None, None) => match self.dataset.syn_config(self.seed, 0) {
                Some(syn) => TrainSize::Count(syn.n_per_task),
                None => return Err(Error::Config("csv datasets need split.train_fraction or split.train_count".into())),
            },
        };
        Ok(SplitSpec {
            train,
            stratified: self.split.stratified,
            n_repeats: self.n_repeats(),
            seed: self.seed,
        })
    }

    /// Every problem found, as human-readable lines; empty when valid.
    pub fn findings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.algorithms.is_empty() {
            out.push("no algorithms listed".to_string());
        }
        for a in &self.algorithms {
            match a.method() {
                Err(e) => out.push(format!("algorithm '{}': {e}", a.name)),
                Ok(m) => {
                    if let Method::Mtl(spec) = &m {
                        out.extend(spec.pacing.violations().into_iter().map(|v| format!("algorithm '{}': {v}", a.name)));
                        if spec.variant == Variant::Mtaso && spec.pacing.h.is_none() {
                            out.push(format!("algorithm '{}': subspace dimension pacing.h is required", a.name));
                        }
                    } else if !(m.gamma() > 0.0) {
                        out.push(format!("algorithm '{}': gamma = {} must be positive", a.name, m.gamma()));
                    }
                }
            }
        }
        if let Err(e) = self.split_spec() {
            out.push(e.to_string());
        }
        if self.n_repeats() == 0 {
            out.push("split.n_repeats must be at least 1".into());
        }
        if let Some(f) = self.split.train_fraction {
            if !(f > 0.0 && f < 1.0) {
                out.push(format!("split.train_fraction = {f} must lie in (0, 1)"));
            }
        }
        if let Some(cv) = &self.cv {
            if cv.k < 2 {
                out.push(format!("cv.k = {} must be at least 2", cv.k));
            }
            for axis in &cv.grid {
                if axis.values.is_empty() {
                    out.push(format!("cv grid for {:?} has no values", axis.param));
                }
            }
        }
        match &self.dataset {
            DatasetConfig::Csv { path, .. } => {
                if !path.is_file() {
                    out.push(format!("dataset file not found: {}", path.display()));
                }
            }
            DatasetConfig::Syn2(o) => {
                let cfg = o.apply(SynConfig::syn2(0));
                if cfg.d != cfg.n_tasks {
                    out.push(format!("syn2 needs d = n_tasks (got d = {}, n_tasks = {})", cfg.d, cfg.n_tasks));
                }
            }
            DatasetConfig::Syn1(_) => {}
        }
        out
    }
}

/// Outcome of one algorithm on one repeat.
#[derive(Clone, Debug)]
struct AlgorithmRun {
    per_task: Vec<f64>,
    tau_history: Vec<TauRecord>,
    lambda_schedule: Vec<f64>,
    iterations: Option<usize>,
    converged: Option<bool>,
    selected: Vec<(HyperParam, f64)>,
}

struct RepeatOutcome {
    task_ids: Vec<usize>,
    metric: Metric,
    runs: Vec<AlgorithmRun>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PValue {
    pub baseline: String,
    /// Two-sided paired t-test on run-level means; `None` when the baseline
    /// was not run or fewer than two repeats exist.
    pub p_value: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlgorithmResult {
    pub name: String,
    #[serde(flatten)]
    pub summary: RunSummary,
    pub task_ids: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vs_baseline: Option<PValue>,
    /// λ values actually used, one list per run; self-paced methods only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_schedules: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<Vec<bool>>,
    /// Hyperparameters chosen by cross-validation, one map per run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected: Option<Vec<std::collections::BTreeMap<String, f64>>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResults {
    pub dataset: String,
    pub seed: u64,
    pub n_repeats: usize,
    pub metric: Metric,
    pub algorithms: Vec<AlgorithmResult>,
}

fn load_data(cfg: &RunConfig, repeat: usize, cached: Option<&MultitaskDataset>) -> Result<MultitaskDataset> {
    if let Some(d) = cached {
        return Ok(d.clone());
    }
    match &cfg.dataset {
        DatasetConfig::Syn1(_) => Ok(generate_syn1(&cfg.dataset.syn_config(cfg.seed, repeat).expect("syn"))?.data),
        DatasetConfig::Syn2(_) => Ok(generate_syn2(&cfg.dataset.syn_config(cfg.seed, repeat).expect("syn"))?.data),
        DatasetConfig::Csv { path, schema } => load_csv_dataset(path, schema),
    }
}

fn run_repeat(cfg: &RunConfig, methods: &[Method], split: &SplitSpec, repeat: usize, cached: Option<&MultitaskDataset>) -> Result<RepeatOutcome> {
    let data = load_data(cfg, repeat, cached)?;
    let metric = metric_for(&data)?;
    let (train, test) = split_once(&data, split, repeat)?;
    let r = repeat as u64;
    let mut runs = Vec::with_capacity(methods.len());
    for (i, base) in methods.iter().enumerate() {
        let mut method = base.clone();
        if let Method::Mtl(spec) = &mut method {
            spec.seed = seed_for(cfg.seed, r, Purpose::Init);
        }
        let mut selected = Vec::new();
        if let Some(cv) = &cfg.cv {
            let cv_seed = seed_for(cfg.seed, (r << 16) | i as u64, Purpose::CrossValidation);
            let out = cross_validate(&train, &method, &cv.grid, cv.k, cv_seed)?;
            method = out.best;
            selected = out.best_point;
        }
        let fit = method.fit(&train)?;
        let per_task = evaluate(&fit.model, &test, metric)?;
        let (tau_history, lambda_schedule, iterations, converged) = match fit.report {
            Some(rep) if method.is_self_paced() => {
                let sched = rep.lambda_schedule();
                (rep.tau_history, sched, Some(rep.iterations_run), Some(rep.converged))
            }
            Some(rep) => (Vec::new(), Vec::new(), Some(rep.iterations_run), Some(rep.converged)),
            None => (Vec::new(), Vec::new(), None, None),
        };
        runs.push(AlgorithmRun {
            per_task,
            tau_history,
            lambda_schedule,
            iterations,
            converged,
            selected,
        });
    }
    Ok(RepeatOutcome {
        task_ids: test.tasks().iter().map(|t| t.task_id()).collect(),
        metric,
        runs,
    })
}

/// Formats a float with 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn param_name(p: HyperParam) -> String {
    serde_json::to_value(p)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_else(|| format!("{p:?}"))
}

fn tau_csv(repeats: &[RepeatOutcome], algo: usize) -> String {
    let mut s = String::from("run,iteration,lambda,task_id,tau,score\n");
    for (run, rep) in repeats.iter().enumerate() {
        for rec in &rep.runs[algo].tau_history {
            let lambda = rec.lambda.map(fmt_float).unwrap_or_default();
            for (t, (tau, score)) in rec.tau.iter().zip(&rec.scores).enumerate() {
                let _ = writeln!(
                    s,
                    "{run},{},{lambda},{},{},{}",
                    rec.iteration,
                    rep.task_ids[t],
                    fmt_float(*tau),
                    fmt_float(*score)
                );
            }
        }
    }
    s
}

fn errors_csv(repeats: &[RepeatOutcome], names: &[String]) -> String {
    let mut s = String::from("run,task_id,algorithm,metric_value\n");
    for (run, rep) in repeats.iter().enumerate() {
        for (a, name) in names.iter().enumerate() {
            for (t, v) in rep.runs[a].per_task.iter().enumerate() {
                let _ = writeln!(s, "{run},{},{name},{}", rep.task_ids[t], fmt_float(*v));
            }
        }
    }
    s
}

/// Runs the experiment and writes its outputs into `cfg.output_dir`.
pub fn run(cfg: &RunConfig) -> Result<RunResults> {
    let findings = cfg.findings();
    if !findings.is_empty() {
        return Err(Error::Config(findings.join("; ")));
    }
    let methods: Vec<Method> = cfg.algorithms.iter().map(AlgorithmConfig::method).collect::<Result<_>>()?;
    let names: Vec<String> = methods.iter().map(Method::name).collect();
    let split = cfg.split_spec()?;
    let n = cfg.n_repeats();

    let cached = match &cfg.dataset {
        DatasetConfig::Csv { path, schema } => Some(load_csv_dataset(path, schema)?),
        _ => None,
    };
    let repeats: Vec<RepeatOutcome> = par::with_jobs(cfg.jobs, || {
        par::try_map_range(n, |r| run_repeat(cfg, &methods, &split, r, cached.as_ref()))
    })?;

    let metric = repeats[0].metric;
    let task_ids = repeats[0].task_ids.clone();
    let mut algorithms = Vec::with_capacity(methods.len());
    for (a, method) in methods.iter().enumerate() {
        let per_run: Vec<Vec<f64>> = repeats.iter().map(|r| r.runs[a].per_task.clone()).collect();
        let summary = aggregate_runs(&per_run, metric)?;
        let sp = method.is_self_paced();
        let vs_baseline = method.baseline().map(|b| {
            let bname = b.name();
            let p_value = names.iter().position(|n| *n == bname).and_then(|bi| {
                let base: Vec<f64> = repeats.iter().map(|r| crate::eval::finite_mean(&r.runs[bi].per_task)).collect();
                paired_t_test(&summary.run_means, &base).ok()
            });
            PValue { baseline: bname, p_value }
        });
        let has_report = repeats[0].runs[a].iterations.is_some();
        algorithms.push(AlgorithmResult {
            name: names[a].clone(),
            summary,
            task_ids: task_ids.clone(),
            vs_baseline,
            lambda_schedules: sp.then(|| repeats.iter().map(|r| r.runs[a].lambda_schedule.clone()).collect()),
            iterations: has_report.then(|| repeats.iter().filter_map(|r| r.runs[a].iterations).collect()),
            converged: has_report.then(|| repeats.iter().filter_map(|r| r.runs[a].converged).collect()),
            selected: cfg.cv.as_ref().map(|_| {
                repeats
                    .iter()
                    .map(|r| r.runs[a].selected.iter().map(|&(p, v)| (param_name(p), v)).collect())
                    .collect()
            }),
        });
    }
    let results = RunResults {
        dataset: cfg.dataset.label().to_string(),
        seed: cfg.seed,
        n_repeats: n,
        metric,
        algorithms,
    };

    fs::create_dir_all(&cfg.output_dir)?;
    let out = &cfg.output_dir;
    let json = serde_json::to_string_pretty(&results).map_err(|e| Error::Invalid(e.to_string()))?;
    fs::write(out.join("results.json"), json + "\n")?;
    fs::write(out.join("per_task_errors.csv"), errors_csv(&repeats, &names))?;
    let sp_indices: Vec<usize> = methods.iter().enumerate().filter(|(_, m)| m.is_self_paced()).map(|(i, _)| i).collect();
    match sp_indices.first() {
        Some(&first) => fs::write(out.join("tau_trajectory.csv"), tau_csv(&repeats, first))?,
        None => fs::write(out.join("tau_trajectory.csv"), "run,iteration,lambda,task_id,tau,score\n")?,
    }
    if sp_indices.len() > 1 {
        for &i in &sp_indices {
            fs::write(out.join(format!("tau_trajectory_{}.csv", names[i])), tau_csv(&repeats, i))?;
        }
    }
    Ok(results)
}

/// Generated syn1/syn2 data for `gen`.
pub fn generate(which: &str, seed: u64) -> Result<MultitaskDataset> {
    match which {
        "syn1" => Ok(generate_syn1(&SynConfig::syn1(seed))?.data),
        "syn2" => Ok(generate_syn2(&SynConfig::syn2(seed))?.data),
        other => Err(Error::invalid(format!("unknown generator '{other}' (expected syn1 or syn2)"))),
    }
}
