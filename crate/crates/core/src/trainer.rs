//! The alternating minimization loop and the baselines.
//!
//! One outer iteration of the self-paced loop:
//!
//! 1. solve every task against the previous shared knowledge Θ^(k−1);
//! 2. score each task (loss + penalty against Θ^(k−1)) and update τ;
//! 3. update Θ from the new task vectors weighted by τ;
//! 4. grow the threshold λ ← cλ.
//!
//! It stops when `‖τ^(k) − τ^(k−1)‖² ≤ ε` (with τ^(0) uniform) or after
//! `max_outer_iters`. The plain MTL baselines run the same loop with τ
//! pinned to ones and stop on parameter stability instead.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{self, anchored_penalty};
use crate::model::{
    max_abs, task_average_loss, DescentRecord, Lambda0, ModelParams, MultitaskDataset, PacingConfig,
    SharedKnowledge, TaskDataset, TaskWeights, TauMode, TauRecord, TrainReport,
};
use crate::pacing::{self, PacingState};
use crate::par;
use crate::solvers::{solve_task, AnchoredPenalty};

/// Which shared-knowledge model to learn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mmtl,
    Mtfl,
    Mtaso,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlgorithmSpec {
    pub variant: Variant,
    pub self_paced: bool,
    pub tau_rule: TauMode,
    pub pacing: PacingConfig,
    /// Initial shared knowledge; a neutral default is used when absent.
    pub theta0: Option<SharedKnowledge>,
    /// Seeds the random initial subspace.
    pub seed: u64,
}

impl AlgorithmSpec {
    pub fn new(variant: Variant, self_paced: bool) -> Self {
        Self {
            variant,
            self_paced,
            tau_rule: TauMode::Entropy,
            pacing: PacingConfig::default(),
            theta0: None,
            seed: 0,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let mut problems = self.pacing.violations();
        if self.variant == Variant::Mtaso {
            match self.pacing.h {
                None => problems.push("MTASO requires the subspace dimension h".into()),
                Some(h) if h == 0 || h > dim => {
                    problems.push(format!("subspace dimension h = {h} must lie in 1..={dim}"))
                }
                _ => {}
            }
        }
        if let Some(theta) = &self.theta0 {
            let matches = matches!(
                (self.variant, theta),
                (Variant::Mmtl, SharedKnowledge::MeanVector { .. })
                    | (Variant::Mtfl, SharedKnowledge::FeatureMatrix { .. })
                    | (Variant::Mtaso, SharedKnowledge::Subspace { .. })
            );
            if !matches {
                problems.push("initial shared knowledge does not match the variant".into());
            } else if theta.dim() != dim {
                problems.push(format!("initial shared knowledge has dimension {}, data has {dim}", theta.dim()));
            } else if let Err(e) = theta.validate() {
                problems.push(e.to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(problems.join("; ")))
        }
    }

    /// Θ^(0): zero mean, isotropic `I/d`, or a seeded random subspace.
    pub fn initial_theta(&self, dim: usize) -> Result<SharedKnowledge> {
        if let Some(t) = &self.theta0 {
            return Ok(t.clone());
        }
        Ok(match self.variant {
            Variant::Mmtl => SharedKnowledge::MeanVector {
                w0: DVector::zeros(dim),
            },
            Variant::Mtfl => SharedKnowledge::FeatureMatrix {
                d: DMatrix::identity(dim, dim) / dim as f64,
            },
            Variant::Mtaso => {
                let h = self.pacing.h.ok_or_else(|| Error::invalid("MTASO requires h"))?;
                SharedKnowledge::Subspace {
                    u: knowledge::random_subspace(dim, h, self.seed)?,
                }
            }
        })
    }

    fn update_theta(&self, w: &ModelParams, tau: &TaskWeights) -> Result<SharedKnowledge> {
        match self.variant {
            Variant::Mmtl => knowledge::update_mean(w, tau),
            Variant::Mtfl => knowledge::update_feature_matrix(w, tau, self.pacing.feature_eps),
            Variant::Mtaso => {
                knowledge::update_subspace(w, tau, self.pacing.h.ok_or_else(|| Error::invalid("MTASO requires h"))?)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumResult {
    /// Task positions in the order they were learned.
    pub order: Vec<usize>,
    pub params: ModelParams,
}

enum TauPolicy<'a> {
    SelfPaced(TauMode),
    Fixed(&'a [f64]),
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum StopRule {
    TauConvergence,
    ParameterStability,
}

struct TaskTerms {
    losses: Vec<f64>,
    penalties: Vec<f64>,
}

impl TaskTerms {
    fn compute(data: &MultitaskDataset, w: &ModelParams, penalty: &AnchoredPenalty) -> Result<Self> {
        let pairs = par::try_map_range(data.n_tasks(), |t| {
            let col = w.column(t);
            Ok::<_, Error>((task_average_loss(&data.tasks()[t], &col)?, penalty.value(&col)))
        })?;
        let (losses, penalties) = pairs.into_iter().unzip();
        Ok(Self { losses, penalties })
    }

    fn scores(&self) -> Vec<f64> {
        self.losses.iter().zip(&self.penalties).map(|(l, p)| l + p).collect()
    }
}

/// `λ r(τ)`: `−λ‖τ‖₁` for the hard rule, `λ Σ τ log τ` for the entropy rule.
fn pacing_term(tau: &[f64], lambda: f64, rule: TauMode) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    match rule {
        TauMode::Hard => -lambda * tau.iter().sum::<f64>(),
        TauMode::Entropy => lambda * tau.iter().filter(|&&t| t > 0.0).map(|&t| t * t.ln()).sum::<f64>(),
    }
}

fn objective_from_scores(scores: &[f64], tau: &[f64], lambda: f64, rule: TauMode) -> f64 {
    scores.iter().zip(tau).map(|(s, t)| s * t).sum::<f64>() + pacing_term(tau, lambda, rule)
}

/// `Σ_t τ_t [L_t(w_t) + P_γ(w_t, Θ)] + λ r(τ)`.
#[allow(clippy::too_many_arguments)]
pub fn objective_value(
    data: &MultitaskDataset,
    w: &ModelParams,
    tau: &TaskWeights,
    theta: &SharedKnowledge,
    gamma: f64,
    feature_eps: f64,
    lambda: f64,
    rule: TauMode,
) -> Result<f64> {
    if w.n_tasks() != data.n_tasks() {
        return Err(Error::dim("objective task count", data.n_tasks(), w.n_tasks()));
    }
    if tau.len() != data.n_tasks() {
        return Err(Error::dim("objective task weights", data.n_tasks(), tau.len()));
    }
    if w.dim() != data.dim() || theta.dim() != data.dim() {
        return Err(Error::dim("objective feature dimension", data.dim(), w.dim().max(theta.dim())));
    }
    let terms = TaskTerms::compute(data, w, &anchored_penalty(theta, gamma, feature_eps))?;
    Ok(objective_from_scores(&terms.scores(), &tau.tau, lambda, rule))
}

fn solve_all(data: &MultitaskDataset, penalty: &AnchoredPenalty) -> Result<ModelParams> {
    let cols = par::try_map_range(data.n_tasks(), |t| solve_task(&data.tasks()[t], penalty))?;
    ModelParams::from_columns(&cols)
}

fn resolve_lambda0(rule: Lambda0, scores: &[f64]) -> f64 {
    match rule {
        Lambda0::Fixed(v) => v,
        Lambda0::MedianScaled(s) => s * pacing::median(scores).max(1e-12),
    }
}

fn alternate(
    data: &MultitaskDataset,
    spec: &AlgorithmSpec,
    policy: TauPolicy<'_>,
    stop: StopRule,
) -> Result<TrainReport> {
    spec.validate(data.dim())?;
    let n_tasks = data.n_tasks();
    if let TauPolicy::Fixed(t) = policy {
        if t.len() != n_tasks {
            return Err(Error::dim("fixed task weights", n_tasks, t.len()));
        }
    }
    let cfg = &spec.pacing;
    let rule = match policy {
        TauPolicy::SelfPaced(r) => r,
        TauPolicy::Fixed(_) => TauMode::Hard,
    };
    let scheduled = stop == StopRule::TauConvergence;

    let mut theta = spec.initial_theta(data.dim())?;
    let mut tau_prev = TaskWeights::uniform(n_tasks).tau;
    let mut w_prev: Option<ModelParams> = None;
    let mut state: Option<PacingState> = None;

    let mut tau_history = Vec::new();
    let mut objective_history = Vec::new();
    let mut descent = Vec::new();
    let mut converged = false;
    let mut iterations_run = 0;

    for k in 1..=cfg.max_outer_iters {
        let penalty = anchored_penalty(&theta, cfg.gamma, cfg.feature_eps);
        let w = solve_all(data, &penalty)?;
        let terms = TaskTerms::compute(data, &w, &penalty)?;
        let scores = terms.scores();

        let st = *state.get_or_insert_with(|| PacingState::start(resolve_lambda0(cfg.lambda0, &scores)));
        let lambda = if scheduled { st.lambda.min(cfg.lambda_max) } else { 0.0 };

        let before_w = match &w_prev {
            Some(wp) => {
                let prev_terms = TaskTerms::compute(data, wp, &penalty)?;
                Some(objective_from_scores(&prev_terms.scores(), &tau_prev, lambda, rule))
            }
            None => None,
        };
        let after_w = objective_from_scores(&scores, &tau_prev, lambda, rule);

        let tau = match policy {
            TauPolicy::SelfPaced(TauMode::Hard) => pacing::update_tau_hard(&scores, lambda, cfg.delta),
            TauPolicy::SelfPaced(TauMode::Entropy) => pacing::update_tau_entropy(&scores, lambda),
            TauPolicy::Fixed(t) => TaskWeights {
                tau: t.to_vec(),
                mode: TauMode::Hard,
            },
        };
        let after_tau = objective_from_scores(&scores, &tau.tau, lambda, rule);

        let theta_new = spec.update_theta(&w, &tau)?;
        let new_penalty = anchored_penalty(&theta_new, cfg.gamma, cfg.feature_eps);
        let theta_pen: Vec<f64> = (0..n_tasks).map(|t| new_penalty.value(&w.column(t))).collect();
        let after_theta_scores: Vec<f64> = terms.losses.iter().zip(&theta_pen).map(|(l, p)| l + p).collect();
        let after_theta = objective_from_scores(&after_theta_scores, &tau.tau, lambda, rule);

        descent.push(DescentRecord {
            iteration: k,
            before_w,
            after_w,
            after_tau,
            after_theta,
        });
        objective_history.push(after_theta);
        tau_history.push(TauRecord {
            iteration: k,
            lambda: scheduled.then_some(lambda),
            tau: tau.tau.clone(),
            scores,
        });
        iterations_run = k;

        let done = match stop {
            StopRule::TauConvergence => pacing::has_converged(&tau, &tau_prev, cfg.epsilon)?,
            StopRule::ParameterStability => match &w_prev {
                Some(wp) => {
                    max_abs(w.w.as_slice(), wp.w.as_slice()) < cfg.epsilon
                        && theta_new.max_abs_diff(&theta) < cfg.epsilon
                }
                None => false,
            },
        };

        theta = theta_new;
        tau_prev = tau.tau;
        w_prev = Some(w);
        state = Some(pacing::advance_lambda(st, cfg.c));
        if done {
            converged = true;
            break;
        }
    }

    Ok(TrainReport {
        params: w_prev.expect("at least one outer iteration"),
        theta,
        tau_history,
        objective_history,
        descent,
        iterations_run,
        converged,
    })
}

/// Self-paced multitask learning.
pub fn fit_self_paced(data: &MultitaskDataset, spec: &AlgorithmSpec) -> Result<TrainReport> {
    if !spec.self_paced {
        return Err(Error::invalid("fit_self_paced needs a self-paced spec"));
    }
    alternate(data, spec, TauPolicy::SelfPaced(spec.tau_rule), StopRule::TauConvergence)
}

/// The self-paced loop with its τ-step replaced by a fixed vector; the λ
/// schedule and stopping test are unchanged.
pub fn fit_self_paced_fixed_tau(
    data: &MultitaskDataset,
    spec: &AlgorithmSpec,
    tau: &[f64],
) -> Result<TrainReport> {
    alternate(data, spec, TauPolicy::Fixed(tau), StopRule::TauConvergence)
}

/// Plain multitask learning: τ ≡ 1, stop once W and Θ move by less than ε.
pub fn fit_baseline_mtl(data: &MultitaskDataset, spec: &AlgorithmSpec) -> Result<TrainReport> {
    if spec.self_paced {
        return Err(Error::invalid("fit_baseline_mtl needs a non-self-paced spec"));
    }
    let ones = vec![1.0; data.n_tasks()];
    alternate(data, spec, TauPolicy::Fixed(&ones), StopRule::ParameterStability)
}

/// Independent ridge (or ridge-logistic) models, one per task.
pub fn fit_itl(data: &MultitaskDataset, gamma: f64) -> Result<ModelParams> {
    let p = AnchoredPenalty::ridge(data.dim(), gamma);
    solve_all(data, &p)
}

/// One model over the pooled rows of every task.
pub fn fit_stl(data: &MultitaskDataset, gamma: f64) -> Result<DVector<f64>> {
    let kind = data
        .common_kind()
        .ok_or_else(|| Error::invalid("STL needs every task to be of the same kind"))?;
    let n: usize = data.tasks().iter().map(TaskDataset::n_examples).sum();
    let d = data.dim();
    let mut x = DMatrix::zeros(n, d);
    let mut y = DVector::zeros(n);
    let mut row = 0;
    for t in data.tasks() {
        let m = t.n_examples();
        x.rows_mut(row, m).copy_from(t.x());
        y.rows_mut(row, m).copy_from(t.y());
        row += m;
    }
    let pooled = TaskDataset::new(0, x, y, kind)?;
    solve_task(&pooled, &AnchoredPenalty::ridge(d, gamma))
}

/// Greedy sequential curriculum: each step learns every remaining task
/// anchored to the previously learned task and commits the one with the
/// lowest regularized objective. Ties go to the lower task id.
pub fn fit_curriculum(data: &MultitaskDataset, gamma: f64) -> Result<CurriculumResult> {
    let n_tasks = data.n_tasks();
    let mut remaining: Vec<usize> = (0..n_tasks).collect();
    let mut order = Vec::with_capacity(n_tasks);
    let mut cols: Vec<Option<DVector<f64>>> = vec![None; n_tasks];
    let mut anchor = DVector::zeros(data.dim());

    while !remaining.is_empty() {
        let penalty = AnchoredPenalty::toward(anchor.clone(), gamma);
        let candidates = par::try_map(&remaining, |&t| {
            let task = &data.tasks()[t];
            let w = solve_task(task, &penalty)?;
            let value = task_average_loss(task, &w)? + penalty.value(&w);
            Ok::<_, Error>((t, value, w))
        })?;
        let (pos, _) = candidates
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                a.1.total_cmp(&b.1)
                    .then(data.tasks()[a.0].task_id().cmp(&data.tasks()[b.0].task_id()))
            })
            .expect("non-empty candidate list");
        let (t, _, w) = candidates.into_iter().nth(pos).expect("index in range");
        remaining.retain(|&r| r != t);
        order.push(t);
        anchor = w.clone();
        cols[t] = Some(w);
    }

    let cols: Vec<DVector<f64>> = cols.into_iter().map(|c| c.expect("every task learned")).collect();
    Ok(CurriculumResult {
        order,
        params: ModelParams::from_columns(&cols)?,
    })
}

/// Linear predictions `Xw` (raw margins for classification).
pub fn predict(w: &DVector<f64>, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.ncols() != w.len() {
        return Err(Error::dim("predict", w.len(), x.ncols()));
    }
    Ok(x * w)
}

/// Any of the learners, with its hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    Stl { gamma: f64 },
    Itl { gamma: f64 },
    Curriculum { gamma: f64 },
    Mtl(AlgorithmSpec),
}

/// A trained model: one pooled vector or one vector per task.
#[derive(Clone, Debug)]
pub enum FittedModel {
    Pooled(DVector<f64>),
    PerTask(ModelParams),
}

impl FittedModel {
    pub fn weights_for(&self, task: usize) -> DVector<f64> {
        match self {
            FittedModel::Pooled(w) => w.clone(),
            FittedModel::PerTask(p) => p.column(task),
        }
    }

    /// Predictions for every task of `data`; task positions must match the
    /// training data.
    pub fn predict_all(&self, data: &MultitaskDataset) -> Result<Vec<DVector<f64>>> {
        if let FittedModel::PerTask(p) = self {
            if p.n_tasks() != data.n_tasks() {
                return Err(Error::dim("predict task count", p.n_tasks(), data.n_tasks()));
            }
        }
        data.tasks()
            .iter()
            .enumerate()
            .map(|(t, task)| predict(&self.weights_for(t), task.x()))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Fit {
    pub model: FittedModel,
    pub report: Option<TrainReport>,
    pub curriculum_order: Option<Vec<usize>>,
}

impl Method {
    /// Parses the conventional names: STL, ITL, CL, MMTL, spMMTL, MTFL,
    /// spMTFL, MTASO, spMTASO (case-insensitive).
    pub fn from_name(name: &str) -> Result<Self> {
        let lower = name.to_ascii_lowercase();
        let (sp, base) = match lower.strip_prefix("sp") {
            Some(rest) if !rest.is_empty() && rest != "l" => (true, rest),
            _ => (false, lower.as_str()),
        };
        let variant = match base {
            "stl" if !sp => return Ok(Method::Stl { gamma: 1.0 }),
            "itl" if !sp => return Ok(Method::Itl { gamma: 1.0 }),
            "cl" if !sp => return Ok(Method::Curriculum { gamma: 1.0 }),
            "mmtl" => Variant::Mmtl,
            "mtfl" => Variant::Mtfl,
            "mtaso" => Variant::Mtaso,
            _ => return Err(Error::invalid(format!("unknown algorithm '{name}'"))),
        };
        Ok(Method::Mtl(AlgorithmSpec::new(variant, sp)))
    }

    pub fn name(&self) -> String {
        match self {
            Method::Stl { .. } => "STL".into(),
            Method::Itl { .. } => "ITL".into(),
            Method::Curriculum { .. } => "CL".into(),
            Method::Mtl(s) => {
                let base = match s.variant {
                    Variant::Mmtl => "MMTL",
                    Variant::Mtfl => "MTFL",
                    Variant::Mtaso => "MTASO",
                };
                if s.self_paced {
                    format!("sp{base}")
                } else {
                    base.into()
                }
            }
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            Method::Stl { gamma } | Method::Itl { gamma } | Method::Curriculum { gamma } => *gamma,
            Method::Mtl(s) => s.pacing.gamma,
        }
    }

    pub fn set_gamma(&mut self, value: f64) {
        match self {
            Method::Stl { gamma } | Method::Itl { gamma } | Method::Curriculum { gamma } => *gamma = value,
            Method::Mtl(s) => s.pacing.gamma = value,
        }
    }

    pub fn is_self_paced(&self) -> bool {
        matches!(self, Method::Mtl(s) if s.self_paced)
    }

    /// The non-self-paced counterpart of a self-paced method.
    pub fn baseline(&self) -> Option<Method> {
        match self {
            Method::Mtl(s) if s.self_paced => {
                let mut b = s.clone();
                b.self_paced = false;
                Some(Method::Mtl(b))
            }
            _ => None,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Method::Mtl(s) => s.validate(dim),
            other if !(other.gamma() > 0.0) => Err(Error::invalid(format!("gamma = {} must be positive", other.gamma()))),
            _ => Ok(()),
        }
    }

    pub fn fit(&self, data: &MultitaskDataset) -> Result<Fit> {
        self.validate(data.dim())?;
        Ok(match self {
            Method::Stl { gamma } => Fit {
                model: FittedModel::Pooled(fit_stl(data, *gamma)?),
                report: None,
                curriculum_order: None,
            },
            Method::Itl { gamma } => Fit {
                model: FittedModel::PerTask(fit_itl(data, *gamma)?),
                report: None,
                curriculum_order: None,
            },
            Method::Curriculum { gamma } => {
                let r = fit_curriculum(data, *gamma)?;
                Fit {
                    model: FittedModel::PerTask(r.params),
                    report: None,
                    curriculum_order: Some(r.order),
                }
            }
            Method::Mtl(spec) => {
                let report = if spec.self_paced {
                    fit_self_paced(data, spec)?
                } else {
                    fit_baseline_mtl(data, spec)?
                };
                Fit {
                    model: FittedModel::PerTask(report.params.clone()),
                    report: Some(report),
                    curriculum_order: None,
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TaskKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_task(rng: &mut ChaCha8Rng, id: usize, n: usize, d: usize, noise: f64) -> TaskDataset {
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let w = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let y = &x * &w + DVector::from_fn(n, |_, _| noise * rng.random_range(-1.0..1.0));
        TaskDataset::new(id, x, y, TaskKind::Regression).unwrap()
    }

    fn random_data(seed: u64, t: usize, n: usize, d: usize) -> MultitaskDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MultitaskDataset::new((0..t).map(|i| random_task(&mut rng, i, n, d, 0.1 * (i + 1) as f64)).collect()).unwrap()
    }

    fn spec(variant: Variant, sp: bool) -> AlgorithmSpec {
        let mut s = AlgorithmSpec::new(variant, sp);
        s.pacing.gamma = 0.1;
        s.pacing.h = Some(2);
        s
    }

    #[test]
    fn huge_lambda_hard_rule_reduces_to_baseline() {
        let data = random_data(1, 4, 8, 3);
        for variant in [Variant::Mmtl, Variant::Mtfl, Variant::Mtaso] {
            let mut sp = spec(variant, true);
            sp.tau_rule = TauMode::Hard;
            sp.pacing.lambda0 = Lambda0::Fixed(1e12);
            let r = fit_self_paced(&data, &sp).unwrap();
            assert!(r.tau_history[0].tau.iter().all(|&t| t == 1.0));
            assert!(r.converged);
            let mut base = spec(variant, false);
            base.pacing.max_outer_iters = r.iterations_run;
            base.pacing.epsilon = 0.0;
            let b = fit_baseline_mtl(&data, &base).unwrap();
            assert_eq!(b.iterations_run, r.iterations_run);
            assert_eq!(r.params, b.params);
            assert_eq!(r.theta.max_abs_diff(&b.theta), 0.0);
        }
    }

    #[test]
    fn identical_tasks_keep_uniform_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = random_task(&mut rng, 0, 10, 3, 0.2);
        let tasks = (0..4)
            .map(|i| TaskDataset::new(i, base.x().clone(), base.y().clone(), TaskKind::Regression).unwrap())
            .collect();
        let data = MultitaskDataset::new(tasks).unwrap();
        let r = fit_self_paced(&data, &spec(Variant::Mtfl, true)).unwrap();
        for rec in &r.tau_history {
            assert!(rec.tau.iter().all(|&t| (t - 0.25).abs() < 1e-12));
        }
    }

    #[test]
    fn report_invariants_and_descent() {
        let data = random_data(7, 5, 12, 4);
        for variant in [Variant::Mmtl, Variant::Mtfl, Variant::Mtaso] {
            let r = fit_self_paced(&data, &spec(variant, true)).unwrap();
            assert_eq!(r.tau_history.len(), r.iterations_run);
            assert_eq!(r.objective_history.len(), r.iterations_run);
            let lambdas = r.lambda_schedule();
            for w in lambdas.windows(2) {
                assert!((w[1] / w[0] - 1.1).abs() < 1e-12);
            }
            for d in &r.descent {
                if let Some(b) = d.before_w {
                    assert!(d.after_w <= b + 1e-9, "{variant:?} w-step {d:?}");
                }
                assert!(d.after_tau <= d.after_w + 1e-9, "{variant:?} τ-step {d:?}");
                assert!(d.after_theta <= d.after_tau + 1e-9, "{variant:?} Θ-step {d:?}");
            }
        }
    }

    #[test]
    fn single_task_mmtl_fixed_point() {
        let data = random_data(2, 1, 6, 3);
        let mut s = spec(Variant::Mmtl, false);
        s.pacing.max_outer_iters = 500;
        s.pacing.epsilon = 1e-12;
        let r = fit_baseline_mtl(&data, &s).unwrap();
        let SharedKnowledge::MeanVector { w0 } = &r.theta else { unreachable!() };
        assert!((w0 - r.params.column(0)).amax() < 1e-9);
        // and w1 is the fixed point of the w0-anchored solve
        let again = solve_task(&data.tasks()[0], &AnchoredPenalty::toward(w0.clone(), s.pacing.gamma)).unwrap();
        assert!((again - r.params.column(0)).amax() < 1e-9);
    }

    #[test]
    fn mtfl_orthonormal_tasks_give_isotropic_d() {
        // task t observes only feature t with the same signal: symmetric problem
        let d = 3;
        let tasks = (0..d)
            .map(|t| {
                let x = DMatrix::from_fn(4, d, |i, j| if j == t { (i + 1) as f64 } else { 0.0 });
                let y = DVector::from_fn(4, |i, _| 2.0 * (i + 1) as f64);
                TaskDataset::new(t, x, y, TaskKind::Regression).unwrap()
            })
            .collect();
        let data = MultitaskDataset::new(tasks).unwrap();
        let r = fit_baseline_mtl(&data, &spec(Variant::Mtfl, false)).unwrap();
        let SharedKnowledge::FeatureMatrix { d: dm } = &r.theta else { unreachable!() };
        assert!((dm - DMatrix::identity(d, d) / d as f64).amax() < 1e-9);
    }

    #[test]
    fn itl_and_stl_basics() {
        let data = random_data(4, 1, 10, 3);
        let itl = fit_itl(&data, 0.5).unwrap();
        let stl = fit_stl(&data, 0.5).unwrap();
        assert!((itl.column(0) - &stl).amax() < 1e-12);

        let t = &random_data(5, 1, 10, 3).tasks()[0].clone();
        let twins = MultitaskDataset::new(vec![
            TaskDataset::new(0, t.x().clone(), t.y().clone(), TaskKind::Regression).unwrap(),
            TaskDataset::new(1, t.x().clone(), t.y().clone(), TaskKind::Regression).unwrap(),
        ])
        .unwrap();
        let itl = fit_itl(&twins, 0.2).unwrap();
        assert_eq!(itl.column(0), itl.column(1));
        let single = MultitaskDataset::new(vec![twins.tasks()[0].clone()]).unwrap();
        let pooled = fit_stl(&twins, 0.2).unwrap();
        assert!((pooled - fit_stl(&single, 0.2).unwrap()).amax() < 1e-10);
    }

    #[test]
    fn stl_rejects_mixed_kinds() {
        let reg = TaskDataset::new(0, DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, 2.0]), TaskKind::Regression).unwrap();
        let cls = TaskDataset::new(
            1,
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, -1.0]),
            TaskKind::BinaryClassification,
        )
        .unwrap();
        let data = MultitaskDataset::new(vec![reg, cls]).unwrap();
        assert!(fit_stl(&data, 1.0).is_err());
    }

    #[test]
    fn curriculum_identical_tasks_in_id_order() {
        let t = random_data(6, 1, 8, 2).tasks()[0].clone();
        let tasks = (0..4)
            .map(|i| TaskDataset::new(10 + i, t.x().clone(), t.y().clone(), TaskKind::Regression).unwrap())
            .collect();
        let data = MultitaskDataset::new(tasks).unwrap();
        let r = fit_curriculum(&data, 0.3).unwrap();
        assert_eq!(r.order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn curriculum_picks_clean_task_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut tasks: Vec<TaskDataset> = (0..4).map(|i| random_task(&mut rng, i, 20, 3, 3.0)).collect();
        tasks[2] = random_task(&mut rng, 2, 20, 3, 1e-6);
        let data = MultitaskDataset::new(tasks).unwrap();
        let gamma = 0.1;
        // brute force over first-step objectives
        let p = AnchoredPenalty::ridge(3, gamma);
        let firsts: Vec<f64> = data
            .tasks()
            .iter()
            .map(|t| {
                let w = solve_task(t, &p).unwrap();
                task_average_loss(t, &w).unwrap() + p.value(&w)
            })
            .collect();
        let best = (0..4).min_by(|&a, &b| firsts[a].total_cmp(&firsts[b])).unwrap();
        let r = fit_curriculum(&data, gamma).unwrap();
        assert_eq!(r.order[0], best);
        assert_eq!(best, 2);
        let mut sorted = r.order.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn objective_examples() {
        let data = random_data(8, 4, 6, 3);
        let w = fit_itl(&data, 1.0).unwrap();
        let theta = SharedKnowledge::MeanVector { w0: DVector::zeros(3) };
        let lambda = 0.7;
        // entropy term for uniform τ is −λ log T; data term is the τ-weighted score sum
        let u = TaskWeights::uniform(4);
        let scores: Vec<f64> = (0..4)
            .map(|t| {
                crate::model::task_score(&data.tasks()[t], &w.column(t), &theta, 0.5, 0.0).unwrap()
            })
            .collect();
        let j = objective_value(&data, &w, &u, &theta, 0.5, 0.0, lambda, TauMode::Entropy).unwrap();
        let expected = scores.iter().sum::<f64>() / 4.0 - lambda * 4f64.ln();
        assert!((j - expected).abs() < 1e-12);

        // zero scores, all-ones hard τ: −λT
        let exact = MultitaskDataset::new(
            (0..3)
                .map(|t| TaskDataset::new(t, DMatrix::identity(2, 2), DVector::zeros(2), TaskKind::Regression).unwrap())
                .collect(),
        )
        .unwrap();
        let zero = ModelParams::zeros(2, 3);
        let th = SharedKnowledge::MeanVector { w0: DVector::zeros(2) };
        let j = objective_value(&exact, &zero, &TaskWeights::ones(3), &th, 1.0, 0.0, 2.0, TauMode::Hard).unwrap();
        assert_eq!(j, -6.0);
        assert!(objective_value(&exact, &ModelParams::zeros(2, 2), &TaskWeights::ones(3), &th, 1.0, 0.0, 2.0, TauMode::Hard).is_err());
    }

    #[test]
    fn predict_examples() {
        let x = DMatrix::identity(3, 3);
        let w = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        assert_eq!(predict(&w, &x).unwrap(), w);
        assert_eq!(predict(&DVector::zeros(3), &x).unwrap(), DVector::zeros(3));
        let xr = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        assert_eq!(predict(&(&w * 2.5), &xr).unwrap(), predict(&w, &xr).unwrap() * 2.5);
        assert!(predict(&w, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for name in ["STL", "ITL", "CL", "MMTL", "spMMTL", "MTFL", "spMTFL", "MTASO", "spMTASO"] {
            assert_eq!(Method::from_name(name).unwrap().name(), name);
        }
        assert!(Method::from_name("spSTL").is_err());
        assert!(Method::from_name("ELLA").is_err());
        let sp = Method::from_name("spMTFL").unwrap();
        assert_eq!(sp.baseline().unwrap().name(), "MTFL");
    }

    #[test]
    fn mtaso_requires_h() {
        let data = random_data(9, 2, 5, 3);
        let mut s = AlgorithmSpec::new(Variant::Mtaso, false);
        assert!(fit_baseline_mtl(&data, &s).is_err());
        s.pacing.h = Some(4);
        assert!(fit_baseline_mtl(&data, &s).is_err());
        s.pacing.h = Some(2);
        assert!(fit_baseline_mtl(&data, &s).is_ok());
    }
}
