//! Domain types shared by every module, the per-example losses, and the
//! per-task score that drives task selection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    #[serde(alias = "classification")]
    BinaryClassification,
}

/// One task's examples. Classification labels are stored as ±1.
///
/// The scaled Gram matrix `XᵀX/N` and moment `Xᵀy/N` are computed once at
/// construction; every least-squares solve in an outer iteration reuses them.
#[derive(Clone, Debug)]
pub struct TaskDataset {
    task_id: usize,
    x: DMatrix<f64>,
    y: DVector<f64>,
    kind: TaskKind,
    gram: DMatrix<f64>,
    moment: DVector<f64>,
}

impl TaskDataset {
    pub fn new(task_id: usize, x: DMatrix<f64>, y: DVector<f64>, kind: TaskKind) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::invalid(format!("task {task_id} has no examples")));
        }
        if x.nrows() != y.len() {
            return Err(Error::dim("task targets", x.nrows(), y.len()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("task {task_id} contains non-finite values")));
        }
        let y = match kind {
            TaskKind::Regression => y,
            TaskKind::BinaryClassification => normalize_labels(task_id, y)?,
        };
        let n = x.nrows() as f64;
        let gram = x.tr_mul(&x) / n;
        let moment = x.tr_mul(&y) / n;
        Ok(Self {
            task_id,
            x,
            y,
            kind,
            gram,
            moment,
        })
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn n_examples(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// `XᵀX / N`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// `Xᵀy / N`.
    pub fn moment(&self) -> &DVector<f64> {
        &self.moment
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let x = self.x.select_rows(rows);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r]));
        Self::new(self.task_id, x, y, self.kind)
    }
}

fn normalize_labels(task_id: usize, y: DVector<f64>) -> Result<DVector<f64>> {
    let zero_one = y.iter().all(|&v| v == 0.0 || v == 1.0);
    let signed = y.iter().all(|&v| v == -1.0 || v == 1.0);
    if signed {
        Ok(y)
    } else if zero_one {
        Ok(y.map(|v| if v == 0.0 { -1.0 } else { 1.0 }))
    } else {
        Err(Error::invalid(format!(
            "task {task_id}: classification labels must be in {{-1,+1}} or {{0,1}}"
        )))
    }
}

#[derive(Clone, Debug)]
pub struct MultitaskDataset {
    tasks: Vec<TaskDataset>,
    dim: usize,
}

impl MultitaskDataset {
    pub fn new(tasks: Vec<TaskDataset>) -> Result<Self> {
        let first = tasks
            .first()
            .ok_or_else(|| Error::invalid("a multitask dataset needs at least one task"))?;
        let dim = first.dim();
        for t in &tasks {
            if t.dim() != dim {
                return Err(Error::dim("task feature count", dim, t.dim()));
            }
        }
        let mut ids: Vec<usize> = tasks.iter().map(|t| t.task_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("task ids must be unique"));
        }
        Ok(Self { tasks, dim })
    }

    pub fn tasks(&self) -> &[TaskDataset] {
        &self.tasks
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The common kind of all tasks, or `None` when kinds are mixed.
    pub fn common_kind(&self) -> Option<TaskKind> {
        let k = self.tasks[0].kind;
        self.tasks.iter().all(|t| t.kind == k).then_some(k)
    }
}

/// The d × T stack of task weight vectors; column t is task t's model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub w: DMatrix<f64>,
}

impl ModelParams {
    pub fn zeros(dim: usize, n_tasks: usize) -> Self {
        Self {
            w: DMatrix::zeros(dim, n_tasks),
        }
    }

    pub fn from_columns(cols: &[DVector<f64>]) -> Result<Self> {
        let first = cols
            .first()
            .ok_or_else(|| Error::invalid("at least one task vector required"))?;
        if let Some(bad) = cols.iter().find(|c| c.len() != first.len()) {
            return Err(Error::dim("task vector", first.len(), bad.len()));
        }
        Ok(Self {
            w: DMatrix::from_columns(cols),
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.w.ncols()
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn column(&self, t: usize) -> DVector<f64> {
        self.w.column(t).into_owned()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauMode {
    Hard,
    Entropy,
}

/// Per-task selection weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskWeights {
    pub tau: Vec<f64>,
    pub mode: TauMode,
}

impl TaskWeights {
    pub fn uniform(n_tasks: usize) -> Self {
        Self {
            tau: vec![1.0 / n_tasks as f64; n_tasks],
            mode: TauMode::Entropy,
        }
    }

    pub fn ones(n_tasks: usize) -> Self {
        Self {
            tau: vec![1.0; n_tasks],
            mode: TauMode::Hard,
        }
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.tau.iter().sum()
    }
}

/// Knowledge shared among the tasks.
#[derive(Clone, Debug, PartialEq)]
pub enum SharedKnowledge {
    /// Mean-regularized MTL: every task is pulled toward `w0`.
    MeanVector { w0: DVector<f64> },
    /// Multitask feature learning: PSD, trace-one feature covariance `D`.
    FeatureMatrix { d: DMatrix<f64> },
    /// Alternating structure optimization: `h` orthonormal rows in `U`.
    Subspace { u: DMatrix<f64> },
}

impl SharedKnowledge {
    pub fn dim(&self) -> usize {
        match self {
            SharedKnowledge::MeanVector { w0 } => w0.len(),
            SharedKnowledge::FeatureMatrix { d } => d.nrows(),
            SharedKnowledge::Subspace { u } => u.ncols(),
        }
    }

    /// Largest absolute entrywise difference; `inf` when variants differ.
    pub fn max_abs_diff(&self, other: &SharedKnowledge) -> f64 {
        use SharedKnowledge::*;
        match (self, other) {
            (MeanVector { w0: a }, MeanVector { w0: b }) => max_abs(a.as_slice(), b.as_slice()),
            (FeatureMatrix { d: a }, FeatureMatrix { d: b }) => {
                max_abs(a.as_slice(), b.as_slice())
            }
            (Subspace { u: a }, Subspace { u: b }) if a.shape() == b.shape() => {
                max_abs(a.as_slice(), b.as_slice())
            }
            _ => f64::INFINITY,
        }
    }

    /// Checks the variant's structural invariants.
    pub fn validate(&self) -> Result<()> {
        match self {
            SharedKnowledge::MeanVector { .. } => Ok(()),
            SharedKnowledge::FeatureMatrix { d } => {
                if !d.is_square() {
                    return Err(Error::invalid("feature matrix must be square"));
                }
                let asym = max_abs(d.as_slice(), d.transpose().as_slice());
                if asym >= 1e-10 {
                    return Err(Error::invalid(format!("feature matrix asymmetric by {asym:.3e}")));
                }
                let min_eig = d.clone().symmetric_eigenvalues().min();
                if min_eig < -1e-10 {
                    return Err(Error::NotPsd {
                        min_eigenvalue: min_eig,
                    });
                }
                let tr = d.trace();
                if (tr - 1.0).abs() > 1e-8 {
                    return Err(Error::invalid(format!("feature matrix trace {tr} != 1")));
                }
                Ok(())
            }
            SharedKnowledge::Subspace { u } => {
                let h = u.nrows();
                if h == 0 || h > u.ncols() {
                    return Err(Error::invalid(format!(
                        "subspace dimension {h} outside 1..={}",
                        u.ncols()
                    )));
                }
                let gram = u * u.transpose();
                let dev = max_abs(gram.as_slice(), DMatrix::<f64>::identity(h, h).as_slice());
                if dev > 1e-8 {
                    return Err(Error::invalid(format!("subspace rows not orthonormal ({dev:.3e})")));
                }
                Ok(())
            }
        }
    }
}

pub(crate) fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// How the initial threshold λ₀ is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lambda0 {
    /// Use this value directly.
    Fixed(f64),
    /// Multiply the median of the first iteration's task scores by this factor.
    MedianScaled(f64),
}

impl Default for Lambda0 {
    fn default() -> Self {
        Lambda0::MedianScaled(1.0)
    }
}

/// Pacing and regularization settings for the alternating solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PacingConfig {
    pub lambda0: Lambda0,
    /// Growth factor of λ per outer iteration; must exceed 1.
    pub c: f64,
    /// Weight given to hard tasks under the hard rule.
    pub delta: f64,
    /// Convergence tolerance on the squared change of τ (or of W and Θ for baselines).
    pub epsilon: f64,
    pub max_outer_iters: usize,
    pub gamma: f64,
    /// Subspace dimension for ASO.
    pub h: Option<usize>,
    /// Perturbation used by the feature-matrix update and its inverse.
    pub feature_eps: f64,
    /// Upper cap on λ.
    pub lambda_max: f64,
}

impl Default for PacingConfig {
    fn default() -> Self {
        Self {
            lambda0: Lambda0::default(),
            c: 1.1,
            delta: 0.01,
            epsilon: 1e-6,
            max_outer_iters: 50,
            gamma: 1.0,
            h: None,
            feature_eps: 1e-8,
            lambda_max: f64::INFINITY,
        }
    }
}

impl PacingConfig {
    /// Every violated constraint, as human-readable findings.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.c > 1.0) {
            out.push(format!("pacing factor c = {} must satisfy c > 1", self.c));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            out.push(format!("delta = {} must lie in (0, 1)", self.delta));
        }
        if !(self.epsilon >= 0.0) {
            out.push(format!("epsilon = {} must be nonnegative", self.epsilon));
        }
        if self.max_outer_iters == 0 {
            out.push("max_outer_iters must be at least 1".into());
        }
        if !(self.gamma > 0.0) {
            out.push(format!("gamma = {} must be positive", self.gamma));
        }
        if !(self.feature_eps >= 0.0) {
            out.push(format!("feature_eps = {} must be nonnegative", self.feature_eps));
        }
        if !(self.lambda_max > 0.0) {
            out.push(format!("lambda_max = {} must be positive", self.lambda_max));
        }
        match self.lambda0 {
            Lambda0::Fixed(v) | Lambda0::MedianScaled(v) if !(v > 0.0) => {
                out.push(format!("lambda0 = {v} must be positive"));
            }
            _ => {}
        }
        if self.h == Some(0) {
            out.push("subspace dimension h must be at least 1".into());
        }
        out
    }
}

/// τ snapshot of one outer iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct TauRecord {
    pub iteration: usize,
    /// Threshold in force; `None` for baselines, which have no schedule.
    pub lambda: Option<f64>,
    pub tau: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Objective values around the three block updates of one outer iteration,
/// all evaluated at that iteration's λ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DescentRecord {
    pub iteration: usize,
    /// Before the W-step; `None` on the first iteration where no W exists yet.
    pub before_w: Option<f64>,
    pub after_w: f64,
    pub after_tau: f64,
    pub after_theta: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: ModelParams,
    pub theta: SharedKnowledge,
    pub tau_history: Vec<TauRecord>,
    pub objective_history: Vec<f64>,
    pub descent: Vec<DescentRecord>,
    pub iterations_run: usize,
    pub converged: bool,
}

impl TrainReport {
    pub fn lambda_schedule(&self) -> Vec<f64> {
        self.tau_history.iter().filter_map(|r| r.lambda).collect()
    }
}

pub fn squared_loss(y_true: f64, y_pred: f64) -> f64 {
    let r = y_true - y_pred;
    r * r
}

/// `log(1 + exp(-y·margin))` for labels in {−1, +1}.
pub fn logistic_loss(y_true: f64, margin: f64) -> f64 {
    let z = y_true * margin;
    if z > 30.0 {
        (-z).exp()
    } else if z < -30.0 {
        -z + (z).exp()
    } else {
        (-z).exp().ln_1p()
    }
}

/// Mean per-example loss of `w` on the task.
pub fn task_average_loss(task: &TaskDataset, w: &DVector<f64>) -> Result<f64> {
    if w.len() != task.dim() {
        return Err(Error::dim("task_average_loss weights", task.dim(), w.len()));
    }
    let pred = task.x() * w;
    let loss: f64 = match task.kind() {
        TaskKind::Regression => pred
            .iter()
            .zip(task.y().iter())
            .map(|(&p, &y)| squared_loss(y, p))
            .sum(),
        TaskKind::BinaryClassification => pred
            .iter()
            .zip(task.y().iter())
            .map(|(&p, &y)| logistic_loss(y, p))
            .sum(),
    };
    Ok(loss / task.n_examples() as f64)
}

/// Training loss plus the penalty against the shared knowledge. Both τ rules
/// consume this scalar and nothing else.
pub fn task_score(
    task: &TaskDataset,
    w: &DVector<f64>,
    theta: &SharedKnowledge,
    gamma: f64,
    feature_eps: f64,
) -> Result<f64> {
    Ok(task_average_loss(task, w)? + knowledge::penalty(w, theta, gamma, feature_eps)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn reg_task(x: DMatrix<f64>, y: Vec<f64>) -> TaskDataset {
        TaskDataset::new(0, x, DVector::from_vec(y), TaskKind::Regression).unwrap()
    }

    #[test]
    fn squared_loss_examples() {
        assert_eq!(squared_loss(1.0, 1.0), 0.0);
        assert_eq!(squared_loss(2.0, 0.0), 4.0);
        assert_eq!(squared_loss(-1.0, 0.5), 2.25);
    }

    #[test]
    fn logistic_loss_examples() {
        assert_abs_diff_eq!(logistic_loss(1.0, 0.0), 2f64.ln(), epsilon = 1e-15);
        assert!(logistic_loss(1.0, 50.0) < 1e-20);
        // log(1 + e^2), evaluated directly
        assert_abs_diff_eq!(logistic_loss(-1.0, 2.0), 2.1269280110429727, epsilon = 1e-12);
        // branches agree near the cut
        assert_abs_diff_eq!(logistic_loss(1.0, 30.0), logistic_loss(1.0, 30.0 - 1e-12), epsilon = 1e-15);
        assert_abs_diff_eq!(logistic_loss(1.0, -40.0), 40.0, epsilon = 1e-12);
    }

    #[test]
    fn task_average_loss_examples() {
        let x = DMatrix::identity(2, 2);
        let t = reg_task(x.clone(), vec![1.0, 1.0]);
        assert_eq!(task_average_loss(&t, &DVector::zeros(2)).unwrap(), 1.0);
        assert_eq!(task_average_loss(&t, &DVector::from_vec(vec![1.0, 1.0])).unwrap(), 0.0);

        let single = reg_task(DMatrix::from_row_slice(1, 2, &[2.0, 1.0]), vec![3.0]);
        let w = DVector::from_vec(vec![0.5, 0.5]);
        assert_eq!(task_average_loss(&single, &w).unwrap(), squared_loss(3.0, 1.5));

        assert!(matches!(
            task_average_loss(&t, &DVector::zeros(3)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn task_score_examples() {
        let t = reg_task(DMatrix::identity(2, 2), vec![1.0, 0.0]);
        let w = DVector::from_vec(vec![1.0, 0.0]);
        let mean = SharedKnowledge::MeanVector { w0: w.clone() };
        assert_eq!(task_score(&t, &w, &mean, 2.0, 0.0).unwrap(), 0.0);
        let origin = SharedKnowledge::MeanVector { w0: DVector::zeros(2) };
        assert_eq!(task_score(&t, &w, &origin, 2.0, 0.0).unwrap(), 2.0);
    }

    #[test]
    fn labels_normalized() {
        let x = DMatrix::from_element(3, 1, 1.0);
        let t = TaskDataset::new(
            1,
            x.clone(),
            DVector::from_vec(vec![0.0, 1.0, 0.0]),
            TaskKind::BinaryClassification,
        )
        .unwrap();
        assert_eq!(t.y().as_slice(), &[-1.0, 1.0, -1.0]);
        assert!(TaskDataset::new(
            1,
            x,
            DVector::from_vec(vec![0.0, 2.0, 1.0]),
            TaskKind::BinaryClassification
        )
        .is_err());
    }

    #[test]
    fn dataset_invariants() {
        let t = |id, d| reg_task_id(id, DMatrix::zeros(2, d));
        assert!(MultitaskDataset::new(vec![]).is_err());
        assert!(MultitaskDataset::new(vec![t(0, 2), t(1, 3)]).is_err());
        assert!(MultitaskDataset::new(vec![t(0, 2), t(0, 2)]).is_err());
        assert!(MultitaskDataset::new(vec![t(0, 2), t(1, 2)]).is_ok());
        assert!(TaskDataset::new(0, DMatrix::zeros(0, 2), DVector::zeros(0), TaskKind::Regression).is_err());
        assert!(TaskDataset::new(0, DMatrix::zeros(2, 2), DVector::zeros(3), TaskKind::Regression).is_err());
    }

    fn reg_task_id(id: usize, x: DMatrix<f64>) -> TaskDataset {
        let n = x.nrows();
        TaskDataset::new(id, x, DVector::zeros(n), TaskKind::Regression).unwrap()
    }

    #[test]
    fn pacing_violations() {
        assert!(PacingConfig::default().violations().is_empty());
        let bad = PacingConfig {
            c: 1.0,
            ..Default::default()
        };
        assert!(bad.violations()[0].contains("c > 1"));
    }

    proptest! {
        #[test]
        fn logistic_monotone_decreasing(a in -60.0f64..60.0, b in -60.0f64..60.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(logistic_loss(1.0, lo) >= logistic_loss(1.0, hi));
            prop_assert!(logistic_loss(-1.0, -lo) >= logistic_loss(-1.0, -hi));
            prop_assert!(logistic_loss(1.0, lo) >= 0.0);
        }

        #[test]
        fn average_loss_permutation_invariant(
            rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 2..8),
            w in proptest::collection::vec(-2.0f64..2.0, 2),
            shift in 0usize..8,
        ) {
            let n = rows.len();
            let x = DMatrix::from_fn(n, 2, |i, j| rows[i][j]);
            let y: Vec<f64> = rows.iter().map(|r| r[2]).collect();
            let t = reg_task(x, y);
            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let tp = t.select_rows(&perm).unwrap();
            let w = DVector::from_vec(w);
            let a = task_average_loss(&t, &w).unwrap();
            let b = task_average_loss(&tp, &w).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
        }
    }
}
