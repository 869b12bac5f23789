//! Per-task penalized minimization and the symmetric-matrix kernels used by
//! the shared-knowledge updates.
//!
//! Every task-level subproblem has the form
//!
//! ```text
//! minimize  L(y, Xw) + γ (w − m)ᵀ M (w − m)
//! ```
//!
//! where `L` is the mean squared or logistic loss, `M` is symmetric PSD and
//! `m` is an anchor. Mean regularization uses `M = I, m = w0`; feature
//! learning uses `M = (D + εI)⁻¹, m = 0`; subspace learning uses
//! `M = I − UᵀU, m = 0`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::{logistic_loss, max_abs, TaskDataset, TaskKind};

/// Diagonal floor added to every linear system.
pub const RIDGE_FLOOR: f64 = 1e-10;

/// Default stopping tolerance on the logistic gradient norm or Newton decrement.
pub const LOGISTIC_TOL: f64 = 1e-8;
pub const LOGISTIC_MAX_ITERS: usize = 100;

/// `γ (w − m)ᵀ M (w − m)`.
#[derive(Clone, Debug)]
pub struct AnchoredPenalty {
    pub metric: DMatrix<f64>,
    pub anchor: DVector<f64>,
    pub gamma: f64,
}

impl AnchoredPenalty {
    pub fn new(metric: DMatrix<f64>, anchor: DVector<f64>, gamma: f64) -> Result<Self> {
        if !metric.is_square() {
            return Err(Error::invalid("penalty metric must be square"));
        }
        if metric.nrows() != anchor.len() {
            return Err(Error::dim("penalty anchor", metric.nrows(), anchor.len()));
        }
        if !(gamma >= 0.0) {
            return Err(Error::invalid(format!("gamma = {gamma} must be nonnegative")));
        }
        let scale = metric.amax().max(1.0);
        if max_abs(metric.as_slice(), metric.transpose().as_slice()) > 1e-10 * scale {
            return Err(Error::invalid("penalty metric must be symmetric"));
        }
        Ok(Self {
            metric,
            anchor,
            gamma,
        })
    }

    /// Plain ridge: `γ‖w‖²`.
    pub fn ridge(dim: usize, gamma: f64) -> Self {
        Self {
            metric: DMatrix::identity(dim, dim),
            anchor: DVector::zeros(dim),
            gamma,
        }
    }

    /// `γ‖w − anchor‖²`.
    pub fn toward(anchor: DVector<f64>, gamma: f64) -> Self {
        let d = anchor.len();
        Self {
            metric: DMatrix::identity(d, d),
            anchor,
            gamma,
        }
    }

    pub fn dim(&self) -> usize {
        self.anchor.len()
    }

    pub fn value(&self, w: &DVector<f64>) -> f64 {
        let diff = w - &self.anchor;
        self.gamma * diff.dot(&(&self.metric * &diff))
    }

    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        (&self.metric * (w - &self.anchor)) * (2.0 * self.gamma)
    }
}

/// Dispatches on the task kind.
pub fn solve_task(task: &TaskDataset, penalty: &AnchoredPenalty) -> Result<DVector<f64>> {
    match task.kind() {
        TaskKind::Regression => solve_penalized_least_squares(task, penalty),
        TaskKind::BinaryClassification => {
            solve_penalized_logistic(task, penalty, LOGISTIC_TOL, LOGISTIC_MAX_ITERS)
        }
    }
}

/// Closed-form minimizer of `(1/N)‖y − Xw‖² + γ(w − m)ᵀM(w − m)`:
/// `w = (XᵀX/N + γM)⁻¹ (Xᵀy/N + γMm)`.
pub fn solve_penalized_least_squares(
    task: &TaskDataset,
    penalty: &AnchoredPenalty,
) -> Result<DVector<f64>> {
    if task.kind() != TaskKind::Regression {
        return Err(Error::invalid("least-squares solver requires a regression task"));
    }
    if penalty.dim() != task.dim() {
        return Err(Error::dim("penalty dimension", task.dim(), penalty.dim()));
    }
    let gm = &penalty.metric * penalty.gamma;
    let mut a = task.gram() + &gm;
    for i in 0..a.nrows() {
        a[(i, i)] += RIDGE_FLOOR;
    }
    let b = task.moment() + &gm * &penalty.anchor;
    solve_spd(a, &b)
}

/// Solves `A x = b` for symmetric positive (semi)definite `A`.
pub(crate) fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        let x = chol.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    let condition = condition_estimate(&a);
    let lu = a.lu();
    match lu.solve(b) {
        Some(x) if condition.is_finite() && condition < 1e15 && x.iter().all(|v| v.is_finite()) => {
            Ok(x)
        }
        _ => Err(Error::Singular { condition }),
    }
}

fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    let ev = sym.symmetric_eigenvalues();
    let max = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = ev.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn logistic_objective(task: &TaskDataset, penalty: &AnchoredPenalty, w: &DVector<f64>) -> f64 {
    let margins = task.x() * w;
    let loss: f64 = margins
        .iter()
        .zip(task.y().iter())
        .map(|(&m, &y)| logistic_loss(y, m))
        .sum::<f64>()
        / task.n_examples() as f64;
    loss + penalty.value(w)
}

/// `σ(z) = 1 / (1 + e^{−z})` without overflow.
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn logistic_grad_hess(
    task: &TaskDataset,
    penalty: &AnchoredPenalty,
    w: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = task.n_examples() as f64;
    let x = task.x();
    let margins = x * w;
    // d/dm log(1 + e^{-ym}) = -y σ(-ym); second derivative σ(ym)σ(-ym).
    let mut coef = DVector::zeros(margins.len());
    let mut curv = DVector::zeros(margins.len());
    for (i, (&m, &y)) in margins.iter().zip(task.y().iter()).enumerate() {
        let s = sigmoid(-y * m);
        coef[i] = -y * s / n;
        curv[i] = s * (1.0 - s) / n;
    }
    let grad = x.tr_mul(&coef) + penalty.gradient(w);
    let mut weighted = x.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= curv[i];
    }
    let mut hess = x.tr_mul(&weighted) + &penalty.metric * (2.0 * penalty.gamma);
    for i in 0..hess.nrows() {
        hess[(i, i)] += RIDGE_FLOOR;
    }
    (grad, hess)
}

/// Damped Newton on the penalized mean logistic loss, started at the anchor.
pub fn solve_penalized_logistic(
    task: &TaskDataset,
    penalty: &AnchoredPenalty,
    tol: f64,
    max_iters: usize,
) -> Result<DVector<f64>> {
    if task.kind() != TaskKind::BinaryClassification {
        return Err(Error::invalid("logistic solver requires a classification task"));
    }
    if penalty.dim() != task.dim() {
        return Err(Error::dim("penalty dimension", task.dim(), penalty.dim()));
    }
    let mut w = penalty.anchor.clone();
    let mut f = logistic_objective(task, penalty, &w);
    let mut grad_norm = f64::INFINITY;
    for _ in 0..max_iters {
        let (grad, hess) = logistic_grad_hess(task, penalty, &w);
        grad_norm = grad.norm();
        if grad_norm < tol {
            return Ok(w);
        }
        let step = solve_spd(hess, &grad)?;
        let slope = grad.dot(&step);
        // Newton decrement: affine invariant, so it stays meaningful when γ is huge
        // a predicted decrease below the objective's rounding resolution is also final
        if slope.max(0.0).sqrt() < tol || slope <= 8.0 * f64::EPSILON * f.abs().max(1.0) {
            return Ok(&w - &step);
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &w - &step * t;
            let fc = logistic_objective(task, penalty, &cand);
            // a candidate equal to f is a stalled search, not a descent step
            if fc < f && fc <= f - 1e-4 * t * slope {
                w = cand;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // f can be too noisy to rank nearby points when the metric is badly
            // scaled; fall back to the full step if it shrinks the gradient.
            let cand = &w - &step;
            let (g, _) = logistic_grad_hess(task, penalty, &cand);
            if g.norm() < grad_norm {
                f = logistic_objective(task, penalty, &cand);
                w = cand;
                continue;
            }
            // No representable decrease left; accept if stationary to roundoff.
            let (g, _) = logistic_grad_hess(task, penalty, &w);
            grad_norm = g.norm();
            if grad_norm < tol.max(1e-6) {
                return Ok(w);
            }
            break;
        }
    }
    let (g, _) = logistic_grad_hess(task, penalty, &w);
    let final_norm = g.norm();
    if final_norm < tol {
        return Ok(w);
    }
    Err(Error::NoConvergence {
        iterations: max_iters,
        grad_norm: final_norm.min(grad_norm),
    })
}

fn check_symmetric(c: &DMatrix<f64>) -> Result<f64> {
    if !c.is_square() {
        return Err(Error::invalid("matrix must be square"));
    }
    let scale = c.amax().max(1.0);
    let asym = max_abs(c.as_slice(), c.transpose().as_slice());
    if asym > 1e-10 * scale {
        return Err(Error::invalid(format!("matrix not symmetric (|C − Cᵀ| = {asym:.3e})")));
    }
    Ok(scale)
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending. Columns of the
/// returned matrix are the eigenvectors with the first entry of magnitude
/// above 1e-10 made positive.
pub fn sym_eigen_desc(c: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-10) {
            if *first < 0.0 {
                v.neg_mut();
            }
        }
        vectors.set_column(k, &v);
    }
    (values, vectors)
}

fn compose(vectors: &DMatrix<f64>, values: &[f64]) -> DMatrix<f64> {
    let scaled = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |i, j| {
        vectors[(i, j)] * values[j]
    });
    let m = scaled * vectors.transpose();
    (&m + m.transpose()) * 0.5
}

/// Symmetric PSD square root.
pub fn psd_sqrt(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = check_symmetric(c)?;
    let (values, vectors) = sym_eigen_desc(c);
    let min = values.last().copied().unwrap_or(0.0);
    if min < -1e-10 * scale {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    let roots: Vec<f64> = values.iter().map(|v| v.max(0.0).sqrt()).collect();
    Ok(compose(&vectors, &roots))
}

/// Rows are the unit eigenvectors of the `h` largest eigenvalues, in
/// descending eigenvalue order.
pub fn top_h_eigenvectors(c: &DMatrix<f64>, h: usize) -> Result<DMatrix<f64>> {
    check_symmetric(c)?;
    let d = c.nrows();
    if h == 0 || h > d {
        return Err(Error::invalid(format!("h = {h} must lie in 1..={d}")));
    }
    let (_, vectors) = sym_eigen_desc(c);
    Ok(vectors.columns(0, h).transpose())
}

/// `(D + εI)⁻¹`.
pub fn regularized_inverse(d: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let (values, vectors) = sym_eigen_desc(d);
    let inv: Vec<f64> = values.iter().map(|v| 1.0 / (v.max(0.0) + eps)).collect();
    compose(&vectors, &inv)
}
