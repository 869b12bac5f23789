//! Task penalties against the shared knowledge Θ, and the Θ-step
//! `argmin_Θ Σ_t τ_t P_γ(w_t, Θ)` for each of the three instantiations.
//!
//! The subspace coefficients `v_t` of ASO are never stored: for orthonormal
//! `U` the inner minimum over `v` is attained at `v = U w`, leaving the
//! projection residual `‖(I − UᵀU) w‖²`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{ModelParams, SharedKnowledge, TaskWeights};
use crate::solvers::{regularized_inverse, sym_eigen_desc, top_h_eigenvectors, AnchoredPenalty};

/// `P_γ(w, Θ)`.
pub fn penalty(w: &DVector<f64>, theta: &SharedKnowledge, gamma: f64, feature_eps: f64) -> Result<f64> {
    if w.len() != theta.dim() {
        return Err(Error::dim("penalty weights", theta.dim(), w.len()));
    }
    Ok(match theta {
        SharedKnowledge::MeanVector { w0 } => gamma * (w - w0).norm_squared(),
        SharedKnowledge::FeatureMatrix { d } => {
            let inv = regularized_inverse(d, feature_eps);
            gamma * w.dot(&(inv * w))
        }
        SharedKnowledge::Subspace { u } => gamma * projection_residual(u, w).norm_squared(),
    })
}

fn projection_residual(u: &DMatrix<f64>, w: &DVector<f64>) -> DVector<f64> {
    w - u.transpose() * (u * w)
}

/// The same penalty in the solver's `γ(w − m)ᵀM(w − m)` form. Built once
/// per outer iteration and shared by every task.
pub fn anchored_penalty(theta: &SharedKnowledge, gamma: f64, feature_eps: f64) -> AnchoredPenalty {
    let dim = theta.dim();
    match theta {
        SharedKnowledge::MeanVector { w0 } => AnchoredPenalty::toward(w0.clone(), gamma),
        SharedKnowledge::FeatureMatrix { d } => AnchoredPenalty {
            metric: regularized_inverse(d, feature_eps),
            anchor: DVector::zeros(dim),
            gamma,
        },
        SharedKnowledge::Subspace { u } => {
            let mut metric = DMatrix::identity(dim, dim) - u.transpose() * u;
            metric = (&metric + metric.transpose()) * 0.5;
            AnchoredPenalty {
                metric,
                anchor: DVector::zeros(dim),
                gamma,
            }
        }
    }
}

fn check_weights(w: &ModelParams, tau: &TaskWeights) -> Result<f64> {
    if w.n_tasks() != tau.len() {
        return Err(Error::dim("task weights", w.n_tasks(), tau.len()));
    }
    if tau.tau.iter().any(|&t| !(t >= 0.0) || !t.is_finite()) {
        return Err(Error::invalid("task weights must be finite and nonnegative"));
    }
    let total = tau.total();
    if !(total > 0.0) {
        return Err(Error::invalid("task weights sum to zero"));
    }
    Ok(total)
}

/// τ-weighted mean of the task vectors.
pub fn update_mean(w: &ModelParams, tau: &TaskWeights) -> Result<SharedKnowledge> {
    let total = check_weights(w, tau)?;
    let mut w0 = DVector::zeros(w.dim());
    for (t, &weight) in tau.tau.iter().enumerate() {
        w0.axpy(weight, &w.w.column(t), 1.0);
    }
    Ok(SharedKnowledge::MeanVector { w0: w0 / total })
}

/// `Σ_t τ_t w_t w_tᵀ`.
pub fn weighted_covariance(w: &ModelParams, tau: &TaskWeights) -> Result<DMatrix<f64>> {
    check_weights(w, tau)?;
    let scaled = DMatrix::from_fn(w.dim(), w.n_tasks(), |i, t| w.w[(i, t)] * tau.tau[t]);
    let c = scaled * w.w.transpose();
    Ok((&c + c.transpose()) * 0.5)
}

/// Feature-matrix Θ-step.
///
/// Minimizes `Σ_t τ_t w_tᵀ (D + εI)⁻¹ w_t` over PSD `D` with unit trace.
/// The optimum shares eigenvectors with `C = Σ τ_t w_t w_tᵀ`; on its
/// spectrum `c_i` the problem separates into
/// `min Σ c_i / e_i  s.t.  Σ e_i = 1 + dε, e_i ≥ ε`, solved by
/// `e_i = max(ε, √c_i / ν)`. With `ε = 0` this is `√C / tr √C`.
pub fn update_feature_matrix(w: &ModelParams, tau: &TaskWeights, eps: f64) -> Result<SharedKnowledge> {
    if !(eps >= 0.0) {
        return Err(Error::invalid("feature eps must be nonnegative"));
    }
    let c = weighted_covariance(w, tau)?;
    let d = c.nrows();
    let (values, vectors) = sym_eigen_desc(&c);
    let roots: Vec<f64> = values.iter().map(|v| v.max(0.0).sqrt()).collect();
    let root_sum: f64 = roots.iter().sum();
    if root_sum < 1e-12 {
        return Err(Error::Degenerate(format!(
            "trace of the covariance square root is {root_sum:.3e}; all task vectors are near zero"
        )));
    }
    let budget = 1.0 + d as f64 * eps;
    // roots are descending; find the active count k with e_i = r_i/ν for i < k
    let mut spectrum = vec![0.0; d];
    let mut prefix = 0.0;
    for k in 1..=d {
        prefix += roots[k - 1];
        let nu = prefix / (budget - (d - k) as f64 * eps);
        let head_ok = roots[k - 1] / nu >= eps;
        let tail_ok = k == d || roots[k] / nu <= eps;
        if head_ok && tail_ok {
            for (i, e) in spectrum.iter_mut().enumerate() {
                *e = if i < k { roots[i] / nu - eps } else { 0.0 };
            }
            break;
        }
    }
    let scaled = DMatrix::from_fn(d, d, |i, j| vectors[(i, j)] * spectrum[j]);
    let mut dm = scaled * vectors.transpose();
    dm = (&dm + dm.transpose()) * 0.5;
    let tr = dm.trace();
    Ok(SharedKnowledge::FeatureMatrix { d: dm / tr })
}

/// Subspace Θ-step: the top-`h` eigenvectors of `Σ τ_t w_t w_tᵀ`.
pub fn update_subspace(w: &ModelParams, tau: &TaskWeights, h: usize) -> Result<SharedKnowledge> {
    let c = weighted_covariance(w, tau)?;
    Ok(SharedKnowledge::Subspace {
        u: top_h_eigenvectors(&c, h)?,
    })
}

/// `Σ_t τ_t ‖(I − UᵀU) w_t‖²`.
pub fn weighted_subspace_residual(w: &ModelParams, tau: &TaskWeights, u: &DMatrix<f64>) -> f64 {
    (0..w.n_tasks())
        .map(|t| tau.tau[t] * projection_residual(u, &w.column(t)).norm_squared())
        .sum()
}

/// `Σ_t τ_t P_γ(w_t, Θ)`.
pub fn weighted_penalty(
    w: &ModelParams,
    tau: &TaskWeights,
    theta: &SharedKnowledge,
    gamma: f64,
    feature_eps: f64,
) -> Result<f64> {
    check_weights(w, tau)?;
    let p = anchored_penalty(theta, gamma, feature_eps);
    Ok((0..w.n_tasks())
        .map(|t| tau.tau[t] * p.value(&w.column(t)))
        .sum())
}

/// `h` orthonormal rows drawn from a seeded Gaussian matrix.
pub fn random_subspace(dim: usize, h: usize, seed: u64) -> Result<DMatrix<f64>> {
    if h == 0 || h > dim {
        return Err(Error::invalid(format!("h = {h} must lie in 1..={dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(dim, h, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    Ok(q.columns(0, h).transpose())
}
