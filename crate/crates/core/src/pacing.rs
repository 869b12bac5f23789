//! Self-paced task selection: the hard and entropy τ rules, the geometric λ
//! schedule and the τ convergence test.

use crate::error::{Error, Result};
use crate::model::{TaskWeights, TauMode};

/// Threshold state threaded through the outer loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PacingState {
    pub lambda: f64,
    /// 1-based outer iteration.
    pub iteration: usize,
}

impl PacingState {
    pub fn start(lambda0: f64) -> Self {
        Self {
            lambda: lambda0,
            iteration: 1,
        }
    }
}

/// `τ_t = 1` if `score_t < λ`, else `δ`.
pub fn update_tau_hard(scores: &[f64], lambda: f64, delta: f64) -> TaskWeights {
    TaskWeights {
        tau: scores
            .iter()
            .map(|&s| if s < lambda { 1.0 } else { delta })
            .collect(),
        mode: TauMode::Hard,
    }
}

/// `τ_t ∝ exp(−score_t / λ)`, normalized onto the simplex.
pub fn update_tau_entropy(scores: &[f64], lambda: f64) -> TaskWeights {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = scores
        .iter()
        .map(|&s| (-(s - min) / lambda).exp().max(f64::MIN_POSITIVE))
        .collect();
    let total: f64 = raw.iter().sum();
    TaskWeights {
        tau: raw.into_iter().map(|v| v / total).collect(),
        mode: TauMode::Entropy,
    }
}

/// Shannon entropy `−Σ τ_t log τ_t`.
pub fn entropy(tau: &TaskWeights) -> Result<f64> {
    if tau.mode != TauMode::Entropy {
        return Err(Error::invalid("entropy is defined only for simplex-valued task weights"));
    }
    Ok(-tau
        .tau
        .iter()
        .filter(|&&t| t > 0.0)
        .map(|&t| t * t.ln())
        .sum::<f64>())
}

pub fn advance_lambda(state: PacingState, c: f64) -> PacingState {
    PacingState {
        lambda: state.lambda * c,
        iteration: state.iteration + 1,
    }
}

/// `‖τ_new − τ_prev‖² ≤ ε`.
pub fn has_converged(tau_new: &TaskWeights, tau_prev: &[f64], epsilon: f64) -> Result<bool> {
    if tau_new.len() != tau_prev.len() {
        return Err(Error::dim("τ convergence test", tau_prev.len(), tau_new.len()));
    }
    Ok(squared_distance(&tau_new.tau, tau_prev) <= epsilon)
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of the scores; used to pick λ₀ when the config does not fix it.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
