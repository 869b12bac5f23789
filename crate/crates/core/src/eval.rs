//! Metrics, k-fold hyperparameter search and aggregation over repeats.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::kfold;
use crate::error::{Error, Result};
use crate::model::{Lambda0, MultitaskDataset, TaskDataset, TaskKind};
use crate::par;
use crate::trainer::{FittedModel, Method};

/// Root mean squared error.
pub fn rmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::dim("rmse", y_true.len(), y_pred.len()));
    }
    if y_true.is_empty() {
        return Err(Error::invalid("rmse of empty vectors"));
    }
    let sse: f64 = y_true.iter().zip(y_pred).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y_true.len() as f64).sqrt())
}

/// Midranks (1-based) with ties averaged.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Area under the ROC curve: P(s⁺ > s⁻) + ½ P(s⁺ = s⁻), exact.
///
/// Labels are positive when > 0.
pub fn auc(labels: &[f64], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::dim("auc", labels.len(), scores.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("auc scores contain NaN"));
    }
    let n_pos = labels.iter().filter(|&&l| l > 0.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("auc needs both classes present"));
    }
    let r = ranks(scores);
    let pos_rank_sum: f64 = labels.iter().zip(&r).filter(|(l, _)| **l > 0.0).map(|(_, r)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Spearman rank correlation (Pearson correlation of midranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("spearman", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::invalid("spearman needs at least two points"));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("spearman of a constant sequence".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "RMSE")]
    Rmse,
    #[serde(rename = "AUC")]
    Auc,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Rmse => "RMSE",
            Metric::Auc => "AUC",
        })
    }
}

impl Metric {
    pub fn for_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Regression => Metric::Rmse,
            TaskKind::BinaryClassification => Metric::Auc,
        }
    }

    pub fn higher_is_better(self) -> bool {
        self == Metric::Auc
    }

    /// Per-task value; `None` where the metric is undefined (single-class AUC).
    pub fn on_task(self, task: &TaskDataset, pred: &[f64]) -> Result<Option<f64>> {
        let y = task.y().as_slice();
        match self {
            Metric::Rmse => rmse(y, pred).map(Some),
            Metric::Auc => {
                let has_pos = y.iter().any(|&v| v > 0.0);
                let has_neg = y.iter().any(|&v| v <= 0.0);
                if has_pos && has_neg {
                    auc(y, pred).map(Some)
                } else {
                    Ok(None)
                }
            }
        }
    }
}

/// The metric matching the dataset's task kind; mixed kinds are rejected.
pub fn metric_for(data: &MultitaskDataset) -> Result<Metric> {
    data.common_kind()
        .map(Metric::for_kind)
        .ok_or_else(|| Error::invalid("tasks mix regression and classification"))
}

/// Per-task metric of a fitted model on `data`; NaN where undefined.
pub fn evaluate(model: &FittedModel, data: &MultitaskDataset, metric: Metric) -> Result<Vec<f64>> {
    let preds = model.predict_all(data)?;
    data.tasks()
        .iter()
        .zip(&preds)
        .map(|(task, p)| Ok(metric.on_task(task, p.as_slice())?.unwrap_or(f64::NAN)))
        .collect()
}

/// Mean of the finite entries; NaN when there are none.
pub fn finite_mean(values: &[f64]) -> f64 {
    let (sum, n) = values
        .iter()
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Summary of one algorithm over repeated runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Per-task mean across runs.
    pub per_task_metric: Vec<f64>,
    /// Mean of the run-level means.
    pub mean: f64,
    /// Sample standard deviation of run-level means over √n_runs; 0 for one run.
    pub std_error: f64,
    pub metric: Metric,
    pub n_runs: usize,
    /// Run-level means in run order.
    pub run_means: Vec<f64>,
}

/// Aggregates per-run per-task metrics.
pub fn aggregate_runs(per_run: &[Vec<f64>], metric: Metric) -> Result<RunSummary> {
    let n_runs = per_run.len();
    if n_runs == 0 {
        return Err(Error::invalid("aggregate_runs needs at least one run"));
    }
    let n_tasks = per_run[0].len();
    if let Some(bad) = per_run.iter().find(|r| r.len() != n_tasks) {
        return Err(Error::dim("aggregate_runs task count", n_tasks, bad.len()));
    }
    let per_task_metric = (0..n_tasks)
        .map(|t| finite_mean(&per_run.iter().map(|r| r[t]).collect::<Vec<_>>()))
        .collect();
    let run_means: Vec<f64> = per_run.iter().map(|r| finite_mean(r)).collect();
    let mean = run_means.iter().sum::<f64>() / n_runs as f64;
    let std_error = if n_runs > 1 {
        let var = run_means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (n_runs - 1) as f64;
        (var / n_runs as f64).sqrt()
    } else {
        0.0
    };
    Ok(RunSummary {
        per_task_metric,
        mean,
        std_error,
        metric,
        n_runs,
        run_means,
    })
}

/// Two-sided paired t-test p-value for `a − b`.
///
/// Returns 1 when every difference is zero and 0 when the differences are
/// a nonzero constant.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("paired t-test", a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 { 1.0 } else { 0.0 });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(2.0 * (1.0 - dist.cdf(t.abs())))
}

/// Tunable hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperParam {
    Gamma,
    /// λ₀ as a multiple of the median first-iteration score.
    Lambda0Scale,
    /// λ₀ as an absolute value.
    Lambda0,
    H,
    C,
}

impl HyperParam {
    /// Whether this parameter means anything for `method`.
    pub fn applies_to(self, method: &Method) -> bool {
        match (self, method) {
            (HyperParam::Gamma, _) => true,
            (HyperParam::H, Method::Mtl(s)) => s.variant == crate::trainer::Variant::Mtaso,
            (HyperParam::Lambda0Scale | HyperParam::Lambda0 | HyperParam::C, m) => m.is_self_paced(),
            _ => false,
        }
    }

    /// Sets the parameter on `method`; parameters that don't apply are ignored.
    pub fn apply(self, method: &mut Method, value: f64) -> Result<()> {
        if !self.applies_to(method) {
            return Ok(());
        }
        match self {
            HyperParam::Gamma => method.set_gamma(value),
            _ => {
                let Method::Mtl(spec) = method else {
                    return Ok(());
                };
                match self {
                    HyperParam::Lambda0Scale => spec.pacing.lambda0 = Lambda0::MedianScaled(value),
                    HyperParam::Lambda0 => spec.pacing.lambda0 = Lambda0::Fixed(value),
                    HyperParam::C => spec.pacing.c = value,
                    HyperParam::H => {
                        if !(value >= 1.0 && value.fract() == 0.0) {
                            return Err(Error::invalid(format!("h = {value} must be a positive integer")));
                        }
                        spec.pacing.h = Some(value as usize);
                    }
                    HyperParam::Gamma => unreachable!(),
                }
            }
        }
        Ok(())
    }
}

/// An ordered grid: the Cartesian product of each axis, first axis slowest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub param: HyperParam,
    pub values: Vec<f64>,
}

/// Grid points in declaration order, restricted to the axes that apply.
pub fn grid_points(grid: &[GridAxis], method: &Method) -> Vec<Vec<(HyperParam, f64)>> {
    let axes: Vec<&GridAxis> = grid.iter().filter(|a| a.param.applies_to(method)).collect();
    let mut points: Vec<Vec<(HyperParam, f64)>> = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push((axis.param, v));
                    q
                })
            })
            .collect();
    }
    points
}

/// Outcome of a grid search.
#[derive(Clone, Debug, PartialEq)]
pub struct CvOutcome {
    pub best: Method,
    pub best_point: Vec<(HyperParam, f64)>,
    /// Mean validation metric per grid point; `None` for failed points.
    pub scores: Vec<Option<f64>>,
}

/// k-fold search over `grid` for `method`.
///
/// Each grid point is scored by the mean validation metric across folds
/// (each fold's value is the mean over tasks). A point that fails on any
/// fold is dropped with a warning. Ties go to the earliest point.
pub fn cross_validate(
    data: &MultitaskDataset,
    method: &Method,
    grid: &[GridAxis],
    k: usize,
    seed: u64,
) -> Result<CvOutcome> {
    if grid.iter().any(|a| a.values.is_empty()) {
        return Err(Error::invalid("grid axes must be non-empty"));
    }
    let metric = metric_for(data)?;
    let folds = kfold(data, k, seed)?;
    let points = grid_points(grid, method);
    let candidates: Vec<Result<Method>> = points
        .iter()
        .map(|p| {
            let mut m = method.clone();
            for &(param, v) in p {
                param.apply(&mut m, v)?;
            }
            m.validate(data.dim())?;
            Ok(m)
        })
        .collect();
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..folds.len()).map(move |f| (p, f)))
        .collect();
    let fold_scores: Vec<Result<f64>> = par::map(&jobs, |&(p, f)| {
        let m = candidates[p].as_ref().map_err(|e| Error::invalid(e.to_string()))?;
        let (train, valid) = &folds[f];
        let fit = m.fit(train)?;
        Ok(finite_mean(&evaluate(&fit.model, valid, metric)?))
    });

    let mut scores = Vec::with_capacity(points.len());
    let mut last_err = None;
    for (p, chunk) in fold_scores.chunks(folds.len()).enumerate() {
        let mut total = 0.0;
        let mut failed = false;
        for r in chunk {
            match r {
                Ok(v) if v.is_finite() => total += v,
                Ok(_) => {
                    log::warn!("grid point {:?} gave an undefined validation metric; discarded", points[p]);
                    failed = true;
                    break;
                }
                Err(e) => {
                    log::warn!("grid point {:?} failed ({e}); discarded", points[p]);
                    last_err = Some(e.to_string());
                    failed = true;
                    break;
                }
            }
        }
        scores.push((!failed).then(|| total / folds.len() as f64));
    }

    let better = |a: f64, b: f64| if metric.higher_is_better() { a > b } else { a < b };
    let mut best: Option<usize> = None;
    for (p, s) in scores.iter().enumerate() {
        if let Some(v) = s {
            if best.is_none_or(|b| better(*v, scores[b].unwrap_or(f64::NAN))) {
                best = Some(p);
            }
        }
    }
    let Some(b) = best else {
        return Err(Error::Degenerate(match last_err {
            Some(e) => format!("every grid point failed; last error: {e}"),
            None => "every grid point failed".into(),
        }));
    };
    Ok(CvOutcome {
        best: candidates[b].as_ref().map_err(|e| Error::invalid(e.to_string()))?.clone(),
        best_point: points[b].clone(),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_syn2, SynConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5f64.sqrt(), epsilon = 1e-15);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[1.0, 1.0, -1.0], &[3.0, 2.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc(&[1.0, -1.0, 1.0, -1.0], &[0.5; 4]).unwrap(), 0.5);
        assert_eq!(auc(&[1.0, -1.0, 1.0, -1.0], &[0.9, 0.8, 0.3, 0.1]).unwrap(), 0.75);
        assert!(auc(&[1.0, 1.0], &[0.1, 0.2]).is_err());
    }

    /// Direct pair enumeration.
    fn auc_pairs(labels: &[f64], scores: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..labels.len() {
            for j in 0..labels.len() {
                if labels[i] > 0.0 && labels[j] <= 0.0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn spearman_examples() {
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 0.0]).unwrap(), -1.0, epsilon = 1e-15);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let s = aggregate_runs(&[vec![1.0], vec![3.0]], Metric::Rmse).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_abs_diff_eq!(s.std_error, 1.0, epsilon = 1e-15);
        assert_eq!(s.per_task_metric, vec![2.0]);
        let one = aggregate_runs(&[vec![1.0, 2.0]], Metric::Rmse).unwrap();
        assert_eq!((one.n_runs, one.std_error, one.mean), (1, 0.0, 1.5));
        let a = aggregate_runs(&[vec![1.0, 4.0], vec![2.0, 8.0], vec![0.5, 1.0]], Metric::Rmse).unwrap();
        let b = aggregate_runs(&[vec![0.5, 1.0], vec![1.0, 4.0], vec![2.0, 8.0]], Metric::Rmse).unwrap();
        assert_eq!(a.per_task_metric, b.per_task_metric);
        assert_abs_diff_eq!(a.mean, b.mean, epsilon = 1e-15);
        assert_abs_diff_eq!(a.std_error, b.std_error, epsilon = 1e-15);
        assert!(aggregate_runs(&[], Metric::Rmse).is_err());
        assert!(aggregate_runs(&[vec![1.0], vec![1.0, 2.0]], Metric::Rmse).is_err());
    }

    #[test]
    fn paired_t_known_value() {
        // d = (1, 2, 3): mean 2, sd 1, t = 2√3 on 2 dof → p = 0.07417990022744853
        let p = paired_t_test(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_abs_diff_eq!(p, 0.07417990022744853, epsilon = 1e-9);
        assert_eq!(paired_t_test(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(paired_t_test(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn grid_order_and_applicability() {
        let grid = vec![
            GridAxis { param: HyperParam::Gamma, values: vec![0.1, 1.0] },
            GridAxis { param: HyperParam::Lambda0Scale, values: vec![0.5, 2.0] },
        ];
        let sp = Method::from_name("spMTFL").unwrap();
        let pts = grid_points(&grid, &sp);
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[1], vec![(HyperParam::Gamma, 0.1), (HyperParam::Lambda0Scale, 2.0)]);
        let base = Method::from_name("MTFL").unwrap();
        assert_eq!(grid_points(&grid, &base).len(), 2);
        assert_eq!(grid_points(&[], &base), vec![Vec::new()]);
    }

    fn small_syn2(seed: u64) -> MultitaskDataset {
        generate_syn2(&SynConfig {
            n_tasks: 6,
            d: 6,
            n_per_task: 30,
            n_holdout_per_task: 0,
            noise_sd: 0.1,
            ..SynConfig::syn2(seed)
        })
        .unwrap()
        .data
    }

    #[test]
    fn cv_singleton_and_determinism() {
        let data = small_syn2(1);
        let m = Method::from_name("MMTL").unwrap();
        let grid = vec![GridAxis { param: HyperParam::Gamma, values: vec![0.3] }];
        let out = cross_validate(&data, &m, &grid, 3, 4).unwrap();
        assert_eq!(out.best.gamma(), 0.3);
        let grid = vec![GridAxis { param: HyperParam::Gamma, values: vec![1e-3, 1e-1, 10.0] }];
        let a = cross_validate(&data, &m, &grid, 3, 4).unwrap();
        let b = cross_validate(&data, &m, &grid, 3, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cv_avoids_huge_gamma_on_clean_data() {
        let data = small_syn2(2);
        let m = Method::from_name("ITL").unwrap();
        let grid = vec![GridAxis { param: HyperParam::Gamma, values: vec![1e6, 1e-3] }];
        let out = cross_validate(&data, &m, &grid, 3, 0).unwrap();
        assert_eq!(out.best.gamma(), 1e-3);
    }

    #[test]
    fn cv_ties_go_to_first_point() {
        let data = small_syn2(3);
        let m = Method::from_name("ITL").unwrap();
        let grid = vec![GridAxis { param: HyperParam::Gamma, values: vec![0.5, 0.5] }];
        let out = cross_validate(&data, &m, &grid, 3, 0).unwrap();
        assert_eq!(out.scores[0], out.scores[1]);
        assert_eq!(out.best_point, vec![(HyperParam::Gamma, 0.5)]);
    }

    #[test]
    fn cv_discards_failing_points() {
        let data = small_syn2(3);
        let m = Method::from_name("MTASO").unwrap();
        let grid = vec![
            GridAxis { param: HyperParam::H, values: vec![0.5, 2.0] },
        ];
        let out = cross_validate(&data, &m, &grid, 3, 0).unwrap();
        assert_eq!(out.scores[0], None);
        assert_eq!(out.best_point, vec![(HyperParam::H, 2.0)]);
        let bad = vec![GridAxis { param: HyperParam::Gamma, values: vec![-1.0] }];
        assert!(cross_validate(&data, &Method::from_name("ITL").unwrap(), &bad, 3, 0).is_err());
    }

    proptest! {
        #[test]
        fn auc_matches_pairs_and_is_rank_invariant(
            pts in proptest::collection::vec((any::<bool>(), -3i32..3), 2..30),
        ) {
            let labels: Vec<f64> = pts.iter().map(|(l, _)| if *l { 1.0 } else { -1.0 }).collect();
            let scores: Vec<f64> = pts.iter().map(|(_, s)| *s as f64).collect();
            prop_assume!(labels.iter().any(|&l| l > 0.0) && labels.iter().any(|&l| l < 0.0));
            let a = auc(&labels, &scores).unwrap();
            prop_assert!((a - auc_pairs(&labels, &scores)).abs() < 1e-12);
            let warped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 5.0).collect();
            prop_assert!((a - auc(&labels, &warped).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn rmse_nonnegative_zero_iff_equal(
            a in proptest::collection::vec(-5.0f64..5.0, 1..20),
            bump in 0usize..20,
            scale in -4.0f64..4.0,
        ) {
            prop_assert_eq!(rmse(&a, &a).unwrap(), 0.0);
            let mut b = a.clone();
            let i = bump % b.len();
            b[i] += 1.0;
            prop_assert!(rmse(&a, &b).unwrap() > 0.0);
            let sa: Vec<f64> = a.iter().map(|v| v * scale).collect();
            let sb: Vec<f64> = b.iter().map(|v| v * scale).collect();
            prop_assert!((rmse(&sa, &sb).unwrap() - scale.abs() * rmse(&a, &b).unwrap()).abs() < 1e-9);
        }
    }
}
