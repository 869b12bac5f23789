//! Synthetic generators, the CSV loader, and per-task train/test splitting.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, MultitaskDataset, TaskDataset, TaskKind};
use crate::seeds::{rng_for, Purpose};

/// Settings for both synthetic generators.
///
/// `n_per_task` rows per task are meant for training; `n_holdout_per_task`
/// extra rows are generated from the same distribution so a split can hold
/// them out for testing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynConfig {
    pub seed: u64,
    pub n_tasks: usize,
    pub n_per_task: usize,
    pub n_holdout_per_task: usize,
    pub d: usize,
    pub n_groups: usize,
    /// Rank of each group's parameter basis.
    pub group_rank: usize,
    pub sigma_easy: f64,
    pub sigma_hard: f64,
    pub hard_fraction: f64,
    /// Noise level for syn2.
    pub noise_sd: f64,
}

impl SynConfig {
    /// 30 tasks in 3 groups, 15 training rows, 20 features, σ = 5 / 25.
    pub fn syn1(seed: u64) -> Self {
        Self {
            seed,
            n_tasks: 30,
            n_per_task: 15,
            n_holdout_per_task: 100,
            d: 20,
            n_groups: 3,
            group_rank: 4,
            sigma_easy: 5.0,
            sigma_hard: 25.0,
            hard_fraction: 1.0 / 3.0,
            noise_sd: 1.0,
        }
    }

    /// 30 tasks, 15 training rows, 30 features, nested supports.
    pub fn syn2(seed: u64) -> Self {
        Self {
            d: 30,
            n_groups: 1,
            ..Self::syn1(seed)
        }
    }

    pub fn rows_per_task(&self) -> usize {
        self.n_per_task + self.n_holdout_per_task
    }
}

/// A generated dataset with its ground truth.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub data: MultitaskDataset,
    pub true_params: ModelParams,
    /// Noise standard deviation of each task.
    pub noise_sd: Vec<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn regression_task(
    rng: &mut ChaCha8Rng,
    id: usize,
    rows: usize,
    w: &DVector<f64>,
    sigma: f64,
) -> Result<TaskDataset> {
    let x = DMatrix::from_fn(rows, w.len(), |_, _| normal(rng));
    let noise = DVector::from_fn(rows, |_, _| sigma * normal(rng));
    let y = &x * w + noise;
    TaskDataset::new(id, x, y, TaskKind::Regression)
}

/// Grouped tasks with easy (low-noise) and hard (high-noise) members.
///
/// Each group draws a `d × group_rank` Gaussian basis; a task's parameter is
/// that basis times Gaussian coefficients. Tasks are assigned to groups in
/// contiguous blocks, and a seeded random `hard_fraction` of them get noise
/// `sigma_hard`, the rest `sigma_easy`.
pub fn generate_syn1(cfg: &SynConfig) -> Result<Synthetic> {
    if cfg.n_tasks == 0 || cfg.d == 0 || cfg.rows_per_task() == 0 {
        return Err(Error::invalid("syn1 needs tasks, features and rows"));
    }
    if cfg.n_groups == 0 || cfg.n_groups > cfg.n_tasks {
        return Err(Error::invalid("syn1 needs 1 ≤ n_groups ≤ n_tasks"));
    }
    if !(0.0..=1.0).contains(&cfg.hard_fraction) {
        return Err(Error::invalid("hard_fraction must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bases: Vec<DMatrix<f64>> = (0..cfg.n_groups)
        .map(|_| DMatrix::from_fn(cfg.d, cfg.group_rank, |_, _| normal(&mut rng)))
        .collect();
    let n_hard = (cfg.hard_fraction * cfg.n_tasks as f64).round() as usize;
    let mut order: Vec<usize> = (0..cfg.n_tasks).collect();
    order.shuffle(&mut rng);
    let mut hard = vec![false; cfg.n_tasks];
    for &t in &order[..n_hard] {
        hard[t] = true;
    }
    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    let mut params = Vec::with_capacity(cfg.n_tasks);
    let mut sds = Vec::with_capacity(cfg.n_tasks);
    for (t, &is_hard) in hard.iter().enumerate() {
        let g = t * cfg.n_groups / cfg.n_tasks;
        let coef = DVector::from_fn(cfg.group_rank, |_, _| normal(&mut rng));
        let w = &bases[g] * coef;
        let sd = if is_hard { cfg.sigma_hard } else { cfg.sigma_easy };
        tasks.push(regression_task(&mut rng, t, cfg.rows_per_task(), &w, sd)?);
        params.push(w);
        sds.push(sd);
    }
    Ok(Synthetic {
        data: MultitaskDataset::new(tasks)?,
        true_params: ModelParams::from_columns(&params)?,
        noise_sd: sds,
    })
}

/// Nested-support tasks: task `t` (1-based) uses the first `t` entries of a
/// single Gaussian vector `s` and zeros elsewhere.
pub fn generate_syn2(cfg: &SynConfig) -> Result<Synthetic> {
    if cfg.d != cfg.n_tasks {
        return Err(Error::invalid(format!(
            "syn2 needs d = n_tasks (got d = {}, n_tasks = {})",
            cfg.d, cfg.n_tasks
        )));
    }
    if cfg.n_tasks == 0 || cfg.rows_per_task() == 0 {
        return Err(Error::invalid("syn2 needs tasks and rows"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = DVector::from_fn(cfg.d, |_, _| normal(&mut rng));
    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    let mut params = Vec::with_capacity(cfg.n_tasks);
    for t in 0..cfg.n_tasks {
        let w = DVector::from_fn(cfg.d, |i, _| if i <= t { s[i] } else { 0.0 });
        tasks.push(regression_task(&mut rng, t, cfg.rows_per_task(), &w, cfg.noise_sd)?);
        params.push(w);
    }
    Ok(Synthetic {
        data: MultitaskDataset::new(tasks)?,
        true_params: ModelParams::from_columns(&params)?,
        noise_sd: vec![cfg.noise_sd; cfg.n_tasks],
    })
}

/// Column layout of a CSV dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub task_column: String,
    pub target_column: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub categorical_columns: Vec<String>,
    /// Columns to use as features; all remaining columns when absent.
    #[serde(default)]
    pub feature_columns: Option<Vec<String>>,
    #[serde(default)]
    pub add_bias: bool,
}

enum ColumnRole {
    Numeric,
    Categorical(Vec<String>),
}

/// Loads a multitask dataset from a headed, comma-delimited UTF-8 file.
///
/// Rows are grouped by the task column in order of first appearance. Task
/// ids are the task column's integer values when every value is a
/// nonnegative integer, otherwise the first-appearance ordinal. Each
/// categorical column expands into one indicator per observed value, in
/// first-appearance order; the bias column, when requested, comes last.
pub fn load_csv_dataset(path: &Path, schema: &CsvSchema) -> Result<MultitaskDataset> {
    let shown = path.display().to_string();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: shown.clone(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| parse_err(0, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("unknown schema column '{name}'")))
    };
    let task_col = find(&schema.task_column)?;
    let target_col = find(&schema.target_column)?;
    for c in &schema.categorical_columns {
        find(c)?;
    }
    let feature_cols: Vec<usize> = match &schema.feature_columns {
        Some(cols) => cols.iter().map(|c| find(c)).collect::<Result<_>>()?,
        None => (0..header.len()).filter(|&i| i != task_col && i != target_col).collect(),
    };
    if let Some(c) = schema
        .categorical_columns
        .iter()
        .find(|c| !feature_cols.iter().any(|&i| &header[i] == *c))
    {
        return Err(parse_err(1, format!("categorical column '{c}' is not a feature column")));
    }

    let mut records: Vec<(usize, csv::StringRecord)> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        records.push((line, rec));
    }
    if records.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }

    let mut roles: Vec<ColumnRole> = Vec::with_capacity(feature_cols.len());
    for &c in &feature_cols {
        if schema.categorical_columns.iter().any(|n| n == &header[c]) {
            let mut levels: Vec<String> = Vec::new();
            for (_, rec) in &records {
                let v = rec[c].trim();
                if !levels.iter().any(|l| l == v) {
                    levels.push(v.to_string());
                }
            }
            roles.push(ColumnRole::Categorical(levels));
        } else {
            roles.push(ColumnRole::Numeric);
        }
    }
    let width: usize = roles
        .iter()
        .map(|r| match r {
            ColumnRole::Numeric => 1,
            ColumnRole::Categorical(levels) => levels.len(),
        })
        .sum::<usize>()
        + usize::from(schema.add_bias);
    if width == 0 {
        return Err(parse_err(1, "schema yields no feature columns".into()));
    }

    let parse_num = |line: usize, col: usize, raw: &str| {
        raw.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
            parse_err(line, format!("column '{}': '{}' is not a number", header[col], raw))
        })
    };

    let mut task_keys: Vec<String> = Vec::new();
    let mut key_index: HashMap<String, usize> = HashMap::new();
    let mut rows_by_task: Vec<Vec<(Vec<f64>, f64)>> = Vec::new();
    for (line, rec) in &records {
        let key = rec[task_col].trim().to_string();
        let idx = *key_index.entry(key.clone()).or_insert_with(|| {
            task_keys.push(key);
            rows_by_task.push(Vec::new());
            task_keys.len() - 1
        });
        let mut feats = Vec::with_capacity(width);
        for (role, &c) in roles.iter().zip(&feature_cols) {
            match role {
                ColumnRole::Numeric => feats.push(parse_num(*line, c, &rec[c])?),
                ColumnRole::Categorical(levels) => {
                    let v = rec[c].trim();
                    feats.extend(levels.iter().map(|l| if l == v { 1.0 } else { 0.0 }));
                }
            }
        }
        if schema.add_bias {
            feats.push(1.0);
        }
        let target = parse_num(*line, target_col, &rec[target_col])?;
        rows_by_task[idx].push((feats, target));
    }

    let numeric_ids: Option<Vec<usize>> = task_keys.iter().map(|k| k.parse::<usize>().ok()).collect();
    let mut tasks = Vec::with_capacity(task_keys.len());
    for (i, rows) in rows_by_task.into_iter().enumerate() {
        let id = numeric_ids.as_ref().map_or(i, |ids| ids[i]);
        let n = rows.len();
        let x = DMatrix::from_fn(n, width, |r, c| rows[r].0[c]);
        let y = DVector::from_fn(n, |r, _| rows[r].1);
        let task = TaskDataset::new(id, x, y, schema.kind)
            .map_err(|e| parse_err(0, format!("task '{}': {e}", task_keys[i])))?;
        tasks.push(task);
    }
    MultitaskDataset::new(tasks)
}

/// Writes a dataset in the loader's format: `task,x0,…,x{d−1},y`.
pub fn write_csv_dataset(data: &MultitaskDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let mut header = vec!["task".to_string()];
    header.extend((0..data.dim()).map(|j| format!("x{j}")));
    header.push("y".into());
    w.write_record(&header).map_err(|e| Error::Io(e.into()))?;
    for task in data.tasks() {
        for i in 0..task.n_examples() {
            let mut rec = vec![task.task_id().to_string()];
            rec.extend(task.x().row(i).iter().map(|v| format!("{v:.16e}")));
            rec.push(format!("{:.16e}", task.y()[i]));
            w.write_record(&rec).map_err(|e| Error::Io(e.into()))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// How many rows of each task go to training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainSize {
    Fraction(f64),
    Count(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: TrainSize,
    pub stratified: bool,
    pub n_repeats: usize,
    pub seed: u64,
}

pub type SplitPair = (MultitaskDataset, MultitaskDataset);

fn train_count(task: &TaskDataset, size: TrainSize) -> Result<usize> {
    let n = task.n_examples();
    match size {
        TrainSize::Count(c) => {
            if c == 0 || c >= n {
                Err(Error::invalid(format!(
                    "task {}: train count {c} must lie in 1..{n}",
                    task.task_id()
                )))
            } else {
                Ok(c)
            }
        }
        TrainSize::Fraction(f) => {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::invalid(format!("train fraction {f} must lie in (0, 1)")));
            }
            Ok(((f * n as f64).round() as usize).clamp(1, n - 1))
        }
    }
}

fn partition_task(
    task: &TaskDataset,
    size: TrainSize,
    stratified: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = task.n_examples();
    if n < 2 {
        return Err(Error::invalid(format!("task {} has fewer than 2 examples", task.task_id())));
    }
    let n_train = train_count(task, size)?;
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n - n_train);
    if stratified {
        if task.kind() != TaskKind::BinaryClassification {
            return Err(Error::invalid("stratified splits need classification tasks"));
        }
        let mut pos: Vec<usize> = (0..n).filter(|&i| task.y()[i] > 0.0).collect();
        let mut neg: Vec<usize> = (0..n).filter(|&i| task.y()[i] <= 0.0).collect();
        pos.shuffle(rng);
        neg.shuffle(rng);
        let n_pos = ((n_train * pos.len()) as f64 / n as f64).round() as usize;
        let n_pos = n_pos.min(pos.len()).max(n_train.saturating_sub(neg.len()));
        let n_neg = n_train - n_pos;
        train.extend_from_slice(&pos[..n_pos]);
        train.extend_from_slice(&neg[..n_neg]);
        test.extend_from_slice(&pos[n_pos..]);
        test.extend_from_slice(&neg[n_neg..]);
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

fn subset(data: &MultitaskDataset, rows: &[Vec<usize>]) -> Result<MultitaskDataset> {
    MultitaskDataset::new(
        data.tasks()
            .iter()
            .zip(rows)
            .map(|(t, r)| t.select_rows(r))
            .collect::<Result<_>>()?,
    )
}

/// One split for a given repeat index.
pub fn split_once(data: &MultitaskDataset, spec: &SplitSpec, repeat: usize) -> Result<SplitPair> {
    let mut rng = rng_for(spec.seed, repeat as u64, Purpose::Split);
    let mut trains = Vec::with_capacity(data.n_tasks());
    let mut tests = Vec::with_capacity(data.n_tasks());
    for task in data.tasks() {
        let (tr, te) = partition_task(task, spec.train, spec.stratified, &mut rng)?;
        trains.push(tr);
        tests.push(te);
    }
    Ok((subset(data, &trains)?, subset(data, &tests)?))
}

/// `n_repeats` independent seeded per-task splits.
pub fn split(data: &MultitaskDataset, spec: &SplitSpec) -> Result<Vec<SplitPair>> {
    (0..spec.n_repeats).map(|r| split_once(data, spec, r)).collect()
}

/// Per-task k-fold partition into (train, validation) pairs.
pub fn kfold(data: &MultitaskDataset, k: usize, seed: u64) -> Result<Vec<SplitPair>> {
    if k < 2 {
        return Err(Error::invalid("k-fold needs k ≥ 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds_per_task: Vec<Vec<Vec<usize>>> = Vec::with_capacity(data.n_tasks());
    for task in data.tasks() {
        let n = task.n_examples();
        if n < k {
            return Err(Error::invalid(format!(
                "task {} has {n} examples, fewer than k = {k}",
                task.task_id()
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        folds_per_task.push(
            (0..k)
                .map(|j| {
                    let mut f = idx[j * n / k..(j + 1) * n / k].to_vec();
                    f.sort_unstable();
                    f
                })
                .collect(),
        );
    }
    (0..k)
        .map(|j| {
            let mut train_rows = Vec::with_capacity(data.n_tasks());
            let mut valid_rows = Vec::with_capacity(data.n_tasks());
            for folds in &folds_per_task {
                valid_rows.push(folds[j].clone());
                let mut tr: Vec<usize> = folds
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != j)
                    .flat_map(|(_, f)| f.iter().copied())
                    .collect();
                tr.sort_unstable();
                train_rows.push(tr);
            }
            Ok((subset(data, &train_rows)?, subset(data, &valid_rows)?))
        })
        .collect()
}
