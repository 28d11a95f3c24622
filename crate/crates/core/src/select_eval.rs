//! Feature ranking, baselines and the evaluation harness.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, MultiTaskDataset, TaskData};
use crate::error::{Error, Result};
use crate::linalg;
use crate::solver::{self, Hyperparams, SelectionModel};

/// Floor applied to within-class variances in [`fisher_score`].
pub const FISHER_VARIANCE_FLOOR: f64 = 1e-12;

/// Features ordered by non-increasing score; equal scores keep index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking {
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
}

impl FeatureRanking {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        // stable sort: ties stay in ascending index order
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        Self { order, scores }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Ranks task `task`'s features by the row norms of its selection matrix.
pub fn rank_features(model: &SelectionModel, task: usize) -> Result<FeatureRanking> {
    let tm = model.tasks.get(task).ok_or_else(|| {
        Error::invalid(format!("task index {task} out of range (model has {} tasks)", model.tasks.len()))
    })?;
    Ok(FeatureRanking::from_scores(tm.w.row_iter().map(|r| r.norm()).collect()))
}

/// The first `count` features of the ranking.
pub fn select_top(ranking: &FeatureRanking, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > ranking.len() {
        return Err(Error::invalid(format!(
            "feature count {count} out of range 1..={}",
            ranking.len()
        )));
    }
    Ok(ranking.order[..count].to_vec())
}

/// Fisher score of every feature over the labeled samples:
/// `Σ_c n_c (μ_c − μ)² / Σ_c n_c σ_c²` with each `σ_c²` floored at
/// [`FISHER_VARIANCE_FLOOR`].
pub fn fisher_score(task: &TaskData) -> Result<Vec<f64>> {
    let labeled = task.labeled_indices();
    let c = task.n_classes();
    let mut members = vec![Vec::new(); c];
    for &i in &labeled {
        if let Some(k) = task.class_of(i) {
            members[k].push(i);
        }
    }
    let present = members.iter().filter(|m| !m.is_empty()).count();
    if present < 2 {
        return Err(Error::invalid(format!(
            "task '{}': Fisher score needs two labeled classes, found {present}",
            task.name()
        )));
    }
    let x = task.x();
    let n = labeled.len() as f64;
    Ok((0..task.dim())
        .map(|j| {
            let mean = labeled.iter().map(|&i| x[(j, i)]).sum::<f64>() / n;
            let mut between = 0.0;
            let mut within = 0.0;
            for m in members.iter().filter(|m| !m.is_empty()) {
                let nc = m.len() as f64;
                let mu = m.iter().map(|&i| x[(j, i)]).sum::<f64>() / nc;
                let var = m.iter().map(|&i| (x[(j, i)] - mu).powi(2)).sum::<f64>() / nc;
                between += nc * (mu - mean).powi(2);
                within += nc * var.max(FISHER_VARIANCE_FLOOR);
            }
            between / within
        })
        .collect())
}

/// One-vs-rest ridge regression onto 0/1 class indicators, bias unpenalized.
#[derive(Debug, Clone, PartialEq)]
pub struct LsClassifier {
    /// p × c
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Fits `min ‖Xᵀ W + 1 bᵀ − Y‖² + ridge ‖W‖²` on `x` (p × n, one sample
/// per column) and `y` (n × c).
pub fn train_ls_classifier(x: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<LsClassifier> {
    if !(ridge > 0.0) {
        return Err(Error::invalid(format!("ridge = {ridge} must be positive")));
    }
    let n = x.ncols();
    if n == 0 {
        return Err(Error::invalid("classifier needs labeled training data"));
    }
    if y.nrows() != n {
        return Err(Error::DimensionMismatch(format!("{n} samples but {} label rows", y.nrows())));
    }
    let x_mean = x.column_mean();
    let y_mean = y.row_mean().transpose();
    let mut xc = x.clone();
    for mut col in xc.column_iter_mut() {
        col -= &x_mean;
    }
    let mut yc = y.clone();
    for mut row in yc.row_iter_mut() {
        row -= y_mean.transpose();
    }
    let p = x.nrows();
    let mut gram = &xc * xc.transpose();
    for i in 0..p {
        gram[(i, i)] += ridge;
    }
    let weights = linalg::spd_solve(gram, &(&xc * yc), "classifier normal equations")?;
    let bias = y_mean - weights.transpose() * x_mean;
    Ok(LsClassifier { weights, bias })
}

impl LsClassifier {
    /// Decision values, m × c, for `x` (p × m).
    pub fn decision_values(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.transpose() * &self.weights;
        for mut row in out.row_iter_mut() {
            row += self.bias.transpose();
        }
        out
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<usize> {
        let dv = self.decision_values(x);
        dv.row_iter()
            .map(|r| {
                let mut best = 0;
                for k in 1..r.len() {
                    if r[k] > r[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// Average precision of a scored list: mean, over relevant items, of the
/// precision at each relevant item's rank. Items are ranked by descending
/// score with ties broken by index.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Result<f64> {
    if scores.len() != relevant.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} relevance flags",
            scores.len(),
            relevant.len()
        )));
    }
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(Error::invalid("average precision needs at least one relevant item"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if relevant[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

/// Mean over classes (with at least one positive) of per-class AP, ranking
/// samples by that class's decision value.
pub fn mean_average_precision(decision: &DMatrix<f64>, classes: &[usize]) -> Result<f64> {
    let mut aps = Vec::new();
    for k in 0..decision.ncols() {
        let relevant: Vec<bool> = classes.iter().map(|&c| c == k).collect();
        if !relevant.iter().any(|&r| r) {
            continue;
        }
        let scores: Vec<f64> = decision.column(k).iter().copied().collect();
        aps.push(average_precision(&scores, &relevant)?);
    }
    if aps.is_empty() {
        return Err(Error::invalid("no class has a positive test sample"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sfmc,
    Fisher,
    AllFeatures,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Sfmc => "sfmc",
            Method::Fisher => "fisher",
            Method::AllFeatures => "all_features",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sfmc" => Ok(Method::Sfmc),
            "fisher" => Ok(Method::Fisher),
            "all" | "all_features" | "allfeatures" => Ok(Method::AllFeatures),
            other => Err(Error::invalid(format!("unknown method '{other}'"))),
        }
    }
}

/// Regularization values enumerated by the grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub gammas: Vec<f64>,
}

/// `{1e-6, 1e-4, …, 1e6}`.
pub fn log_grid_values() -> Vec<f64> {
    (-3..=3).map(|e| 10f64.powi(2 * e)).collect()
}

impl ParamGrid {
    pub fn single(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { alphas: vec![alpha], betas: vec![beta], gammas: vec![gamma] }
    }

    pub fn full() -> Self {
        Self { alphas: log_grid_values(), betas: log_grid_values(), gammas: log_grid_values() }
    }

    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &alpha in &self.alphas {
            for &beta in &self.betas {
                for &gamma in &self.gammas {
                    out.push(GridPoint { alpha, beta, gamma });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub grid: ParamGrid,
    /// Everything except alpha/beta/gamma is taken from here.
    pub base: Hyperparams,
    pub fractions: Vec<f64>,
    pub feature_counts: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub test_fraction: f64,
    pub ridge: f64,
    /// Adds wall-clock timings; reports are then no longer reproducible.
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Sfmc, Method::Fisher, Method::AllFeatures],
            grid: ParamGrid::single(1.0, 1.0, 1.0),
            base: Hyperparams::default(),
            fractions: vec![0.05, 0.25, 1.0],
            feature_counts: vec![5, 10],
            repeats: 5,
            seed: 0,
            test_fraction: 0.5,
            ridge: 1.0,
            record_timing: false,
        }
    }
}

/// Aggregated result of one (method, fraction, feature count) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub fraction: f64,
    pub count: usize,
    pub map_mean: f64,
    pub map_std: f64,
    pub map_per_repeat: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recovery_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recovery_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recovery_per_repeat: Option<Vec<f64>>,
    /// Grid point with the best mean MAP (SFMC only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<GridPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtime_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub repeats: usize,
    pub test_fraction: f64,
    pub cells: Vec<CellResult>,
}

impl ExperimentReport {
    pub fn cell(&self, method: Method, fraction: f64, count: usize) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.fraction == fraction && c.count == count)
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report serializes");
        out.push('\n');
        out
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<13} {:>8} {:>6} {:>9} {:>9} {:>9}  {}",
            "method", "fraction", "count", "MAP", "std", "recovery", "params"
        );
        for c in &self.cells {
            let recovery = c.recovery_mean.map_or_else(|| "-".to_owned(), |r| format!("{r:.4}"));
            let params = c
                .params
                .map_or_else(|| "-".to_owned(), |p| format!("a={:e} b={:e} g={:e}", p.alpha, p.beta, p.gamma));
            let _ = writeln!(
                out,
                "{:<13} {:>8} {:>6} {:>9.4} {:>9.4} {:>9}  {}",
                c.method.label(),
                c.fraction,
                c.count,
                c.map_mean,
                c.map_std,
                recovery,
                params
            );
        }
        out
    }

    /// One line per (cell, repeat).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,fraction,count,repeat,map,recovery\n");
        for c in &self.cells {
            for (r, m) in c.map_per_repeat.iter().enumerate() {
                let rec = c
                    .recovery_per_repeat
                    .as_ref()
                    .map_or_else(String::new, |v| v[r].to_string());
                let _ = writeln!(out, "{},{},{},{},{},{}", c.method.label(), c.fraction, c.count, r, m, rec);
            }
        }
        out
    }
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// MAP of a classifier trained on the selected features of `train`'s
/// labeled samples, scored on `test`.
pub fn evaluate_selection(train: &TaskData, test: &TaskData, features: &[usize], ridge: f64) -> Result<f64> {
    let labeled = train.labeled_indices();
    let xs = train.x().select_rows(features.iter()).select_columns(labeled.iter());
    let ys = train.y().select_rows(labeled.iter());
    let clf = train_ls_classifier(&xs, &ys, ridge)?;
    let xt = test.x().select_rows(features.iter());
    let classes: Vec<usize> = (0..test.n_samples())
        .map(|i| test.class_of(i).ok_or_else(|| Error::invalid("test sample without label")))
        .collect::<Result<_>>()?;
    mean_average_precision(&clf.decision_values(&xt), &classes)
}

fn recovery_precision(selected: &[usize], support: &[usize]) -> f64 {
    let truth: BTreeSet<usize> = support.iter().copied().collect();
    let hits = selected.iter().filter(|j| truth.contains(j)).count();
    hits as f64 / selected.len().min(support.len()) as f64
}

/// Per-repeat metrics keyed by (method, fraction index, grid index, count).
struct RepeatOutcome {
    // (method, fraction idx, grid idx, count) -> (map, recovery, millis)
    entries: Vec<((Method, usize, usize, usize), (f64, Option<f64>, f64))>,
}

fn run_repeat(ds: &MultiTaskDataset, cfg: &ExperimentConfig, repeat: usize) -> Result<RepeatOutcome> {
    let d = ds.dim();
    let (train, test) = dataset::split_train_test(ds, cfg.test_fraction, mix_seed(cfg.seed, repeat as u64, 0))?;
    let grid = cfg.grid.points();
    let mut entries = Vec::new();
    for (fi, &fraction) in cfg.fractions.iter().enumerate() {
        let masked =
            dataset::apply_label_fraction(&train, fraction, mix_seed(cfg.seed, repeat as u64, fi as u64 + 1))?;
        let mut score_and_record = |method: Method, gi: usize, rankings: &[FeatureRanking], counts: &[usize], ms: f64| -> Result<()> {
            for &count in counts {
                let mut maps = Vec::with_capacity(ds.n_tasks());
                let mut recs = Vec::with_capacity(ds.n_tasks());
                for ((tr, te), ranking) in masked.tasks().iter().zip(test.tasks()).zip(rankings) {
                    let selected = select_top(ranking, count)?;
                    maps.push(evaluate_selection(tr, te, &selected, cfg.ridge)?);
                    if let Some(support) = ds.support() {
                        recs.push(recovery_precision(&selected, support));
                    }
                }
                let map = maps.iter().sum::<f64>() / maps.len() as f64;
                let rec = (!recs.is_empty()).then(|| recs.iter().sum::<f64>() / recs.len() as f64);
                entries.push(((method, fi, gi, count), (map, rec, ms)));
            }
            Ok(())
        };
        for &method in &cfg.methods {
            match method {
                Method::Sfmc => {
                    for (gi, gp) in grid.iter().enumerate() {
                        let hp = Hyperparams { alpha: gp.alpha, beta: gp.beta, gamma: gp.gamma, ..cfg.base.clone() };
                        let start = Instant::now();
                        let model = solver::fit(&masked, &hp)?;
                        let rankings = (0..ds.n_tasks())
                            .map(|l| rank_features(&model, l))
                            .collect::<Result<Vec<_>>>()?;
                        let ms = start.elapsed().as_secs_f64() * 1e3;
                        score_and_record(method, gi, &rankings, &cfg.feature_counts, ms)?;
                    }
                }
                Method::Fisher => {
                    let start = Instant::now();
                    let rankings = masked
                        .tasks()
                        .iter()
                        .map(|t| fisher_score(t).map(FeatureRanking::from_scores))
                        .collect::<Result<Vec<_>>>()?;
                    let ms = start.elapsed().as_secs_f64() * 1e3;
                    score_and_record(method, 0, &rankings, &cfg.feature_counts, ms)?;
                }
                Method::AllFeatures => {
                    let rankings = vec![FeatureRanking::from_scores(vec![0.0; d]); ds.n_tasks()];
                    score_and_record(method, 0, &rankings, &[d], 0.0)?;
                }
            }
        }
    }
    Ok(RepeatOutcome { entries })
}

/// Runs the label-fraction × feature-count protocol for every method.
///
/// Each repeat draws a fresh stratified train/test split and fresh label
/// masks. For SFMC the reported cell is the grid point with the best mean
/// MAP over repeats. Repeats run in parallel; results do not depend on
/// scheduling.
pub fn run_experiment(ds: &MultiTaskDataset, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    if cfg.repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    if cfg.methods.is_empty() || cfg.fractions.is_empty() {
        return Err(Error::invalid("need at least one method and one label fraction"));
    }
    if cfg.methods.iter().any(|&m| m != Method::AllFeatures) && cfg.feature_counts.is_empty() {
        return Err(Error::invalid("need at least one feature count"));
    }
    if let Some(&bad) = cfg.feature_counts.iter().find(|&&c| c == 0 || c > ds.dim()) {
        return Err(Error::invalid(format!("feature count {bad} out of range 1..={}", ds.dim())));
    }
    if cfg.methods.contains(&Method::Sfmc) && cfg.grid.points().is_empty() {
        return Err(Error::invalid("empty hyperparameter grid"));
    }
    cfg.base.validate()?;

    let outcomes = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| run_repeat(ds, cfg, r))
        .collect::<Result<Vec<_>>>()?;

    let grid = cfg.grid.points();
    let mut methods = cfg.methods.clone();
    methods.dedup();
    let mut cells = Vec::new();
    for &method in &methods {
        for (fi, &fraction) in cfg.fractions.iter().enumerate() {
            let counts: Vec<usize> = if method == Method::AllFeatures { vec![ds.dim()] } else { cfg.feature_counts.clone() };
            let grid_len = if method == Method::Sfmc { grid.len() } else { 1 };
            for &count in &counts {
                let collect = |gi: usize| -> Vec<(f64, Option<f64>, f64)> {
                    outcomes
                        .iter()
                        .map(|o| {
                            o.entries
                                .iter()
                                .find(|(key, _)| *key == (method, fi, gi, count))
                                .map(|(_, v)| *v)
                                .expect("every repeat records every cell")
                        })
                        .collect()
                };
                let mut best: Option<(usize, Vec<(f64, Option<f64>, f64)>, f64)> = None;
                for gi in 0..grid_len {
                    let vals = collect(gi);
                    let mean = vals.iter().map(|v| v.0).sum::<f64>() / vals.len() as f64;
                    if best.as_ref().is_none_or(|b| mean > b.2) {
                        best = Some((gi, vals, mean));
                    }
                }
                let (gi, vals, _) = best.expect("grid is non-empty");
                let maps: Vec<f64> = vals.iter().map(|v| v.0).collect();
                let (map_mean, map_std) = mean_std(&maps);
                let recs: Option<Vec<f64>> = vals.iter().map(|v| v.1).collect();
                let (recovery_mean, recovery_std) = match &recs {
                    Some(r) => {
                        let (m, s) = mean_std(r);
                        (Some(m), Some(s))
                    }
                    None => (None, None),
                };
                let runtime_ms =
                    cfg.record_timing.then(|| vals.iter().map(|v| v.2).sum::<f64>() / vals.len() as f64);
                cells.push(CellResult {
                    method,
                    fraction,
                    count,
                    map_mean,
                    map_std,
                    map_per_repeat: maps,
                    recovery_mean,
                    recovery_std,
                    recovery_per_repeat: recs,
                    params: (method == Method::Sfmc).then(|| grid[gi]),
                    runtime_ms,
                });
            }
        }
    }
    Ok(ExperimentReport { seed: cfg.seed, repeats: cfg.repeats, test_fraction: cfg.test_fraction, cells })
}
