//! Multi-task data model, manifest ingestion and the synthetic generator.
//!
//! Feature files store one sample per row; in memory a task's features are
//! held as a `d × n` matrix with one sample per column. The conversion
//! happens in [`TaskData::from_sample_rows`] and [`TaskData::sample_rows`].

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One task: features, (partial) one-hot labels and the labeled mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    name: String,
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    labeled: Vec<bool>,
}

impl TaskData {
    /// Builds and validates a task from a `d × n` feature matrix, an `n × c`
    /// label matrix and the labeled mask.
    pub fn new(
        name: impl Into<String>,
        x: DMatrix<f64>,
        y: DMatrix<f64>,
        labeled: Vec<bool>,
    ) -> Result<Self> {
        let name = name.into();
        let n = x.ncols();
        if n == 0 || x.nrows() == 0 {
            return Err(Error::invalid(format!("task '{name}' has no samples or no features")));
        }
        if y.nrows() != n || labeled.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "task '{name}': {n} samples but {} label rows and {} mask entries",
                y.nrows(),
                labeled.len()
            )));
        }
        if y.ncols() == 0 {
            return Err(Error::invalid(format!("task '{name}' has no classes")));
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("task '{name}': non-finite feature value {v}")));
        }
        for i in 0..n {
            let row = y.row(i);
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::invalid(format!("task '{name}': label row {i} has entries outside {{0,1}}")));
            }
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            if labeled[i] && ones != 1 {
                return Err(Error::invalid(format!(
                    "task '{name}': labeled sample {i} has {ones} nonzero labels, expected exactly 1"
                )));
            }
            if !labeled[i] && ones != 0 {
                return Err(Error::invalid(format!(
                    "task '{name}': unlabeled sample {i} has a nonzero label row"
                )));
            }
        }
        if !labeled.iter().any(|&b| b) {
            return Err(Error::invalid(format!("task '{name}' has no labeled samples")));
        }
        for j in 0..x.nrows() {
            let row = x.row(j);
            let first = row[0];
            if row.iter().all(|&v| v == first) {
                log::warn!("task '{name}': feature {j} is constant across all samples");
            }
        }
        Ok(Self { name, x, y, labeled })
    }

    /// Builds a task from sample-per-row data, the on-disk orientation.
    pub fn from_sample_rows(
        name: impl Into<String>,
        features: &[Vec<f64>],
        labels: &[Vec<f64>],
        mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        let name = name.into();
        let n = features.len();
        if n == 0 {
            return Err(Error::invalid(format!("task '{name}' has no samples")));
        }
        let d = features[0].len();
        if features.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch(format!("task '{name}': ragged feature rows")));
        }
        let c = labels.first().map_or(0, Vec::len);
        if labels.iter().any(|r| r.len() != c) {
            return Err(Error::DimensionMismatch(format!("task '{name}': ragged label rows")));
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "task '{name}': {n} feature rows but {} label rows",
                labels.len()
            )));
        }
        let x = DMatrix::from_fn(d, n, |j, i| features[i][j]);
        let y = DMatrix::from_fn(n, c, |i, k| labels[i][k]);
        let labeled = match mask {
            Some(m) => m,
            None => (0..n).map(|i| y.row(i).iter().any(|&v| v != 0.0)).collect(),
        };
        Self::new(name, x, y, labeled)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Feature matrix, `d × n` (one sample per column).
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Label matrix, `n × c`; unlabeled rows are zero.
    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn labeled_mask(&self) -> &[bool] {
        &self.labeled
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled.iter().filter(|&&b| b).count()
    }

    pub fn n_classes(&self) -> usize {
        self.y.ncols()
    }

    /// Class of sample `i`, or `None` if it is unlabeled.
    pub fn class_of(&self, i: usize) -> Option<usize> {
        if !self.labeled[i] {
            return None;
        }
        self.y.row(i).iter().position(|&v| v == 1.0)
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.n_samples()).filter(|&i| self.labeled[i]).collect()
    }

    /// Features in sample-per-row orientation.
    pub fn sample_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_samples())
            .map(|i| self.x.column(i).iter().copied().collect())
            .collect()
    }

    /// Restriction to the given samples (in the given order).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let x = self.x.select_columns(indices.iter());
        let y = self.y.select_rows(indices.iter());
        let labeled = indices.iter().map(|&i| self.labeled[i]).collect();
        Self::new(self.name.clone(), x, y, labeled)
    }

    /// Restriction to the given features.
    pub fn with_features(&self, features: &[usize]) -> Result<Self> {
        let x = self.x.select_rows(features.iter());
        Self::new(self.name.clone(), x, self.y.clone(), self.labeled.clone())
    }

    fn with_mask(&self, keep: &[bool]) -> Result<Self> {
        let mut y = self.y.clone();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                y.row_mut(i).fill(0.0);
            }
        }
        Self::new(self.name.clone(), self.x.clone(), y, keep.to_vec())
    }
}

/// An ordered collection of tasks sharing one feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskDataset {
    tasks: Vec<TaskData>,
    d: usize,
    feature_names: Option<Vec<String>>,
    support: Option<Vec<usize>>,
}

impl MultiTaskDataset {
    pub fn new(tasks: Vec<TaskData>, feature_names: Option<Vec<String>>) -> Result<Self> {
        let Some(first) = tasks.first() else {
            return Err(Error::invalid("dataset has no tasks"));
        };
        let d = first.dim();
        for t in &tasks {
            if t.dim() != d {
                return Err(Error::DimensionMismatch(format!(
                    "task '{}' has {} features, task '{}' has {d}",
                    t.name(),
                    t.dim(),
                    first.name()
                )));
            }
        }
        if let Some(names) = &feature_names {
            if names.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "{} feature names for {d} features",
                    names.len()
                )));
            }
        }
        Ok(Self { tasks, d, feature_names, support: None })
    }

    /// Attaches a ground-truth informative feature set.
    pub fn with_support(mut self, mut support: Vec<usize>) -> Result<Self> {
        support.sort_unstable();
        support.dedup();
        if support.iter().any(|&j| j >= self.d) {
            return Err(Error::invalid("support index out of range"));
        }
        self.support = Some(support);
        Ok(self)
    }

    pub fn tasks(&self) -> &[TaskData] {
        &self.tasks
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    /// Planted support, when the data came from [`generate_synthetic`].
    pub fn support(&self) -> Option<&[usize]> {
        self.support.as_deref()
    }

    /// Keeps only the first `count` tasks.
    pub fn first_tasks(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.tasks.len() {
            return Err(Error::invalid(format!(
                "task count {count} out of range 1..={}",
                self.tasks.len()
            )));
        }
        let mut out = self.clone();
        out.tasks.truncate(count);
        Ok(out)
    }

    pub fn map_tasks(&self, f: impl Fn(usize, &TaskData) -> Result<TaskData>) -> Result<Self> {
        let tasks = self
            .tasks
            .iter()
            .enumerate()
            .map(|(l, t)| f(l, t))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Self::new(tasks, self.feature_names.clone())?;
        out.support = self.support.clone();
        Ok(out)
    }
}

fn task_rng(seed: u64, task: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((task as u64) << 8) | purpose);
    rng
}

/// Splits `total` slots across classes with `counts[c]` members each:
/// at least one per class, the rest proportional (largest remainder),
/// never above a class's size.
fn stratified_allocation(counts: &[usize], total: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let mut alloc: Vec<usize> = counts.iter().map(|&c| usize::from(c > 0)).collect();
    let mut assigned: usize = alloc.iter().sum();
    let quotas: Vec<f64> = counts
        .iter()
        .map(|&c| total as f64 * c as f64 / n as f64)
        .collect();
    while assigned < total {
        // largest remaining quota deficit, ties to the lower class index
        let pick = (0..counts.len())
            .filter(|&k| alloc[k] < counts[k])
            .max_by(|&a, &b| {
                let da = quotas[a] - alloc[a] as f64;
                let db = quotas[b] - alloc[b] as f64;
                da.partial_cmp(&db).unwrap().then(b.cmp(&a))
            });
        match pick {
            Some(k) => {
                alloc[k] += 1;
                assigned += 1;
            }
            None => break,
        }
    }
    alloc
}

fn labeled_by_class(task: &TaskData) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); task.n_classes()];
    for i in task.labeled_indices() {
        if let Some(c) = task.class_of(i) {
            by_class[c].push(i);
        }
    }
    by_class
}

/// Keeps labels for `⌈fraction·n_l⌉` samples per task, chosen by seeded
/// stratified sampling among the currently labeled samples.
pub fn apply_label_fraction(ds: &MultiTaskDataset, fraction: f64, seed: u64) -> Result<MultiTaskDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("label fraction {fraction} not in (0, 1]")));
    }
    ds.map_tasks(|l, task| {
        let n = task.n_samples();
        let c = task.n_classes();
        // guard against 0.05 * 4000 = 200.00000000000003 style round-up
        let target = ((fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
        let by_class = labeled_by_class(task);
        if let Some(k) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!(
                "task '{}': class {k} has no labeled sample",
                task.name()
            )));
        }
        if target < c {
            return Err(Error::invalid(format!(
                "task '{}': fraction {fraction} keeps {target} labels for {c} classes",
                task.name()
            )));
        }
        let pool = task.n_labeled();
        if target > pool {
            return Err(Error::invalid(format!(
                "task '{}': fraction {fraction} asks for {target} labels but only {pool} are available",
                task.name()
            )));
        }
        let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
        let alloc = stratified_allocation(&counts, target);
        let mut rng = task_rng(seed, l, 1);
        let mut keep = vec![false; n];
        for (members, &take) in by_class.iter().zip(&alloc) {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            for &i in &members[..take] {
                keep[i] = true;
            }
        }
        task.with_mask(&keep)
    })
}

/// Stratified hold-out split of every task's labeled samples.
///
/// Unlabeled samples always stay in the training part. Each class keeps at
/// least one training sample and, when it has two or more members, gives at
/// least one to the test part.
pub fn split_train_test(
    ds: &MultiTaskDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(MultiTaskDataset, MultiTaskDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!("test fraction {test_fraction} not in (0, 1)")));
    }
    let mut train_tasks = Vec::with_capacity(ds.n_tasks());
    let mut test_tasks = Vec::with_capacity(ds.n_tasks());
    for (l, task) in ds.tasks().iter().enumerate() {
        let mut rng = task_rng(seed, l, 2);
        let mut is_test = vec![false; task.n_samples()];
        for mut members in labeled_by_class(task) {
            if members.len() < 2 {
                continue;
            }
            members.shuffle(&mut rng);
            let take = ((test_fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
            for &i in &members[..take] {
                is_test[i] = true;
            }
        }
        let test_idx: Vec<usize> = (0..task.n_samples()).filter(|&i| is_test[i]).collect();
        let train_idx: Vec<usize> = (0..task.n_samples()).filter(|&i| !is_test[i]).collect();
        if test_idx.is_empty() {
            return Err(Error::invalid(format!(
                "task '{}' has too few labeled samples for a test split",
                task.name()
            )));
        }
        train_tasks.push(task.subset(&train_idx)?);
        test_tasks.push(task.subset(&test_idx)?);
    }
    let mut train = MultiTaskDataset::new(train_tasks, ds.feature_names.clone())?;
    let mut test = MultiTaskDataset::new(test_tasks, ds.feature_names.clone())?;
    train.support = ds.support.clone();
    test.support = ds.support.clone();
    Ok((train, test))
}

/// Parameters of the planted-support generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Total number of features.
    pub d: usize,
    /// Size of the informative support shared by all tasks.
    pub support_size: usize,
    pub tasks: usize,
    pub samples_per_task: usize,
    pub classes: usize,
    /// Separation between adjacent class means on a support feature.
    pub signal_strength: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d: 20,
            support_size: 4,
            tasks: 2,
            samples_per_task: 40,
            classes: 2,
            signal_strength: 1.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.support_size == 0 || self.support_size > self.d {
            return Err(Error::invalid(format!(
                "support size {} not in 1..={}",
                self.support_size, self.d
            )));
        }
        if self.tasks == 0 {
            return Err(Error::invalid("need at least one task"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.samples_per_task < self.classes {
            return Err(Error::invalid("fewer samples than classes"));
        }
        if !(self.signal_strength > 0.0) || !self.signal_strength.is_finite() {
            return Err(Error::invalid("signal strength must be positive"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        Ok(())
    }
}

/// Generates fully labeled tasks whose classes differ only on a shared
/// planted support.
///
/// On every support feature each task assigns its classes the levels
/// `0, s, 2s, …` (s = signal strength) in a task- and feature-specific
/// random order, so every support feature separates every pair of classes
/// while the class structure differs between tasks. All features carry
/// Gaussian noise with standard deviation `noise_sigma`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<MultiTaskDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut features: Vec<usize> = (0..cfg.d).collect();
    features.shuffle(&mut rng);
    let mut support = features[..cfg.support_size].to_vec();
    support.sort_unstable();

    let mut tasks = Vec::with_capacity(cfg.tasks);
    for l in 0..cfg.tasks {
        let mut rng = task_rng(cfg.seed, l, 3);
        let c = cfg.classes;
        let n = cfg.samples_per_task;
        // class means on the support, one level permutation per feature
        let mut means = DMatrix::<f64>::zeros(cfg.d, c);
        for &j in &support {
            let mut levels: Vec<usize> = (0..c).collect();
            levels.shuffle(&mut rng);
            for (k, &lvl) in levels.iter().enumerate() {
                means[(j, k)] = cfg.signal_strength * lvl as f64;
            }
        }
        let mut classes: Vec<usize> = (0..n).map(|i| i % c).collect();
        classes.shuffle(&mut rng);
        let mut x = DMatrix::<f64>::zeros(cfg.d, n);
        let mut y = DMatrix::<f64>::zeros(n, c);
        for (i, &k) in classes.iter().enumerate() {
            y[(i, k)] = 1.0;
            for j in 0..cfg.d {
                let z: f64 = rng.sample(StandardNormal);
                x[(j, i)] = means[(j, k)] + cfg.noise_sigma * z;
            }
        }
        tasks.push(TaskData::new(format!("task{l}"), x, y, vec![true; n])?);
    }
    MultiTaskDataset::new(tasks, None)?.with_support(support)
}

/// On-disk manifest: one JSON document pointing at per-task CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tasks: Vec<ManifestTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_names: Option<Vec<String>>,
    /// Ground-truth informative features, written for synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTask {
    pub name: String,
    pub features_csv: String,
    pub labels_csv: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled_mask_csv: Option<String>,
}

fn read_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_owned(), source })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse { path: path.to_owned(), message: e.to_string() })?;
        let row = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_owned(),
                    message: format!("row {}, column {}: non-numeric cell '{cell}'", r + 1, c + 1),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse { path: path.to_owned(), message: "empty file".into() });
    }
    Ok(rows)
}

fn write_csv(path: &Path, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| Error::Io { path: path.to_owned(), source })
}

fn resolve(base: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_owned()
    } else {
        base.join(p)
    }
}

/// Loads and validates a manifest; relative CSV paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<MultiTaskDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_owned(), source })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { path: path.to_owned(), message: e.to_string() })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for mt in &manifest.tasks {
        let features = read_csv(&resolve(base, &mt.features_csv))?;
        let labels = read_csv(&resolve(base, &mt.labels_csv))?;
        let mask = match &mt.labeled_mask_csv {
            Some(file) => {
                let mpath = resolve(base, file);
                let rows = read_csv(&mpath)?;
                let mask = rows
                    .iter()
                    .enumerate()
                    .map(|(i, r)| match r.as_slice() {
                        [v] if *v == 0.0 => Ok(false),
                        [v] if *v == 1.0 => Ok(true),
                        _ => Err(Error::Parse {
                            path: mpath.clone(),
                            message: format!("row {}: expected a single 0 or 1", i + 1),
                        }),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(mask)
            }
            None => None,
        };
        tasks.push(TaskData::from_sample_rows(mt.name.clone(), &features, &labels, mask)?);
    }
    let ds = MultiTaskDataset::new(tasks, manifest.feature_names)?;
    match manifest.support {
        Some(s) => ds.with_support(s),
        None => Ok(ds),
    }
}

/// Writes `manifest.json` plus per-task CSVs into `dir`; returns the
/// manifest path. Values are written in shortest round-trip decimal form.
pub fn write_manifest(ds: &MultiTaskDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_owned(), source })?;
    let mut entries = Vec::with_capacity(ds.n_tasks());
    for (l, task) in ds.tasks().iter().enumerate() {
        let features_csv = format!("task{l}_features.csv");
        let labels_csv = format!("task{l}_labels.csv");
        let mask_csv = format!("task{l}_mask.csv");
        write_csv(
            &dir.join(&features_csv),
            task.sample_rows().into_iter().map(|r| r.iter().map(|v| v.to_string()).collect()),
        )?;
        write_csv(
            &dir.join(&labels_csv),
            (0..task.n_samples()).map(|i| task.y().row(i).iter().map(|v| v.to_string()).collect()),
        )?;
        write_csv(
            &dir.join(&mask_csv),
            task.labeled_mask().iter().map(|&b| vec![u8::from(b).to_string()]),
        )?;
        entries.push(ManifestTask {
            name: task.name().to_owned(),
            features_csv,
            labels_csv,
            labeled_mask_csv: Some(mask_csv),
        });
    }
    let manifest = Manifest {
        tasks: entries,
        feature_names: ds.feature_names().map(<[String]>::to_vec),
        support: ds.support().map(<[usize]>::to_vec),
    };
    let path = dir.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&path, json).map_err(|source| Error::Io { path: path.clone(), source })?;
    Ok(path)
}
