//! Joint l2,1 / trace-norm semi-supervised feature selection.
//!
//! For tasks `l = 1..t` the solver minimizes
//!
//! ```text
//! Σ_l [ Tr((F_l − Y_l)ᵀ U_l (F_l − Y_l)) + Tr(F_lᵀ L_l F_l)
//!       + α ( ‖W_l‖_{2,1} + β ‖X_lᵀ W_l + 1 b_lᵀ − F_l‖²_F ) ]
//!   + γ ‖[W_1 … W_t]‖_*
//! ```
//!
//! over the selection matrices `W_l`, predicted labels `F_l` and biases
//! `b_l`. Both norms are smoothed with `δ`: rows contribute
//! `sqrt(‖w^j‖² + δ)` and the trace norm becomes `Tr((W Wᵀ + δ I)^{1/2})`.
//! The smoothed objective is what the iterations provably decrease.
//!
//! Each outer iteration rebuilds the reweighting matrices from the current
//! `W` and then, per task, solves for `W_l` in closed form with `F_l` and
//! `b_l` eliminated, followed by the closed forms for `F_l` and `b_l`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{MultiTaskDataset, TaskData};
use crate::error::{Error, Result};
use crate::graph::{self, TaskLaplacian};
use crate::linalg;

/// Relative slack allowed when checking that the objective never increases.
pub const MONOTONE_SLACK: f64 = 1e-9;

/// Weight placed on the row-reweighting matrix `D_l` in the `W_l` system.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowWeighting {
    /// `1/β`: the exact minimizer of the reweighted objective.
    #[default]
    Exact,
    /// `α/β`, kept for comparison runs; loses the monotone-decrease guarantee.
    AlphaOverBeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Ridge term of the local Gram matrices in the graph Laplacian.
    pub lambda: f64,
    /// Clique size (the sample plus its k − 1 neighbours).
    pub k: usize,
    /// Finite stand-in for the infinite weight on labeled samples.
    pub inf_surrogate: f64,
    pub delta: f64,
    pub max_iter: usize,
    pub rel_tol: f64,
    #[serde(default)]
    pub row_weighting: RowWeighting,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            lambda: 1.0,
            k: 15,
            inf_surrogate: 1e6,
            delta: 1e-12,
            max_iter: 50,
            rel_tol: 1e-6,
            row_weighting: RowWeighting::Exact,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} must be positive and finite")))
            }
        };
        positive("alpha", self.alpha)?;
        positive("beta", self.beta)?;
        positive("lambda", self.lambda)?;
        positive("inf_surrogate", self.inf_surrogate)?;
        positive("delta", self.delta)?;
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma = {} must be non-negative", self.gamma)));
        }
        if self.k < 2 {
            return Err(Error::invalid(format!("k = {} must be at least 2", self.k)));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(Error::invalid("rel_tol must be non-negative"));
        }
        Ok(())
    }

    fn alpha_beta(&self) -> f64 {
        self.alpha * self.beta
    }

    fn row_coefficient(&self) -> f64 {
        match self.row_weighting {
            RowWeighting::Exact => 1.0 / self.beta,
            RowWeighting::AlphaOverBeta => self.alpha / self.beta,
        }
    }

    fn coupling_coefficient(&self) -> f64 {
        self.gamma / self.alpha_beta()
    }
}

/// `Σ_i ‖row i‖₂`.
pub fn norm_l21(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.norm()).sum()
}

/// `Σ_i sqrt(‖row i‖² + δ)`.
pub fn norm_l21_smoothed(m: &DMatrix<f64>, delta: f64) -> f64 {
    m.row_iter().map(|r| (r.norm_squared() + delta).sqrt()).sum()
}

/// Sum of singular values.
pub fn trace_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.sum()
}

/// `Tr((M Mᵀ + δ I)^{1/2})`.
pub fn trace_norm_smoothed(m: &DMatrix<f64>, delta: f64) -> Result<f64> {
    let gram = m * m.transpose();
    let eig = linalg::sym_eigen(&gram, "trace norm")?;
    Ok(eig.eigenvalues.iter().map(|&l| (l.max(0.0) + delta).sqrt()).sum())
}

/// Diagonal of `U`: `inf_surrogate` on labeled samples, 1 elsewhere.
pub fn selection_diag(mask: &[bool], inf_surrogate: f64) -> DVector<f64> {
    DVector::from_iterator(mask.len(), mask.iter().map(|&b| if b { inf_surrogate } else { 1.0 }))
}

/// `D_l` diagonal: `1 / (2 sqrt(‖w^j‖² + δ))` per feature row.
pub fn update_dl(w: &DMatrix<f64>, delta: f64) -> DVector<f64> {
    DVector::from_iterator(
        w.nrows(),
        w.row_iter().map(|r| 0.5 / (r.norm_squared() + delta).sqrt()),
    )
}

/// `D̃ = ½ (W Wᵀ + δ I)^{-1/2}` for the column-concatenated `W`.
pub fn update_dtilde(w: &DMatrix<f64>, delta: f64) -> Result<DMatrix<f64>> {
    let gram = w * w.transpose();
    let eig = linalg::sym_eigen(&gram, "coupling reweighting")?;
    Ok(linalg::spectral_map(&eig, |l| 0.5 / (l.max(0.0) + delta).sqrt()))
}

/// Per-task quantities fixed for the whole run.
///
/// The systems involving `P = (αβ H + U + L)⁻¹` are evaluated in the
/// orthonormal basis `[e, V]`, `e = 1/√n`, where `H = V Vᵀ`. With
/// `K = U + L`, `s = eᵀKe`, `g = VᵀKe` and the Schur complement
/// `C = VᵀKV − g gᵀ / s` (which dominates the identity because `K ⪰ I`),
/// the V-block of the inverse is `Z = (αβ I + C)⁻¹`. This keeps
/// `H (I − αβ P) H = V C Z Vᵀ` free of cancellation for large αβ.
#[derive(Debug, Clone)]
pub struct TaskCache {
    laplacian: TaskLaplacian,
    u: DVector<f64>,
    h: DMatrix<f64>,
    p: DMatrix<f64>,
    r: DMatrix<f64>,
    t: DMatrix<f64>,
    alpha_beta: f64,
    basis: DMatrix<f64>,
    s: f64,
    g: DVector<f64>,
    c_vectors: DMatrix<f64>,
    c_values: DVector<f64>,
}

impl TaskCache {
    pub fn laplacian(&self) -> &TaskLaplacian {
        &self.laplacian
    }

    pub fn u(&self) -> &DVector<f64> {
        &self.u
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn t(&self) -> &DMatrix<f64> {
        &self.t
    }

    /// `Z m` with `Z = (αβ I + C)⁻¹`.
    fn apply_z(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut coeffs = self.c_vectors.transpose() * m;
        for (i, mut row) in coeffs.row_iter_mut().enumerate() {
            row.scale_mut(1.0 / (self.alpha_beta + self.c_values[i]));
        }
        &self.c_vectors * coeffs
    }

    /// `P Q` given the constant-direction component `q0 = eᵀQ` and the
    /// complement component `qv = VᵀQ`. Returns `(a, z)` with `PQ = e a + V z`.
    fn apply_p_split(&self, q0: &DMatrix<f64>, qv: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let z = self.apply_z(&(qv - &self.g * q0 / self.s));
        let gz = z.transpose() * &self.g;
        let a = DMatrix::from_fn(1, z.ncols(), |_, j| (q0[(0, j)] - gz[j]) / self.s);
        (a, z)
    }

    fn n(&self) -> usize {
        self.u.len()
    }

    fn constant_component(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let e = 1.0 / (self.n() as f64).sqrt();
        DMatrix::from_fn(1, m.ncols(), |_, j| m.column(j).sum() * e)
    }

    fn assemble(&self, a: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
        let e = 1.0 / (self.n() as f64).sqrt();
        let mut out = &self.basis * z;
        for j in 0..out.ncols() {
            let shift = e * a[(0, j)];
            out.column_mut(j).add_scalar_mut(shift);
        }
        out
    }

    /// `U Y` for the task's labels.
    fn uy(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut uy = y.clone();
        for (i, mut row) in uy.row_iter_mut().enumerate() {
            row.scale_mut(self.u[i]);
        }
        uy
    }
}

/// Builds `U`, `H`, `P`, `R` and `T` for one task.
pub fn precompute_task(task: &TaskData, laplacian: TaskLaplacian, hp: &Hyperparams) -> Result<TaskCache> {
    let n = task.n_samples();
    if laplacian.matrix().nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "Laplacian is {}×{} for {n} samples",
            laplacian.matrix().nrows(),
            laplacian.matrix().ncols()
        )));
    }
    if n < 2 {
        return Err(Error::invalid(format!("task '{}' needs at least two samples", task.name())));
    }
    let ab = hp.alpha_beta();
    let u = selection_diag(task.labeled_mask(), hp.inf_surrogate);
    let h = graph::centering_matrix(n);
    let mut k_mat = laplacian.matrix().clone();
    for i in 0..n {
        k_mat[(i, i)] += u[i];
    }
    if !linalg::all_finite(&k_mat) {
        return Err(Error::numerical("non-finite Laplacian"));
    }

    let basis = linalg::constant_complement_basis(n);
    let e = 1.0 / (n as f64).sqrt();
    let ke = k_mat.column_sum() * e;
    let s = ke.sum() * e;
    let g = basis.transpose() * &ke;
    let mut c = basis.transpose() * &k_mat * &basis - (&g * g.transpose()) / s;
    linalg::symmetrize(&mut c);
    let eig = linalg::sym_eigen(&c, "label-propagation system")?;
    let c_values = eig.eigenvalues.map(|v| v.max(0.0));
    let c_vectors = eig.eigenvectors;

    let mut cache = TaskCache {
        laplacian,
        u,
        h,
        p: DMatrix::zeros(0, 0),
        r: DMatrix::zeros(0, 0),
        t: DMatrix::zeros(0, 0),
        alpha_beta: ab,
        basis,
        s,
        g,
        c_vectors,
        c_values,
    };

    // P materialized from its block form
    let zg = cache.apply_z(&DMatrix::from_column_slice(n - 1, 1, cache.g.as_slice()));
    let vzg = &cache.basis * &zg;
    let gzg = (cache.g.transpose() * &zg)[(0, 0)];
    let ee = e * e * (1.0 / s + gzg / (s * s));
    let vzv = &cache.basis * cache.apply_z(&cache.basis.transpose());
    let mut p = DMatrix::from_fn(n, n, |i, j| ee - e * (vzg[(i, 0)] + vzg[(j, 0)]) / s + vzv[(i, j)]);
    linalg::symmetrize(&mut p);
    cache.p = p;

    // R = (X V Q_C) diag(λ / (αβ + λ)) (X V Q_C)ᵀ
    let xv = task.x() * &cache.basis;
    let xvq = &xv * &cache.c_vectors;
    let mut weighted = xvq.clone();
    for (j, mut col) in weighted.column_iter_mut().enumerate() {
        let lam = cache.c_values[j];
        col.scale_mut(lam / (ab + lam));
    }
    let mut r = weighted * xvq.transpose();
    linalg::symmetrize(&mut r);
    cache.r = r;

    // T = X H P U Y = X V z(UY)
    let uy = cache.uy(task.y());
    let q0 = cache.constant_component(&uy);
    let qv = cache.basis.transpose() * &uy;
    let (_, z) = cache.apply_p_split(&q0, &qv);
    cache.t = xv * z;
    Ok(cache)
}

/// `W_l = (R_l + c_D D_l + (γ/(αβ)) D̃)⁻¹ T_l`, with `c_D = 1/β` under
/// [`RowWeighting::Exact`].
pub fn solve_w(
    r: &DMatrix<f64>,
    t: &DMatrix<f64>,
    dl: &DVector<f64>,
    dtilde: &DMatrix<f64>,
    hp: &Hyperparams,
) -> Result<DMatrix<f64>> {
    let row = hp.row_coefficient();
    let coupling = hp.coupling_coefficient();
    let mut a = r.clone();
    if coupling != 0.0 {
        a += dtilde * coupling;
    }
    for j in 0..a.nrows() {
        a[(j, j)] += row * dl[j];
    }
    linalg::symmetrize(&mut a);
    linalg::spd_solve(a, t, "selection-matrix system")
}

/// `F_l = P_l (αβ H X_lᵀ W_l + U_l Y_l)`.
pub fn solve_f(cache: &TaskCache, task: &TaskData, w: &DMatrix<f64>) -> DMatrix<f64> {
    let uy = cache.uy(task.y());
    // eᵀ H = 0, so the regression part has no constant component
    let q0 = cache.constant_component(&uy);
    let xtw = task.x().transpose() * w;
    let qv = cache.basis.transpose() * (xtw * cache.alpha_beta + uy);
    let (a, z) = cache.apply_p_split(&q0, &qv);
    cache.assemble(&a, &z)
}

/// `b_l = (1/n) (F_l − X_lᵀ W_l)ᵀ 1`.
pub fn solve_b(f: &DMatrix<f64>, x: &DMatrix<f64>, w: &DMatrix<f64>) -> DVector<f64> {
    let resid = f - x.transpose() * w;
    let n = resid.nrows() as f64;
    resid.row_sum().transpose() / n
}

/// Iterates of one task.
#[derive(Debug, Clone)]
pub struct TaskState {
    pub cache: TaskCache,
    pub w: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Diagonal of the last `D_l` used.
    pub dl: DVector<f64>,
}

/// Per-term values of the smoothed objective.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ObjectiveTerms {
    pub label_fit: f64,
    pub smoothness: f64,
    pub row_sparsity: f64,
    pub regression: f64,
    pub coupling: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.label_fit + self.smoothness + self.row_sparsity + self.regression + self.coupling
    }
}

/// Gradient of the smoothed objective with respect to one task's variables.
#[derive(Debug, Clone)]
pub struct TaskGradient {
    pub w: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SolverState {
    pub tasks: Vec<TaskState>,
    pub dtilde: DMatrix<f64>,
    pub history: Vec<f64>,
    pub iteration: usize,
}

/// Column-concatenation `[W_1, …, W_t]`.
pub fn stack_w(ws: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let d = ws.first().map_or(0, |w| w.nrows());
    let cols: usize = ws.iter().map(|w| w.ncols()).sum();
    let mut out = DMatrix::zeros(d, cols);
    let mut at = 0;
    for w in ws {
        out.columns_mut(at, w.ncols()).copy_from(*w);
        at += w.ncols();
    }
    out
}

fn residual(task: &TaskData, st: &TaskState) -> DMatrix<f64> {
    let mut e = task.x().transpose() * &st.w - &st.f;
    for mut row in e.row_iter_mut() {
        row += st.b.transpose();
    }
    e
}

impl SolverState {
    /// Builds every task cache and the initial iterate (`D_l = I`, `D̃ = I`).
    pub fn new(ds: &MultiTaskDataset, hp: &Hyperparams) -> Result<Self> {
        hp.validate()?;
        let caches = ds
            .tasks()
            .par_iter()
            .map(|task| {
                let n = task.n_samples();
                if n < 2 {
                    return Err(Error::invalid(format!("task '{}' needs at least two samples", task.name())));
                }
                let k = hp.k.min(n);
                if k < hp.k {
                    log::info!("task '{}': clique size reduced from {} to {n}", task.name(), hp.k);
                }
                let lap = graph::build_task_laplacian(task.x(), k, hp.lambda)?;
                precompute_task(task, lap, hp)
            })
            .collect::<Result<Vec<_>>>()?;
        let d = ds.dim();
        let identity = DMatrix::identity(d, d);
        let ones = DVector::from_element(d, 1.0);
        let tasks = caches
            .into_par_iter()
            .zip(ds.tasks().par_iter())
            .map(|(cache, task)| {
                let w = solve_w(&cache.r, &cache.t, &ones, &identity, hp)?;
                let f = solve_f(&cache, task, &w);
                let b = solve_b(&f, task.x(), &w);
                Ok(TaskState { cache, w, f, b, dl: ones.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut state = Self { tasks, dtilde: identity, history: Vec::new(), iteration: 0 };
        let j0 = state.objective(ds, hp)?;
        state.history.push(j0);
        Ok(state)
    }

    pub fn stacked_w(&self) -> DMatrix<f64> {
        let ws: Vec<&DMatrix<f64>> = self.tasks.iter().map(|t| &t.w).collect();
        stack_w(&ws)
    }

    pub fn objective_terms(&self, ds: &MultiTaskDataset, hp: &Hyperparams) -> Result<ObjectiveTerms> {
        let mut terms = ObjectiveTerms::default();
        for (task, st) in ds.tasks().iter().zip(&self.tasks) {
            let diff = &st.f - task.y();
            for (i, row) in diff.row_iter().enumerate() {
                terms.label_fit += st.cache.u[i] * row.norm_squared();
            }
            let lf = st.cache.laplacian.matrix() * &st.f;
            terms.smoothness += st.f.component_mul(&lf).sum();
            terms.row_sparsity += hp.alpha * norm_l21_smoothed(&st.w, hp.delta);
            terms.regression += hp.alpha_beta() * residual(task, st).norm_squared();
        }
        terms.coupling = hp.gamma * trace_norm_smoothed(&self.stacked_w(), hp.delta)?;
        Ok(terms)
    }

    /// Smoothed objective at the current iterate.
    pub fn objective(&self, ds: &MultiTaskDataset, hp: &Hyperparams) -> Result<f64> {
        Ok(self.objective_terms(ds, hp)?.total())
    }

    /// Analytic gradient of the smoothed objective at the current iterate.
    pub fn gradient(&self, ds: &MultiTaskDataset, hp: &Hyperparams) -> Result<Vec<TaskGradient>> {
        let ab = hp.alpha_beta();
        let stacked = self.stacked_w();
        let gram = &stacked * stacked.transpose();
        let eig = linalg::sym_eigen(&gram, "trace norm gradient")?;
        let inv_sqrt = linalg::spectral_map(&eig, |l| 1.0 / (l.max(0.0) + hp.delta).sqrt());
        Ok(ds
            .tasks()
            .iter()
            .zip(&self.tasks)
            .map(|(task, st)| {
                let e = residual(task, st);
                let mut gf = (&st.f - task.y()) * 2.0;
                for (i, mut row) in gf.row_iter_mut().enumerate() {
                    row.scale_mut(st.cache.u[i]);
                }
                gf += st.cache.laplacian.matrix() * &st.f * 2.0;
                gf -= &e * (2.0 * ab);
                let gb = e.row_sum().transpose() * (2.0 * ab);
                let mut gw = task.x() * &e * (2.0 * ab);
                for (j, mut row) in gw.row_iter_mut().enumerate() {
                    let wr = st.w.row(j);
                    let scale = hp.alpha / (wr.norm_squared() + hp.delta).sqrt();
                    row += wr * scale;
                }
                gw += &inv_sqrt * &st.w * hp.gamma;
                TaskGradient { w: gw, f: gf, b: gb }
            })
            .collect())
    }

    /// One outer iteration; returns the new objective value.
    pub fn step(&mut self, ds: &MultiTaskDataset, hp: &Hyperparams) -> Result<f64> {
        let d = ds.dim();
        self.dtilde = if hp.gamma > 0.0 {
            update_dtilde(&self.stacked_w(), hp.delta)?
        } else {
            DMatrix::zeros(d, d)
        };
        let dtilde = &self.dtilde;
        self.tasks
            .par_iter_mut()
            .zip(ds.tasks().par_iter())
            .try_for_each(|(st, task)| -> Result<()> {
                st.dl = update_dl(&st.w, hp.delta);
                st.w = solve_w(&st.cache.r, &st.cache.t, &st.dl, dtilde, hp)?;
                st.f = solve_f(&st.cache, task, &st.w);
                st.b = solve_b(&st.f, task.x(), &st.w);
                Ok(())
            })?;
        self.iteration += 1;
        let value = self.objective(ds, hp)?;
        if !value.is_finite() {
            return Err(Error::numerical(format!("objective became {value} at iteration {}", self.iteration)));
        }
        self.history.push(value);
        Ok(value)
    }

    /// Relative change of the last step, if any.
    pub fn last_relative_change(&self) -> Option<f64> {
        let [.., prev, cur] = self.history.as_slice() else {
            return None;
        };
        Some((prev - cur).abs() / prev.abs().max(f64::MIN_POSITIVE))
    }
}

/// Fitted per-task selection matrix, bias and feature scores.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub name: String,
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Row 2-norms of `w`.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionModel {
    pub hyperparams: Hyperparams,
    pub tasks: Vec<TaskModel>,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl SelectionModel {
    pub fn dim(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.w.nrows())
    }
}

/// Runs the alternating solver to convergence.
///
/// Stops when the relative objective change drops below `rel_tol` or after
/// `max_iter` iterations; the latter is reported through `converged`, not as
/// an error. An objective increase beyond [`MONOTONE_SLACK`] under
/// [`RowWeighting::Exact`] is reported as a numerical failure.
pub fn fit(ds: &MultiTaskDataset, hp: &Hyperparams) -> Result<SelectionModel> {
    let mut state = SolverState::new(ds, hp)?;
    let mut converged = false;
    while state.iteration < hp.max_iter {
        let prev = *state.history.last().expect("history starts non-empty");
        let cur = state.step(ds, hp)?;
        if hp.row_weighting == RowWeighting::Exact && cur > prev + MONOTONE_SLACK * prev.abs() {
            return Err(Error::numerical(format!(
                "objective increased from {prev} to {cur} at iteration {}",
                state.iteration
            )));
        }
        if state.last_relative_change().is_some_and(|c| c < hp.rel_tol) {
            converged = true;
            break;
        }
    }
    log::debug!(
        "fit finished after {} iterations (converged: {converged}), objective {:?}",
        state.iteration,
        state.history.last()
    );
    let tasks = ds
        .tasks()
        .iter()
        .zip(state.tasks)
        .map(|(task, st)| TaskModel {
            name: task.name().to_owned(),
            scores: st.w.row_iter().map(|r| r.norm()).collect(),
            w: st.w,
            b: st.b,
        })
        .collect();
    Ok(SelectionModel {
        hyperparams: hp.clone(),
        tasks,
        objective_trace: state.history,
        converged,
        iterations: state.iteration,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskModelFile {
    name: String,
    /// Row-major, one inner list per feature.
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    scores: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    hyperparams: Hyperparams,
    tasks: Vec<TaskModelFile>,
    objective_trace: Vec<f64>,
    converged: bool,
    iterations: usize,
}

impl SelectionModel {
    pub fn to_json(&self) -> String {
        let file = ModelFile {
            hyperparams: self.hyperparams.clone(),
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskModelFile {
                    name: t.name.clone(),
                    w: t.w.row_iter().map(|r| r.iter().copied().collect()).collect(),
                    b: t.b.iter().copied().collect(),
                    scores: t.scores.clone(),
                })
                .collect(),
            objective_trace: self.objective_trace.clone(),
            converged: self.converged,
            iterations: self.iterations,
        };
        let mut out = serde_json::to_string_pretty(&file).expect("model serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("model file: {e}")))?;
        let mut d = None;
        let tasks = file
            .tasks
            .into_iter()
            .map(|t| {
                let rows = t.w.len();
                let cols = t.w.first().map_or(0, Vec::len);
                if rows == 0 || t.w.iter().any(|r| r.len() != cols) || t.b.len() != cols || t.scores.len() != rows {
                    return Err(Error::invalid(format!("model file: task '{}' has inconsistent shapes", t.name)));
                }
                if *d.get_or_insert(rows) != rows {
                    return Err(Error::DimensionMismatch("model tasks disagree on feature count".into()));
                }
                Ok(TaskModel {
                    w: DMatrix::from_fn(rows, cols, |i, j| t.w[i][j]),
                    b: DVector::from_vec(t.b),
                    scores: t.scores,
                    name: t.name,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if tasks.is_empty() {
            return Err(Error::invalid("model file has no tasks"));
        }
        Ok(Self {
            hyperparams: file.hyperparams,
            tasks,
            objective_trace: file.objective_trace,
            converged: file.converged,
            iterations: file.iterations,
        })
    }
}
