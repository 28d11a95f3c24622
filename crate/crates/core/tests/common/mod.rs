//! Independent reference computations used by the integration and
//! acceptance tests. Nothing here calls the solver's closed forms.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use semisel::dataset::{MultiTaskDataset, TaskData};
use semisel::solver::Hyperparams;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Random task with every class labeled at least once and roughly
/// `labeled_fraction` of the samples labeled.
pub fn random_task(rng: &mut ChaCha8Rng, name: &str, d: usize, n: usize, c: usize, labeled_fraction: f64) -> TaskData {
    assert!(n >= c);
    let x = gaussian_matrix(rng, d, n);
    let mut classes: Vec<usize> = (0..n).map(|i| i % c).collect();
    classes.shuffle(rng);
    let mut labeled: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < labeled_fraction).collect();
    for k in 0..c {
        let first = classes.iter().position(|&v| v == k).unwrap();
        labeled[first] = true;
    }
    let mut y = DMatrix::zeros(n, c);
    for i in 0..n {
        if labeled[i] {
            y[(i, classes[i])] = 1.0;
        }
    }
    TaskData::new(name, x, y, labeled).unwrap()
}

pub fn random_dataset(rng: &mut ChaCha8Rng, t: usize, d: usize, n: &[usize], c: &[usize], labeled_fraction: f64) -> MultiTaskDataset {
    let tasks = (0..t)
        .map(|l| random_task(rng, &format!("t{l}"), d, n[l], c[l], labeled_fraction))
        .collect();
    MultiTaskDataset::new(tasks, None).unwrap()
}

pub fn grid_value(rng: &mut ChaCha8Rng) -> f64 {
    let e: i32 = rng.random_range(-3..=3);
    10f64.powi(2 * e)
}

/// Brute-force neighbour sets: repeated arg-min over squared distances.
pub fn oracle_knn(x: &DMatrix<f64>, k: usize) -> Vec<Vec<usize>> {
    let n = x.ncols();
    (0..n)
        .map(|i| {
            let mut taken = vec![false; n];
            taken[i] = true;
            let mut set = vec![i];
            for _ in 1..k {
                let mut best: Option<(f64, usize)> = None;
                for j in 0..n {
                    if taken[j] {
                        continue;
                    }
                    let dist = (x.column(i) - x.column(j)).norm();
                    if best.is_none_or(|(bd, _)| dist < bd) {
                        best = Some((dist, j));
                    }
                }
                let (_, j) = best.unwrap();
                taken[j] = true;
                set.push(j);
            }
            set
        })
        .collect()
}

/// `Σ_i S_i H_k (X_iᵀX_i + λI)⁻¹ H_k S_iᵀ` with explicit n × k selection
/// matrices and dense LU solves.
pub fn oracle_laplacian(x: &DMatrix<f64>, k: usize, lambda: f64) -> DMatrix<f64> {
    let n = x.ncols();
    let h = DMatrix::<f64>::identity(k, k) - DMatrix::from_element(k, k, 1.0 / k as f64);
    let mut l = DMatrix::zeros(n, n);
    for set in oracle_knn(x, k) {
        let mut s = DMatrix::<f64>::zeros(n, k);
        for (q, &p) in set.iter().enumerate() {
            s[(p, q)] = 1.0;
        }
        let xi = x * &s;
        let inner = if xi.nrows() < k {
            // Woodbury: the k × k Gram matrix is rank deficient and loses λ to rounding
            let small = (&xi * xi.transpose() + DMatrix::identity(xi.nrows(), xi.nrows()) * lambda).lu().solve(&xi).unwrap();
            (DMatrix::identity(k, k) - xi.transpose() * small) / lambda
        } else {
            (xi.transpose() * &xi + DMatrix::identity(k, k) * lambda).lu().try_inverse().unwrap()
        };
        l += &s * (&h * inner * &h) * s.transpose();
    }
    l
}

/// Flattened solver variables: per task `W` (d × c), `F` (n × c), `b` (c).
#[derive(Clone, Debug)]
pub struct Vars {
    pub w: Vec<DMatrix<f64>>,
    pub f: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
}

impl Vars {
    pub fn zeros(ds: &MultiTaskDataset) -> Self {
        let d = ds.dim();
        Vars {
            w: ds.tasks().iter().map(|t| DMatrix::zeros(d, t.n_classes())).collect(),
            f: ds.tasks().iter().map(|t| DMatrix::zeros(t.n_samples(), t.n_classes())).collect(),
            b: ds.tasks().iter().map(|t| DVector::zeros(t.n_classes())).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..self.w.len() {
            out.extend(self.w[l].iter());
            out.extend(self.f[l].iter());
            out.extend(self.b[l].iter());
        }
        out
    }

    pub fn unflatten(&self, z: &[f64]) -> Self {
        let mut out = self.clone();
        let mut at = 0;
        for l in 0..self.w.len() {
            for v in out.w[l].iter_mut() {
                *v = z[at];
                at += 1;
            }
            for v in out.f[l].iter_mut() {
                *v = z[at];
                at += 1;
            }
            for v in out.b[l].iter_mut() {
                *v = z[at];
                at += 1;
            }
        }
        out
    }
}

/// Everything fixed about an instance: data, Laplacians, hyperparameters.
pub struct Problem<'a> {
    pub ds: &'a MultiTaskDataset,
    pub laplacians: Vec<DMatrix<f64>>,
    pub hp: Hyperparams,
}

fn u_weight(task: &TaskData, i: usize, hp: &Hyperparams) -> f64 {
    if task.labeled_mask()[i] {
        hp.inf_surrogate
    } else {
        1.0
    }
}

fn stacked(vars: &Vars) -> DMatrix<f64> {
    let d = vars.w[0].nrows();
    let cols: usize = vars.w.iter().map(|w| w.ncols()).sum();
    let mut out = DMatrix::zeros(d, cols);
    let mut at = 0;
    for w in &vars.w {
        for j in 0..w.ncols() {
            for i in 0..d {
                out[(i, at + j)] = w[(i, j)];
            }
        }
        at += w.ncols();
    }
    out
}

fn sym_pow(m: &DMatrix<f64>, delta: f64, p: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        out += (v * v.transpose()) * (lam.max(0.0) + delta).powf(p);
    }
    out
}

/// Term-by-term loop evaluation of the smoothed objective.
pub fn oracle_objective(pb: &Problem, vars: &Vars) -> f64 {
    let hp = &pb.hp;
    let mut total = 0.0;
    for (l, task) in pb.ds.tasks().iter().enumerate() {
        let (x, y, w, f, b) = (task.x(), task.y(), &vars.w[l], &vars.f[l], &vars.b[l]);
        let (n, c, d) = (task.n_samples(), task.n_classes(), task.dim());
        for i in 0..n {
            let ui = u_weight(task, i, hp);
            for k in 0..c {
                total += ui * (f[(i, k)] - y[(i, k)]).powi(2);
            }
        }
        let lap = &pb.laplacians[l];
        for k in 0..c {
            for i in 0..n {
                for j in 0..n {
                    total += f[(i, k)] * lap[(i, j)] * f[(j, k)];
                }
            }
        }
        let mut rows = 0.0;
        for j in 0..d {
            let sq: f64 = (0..c).map(|k| w[(j, k)].powi(2)).sum();
            rows += (sq + hp.delta).sqrt();
        }
        let mut fit = 0.0;
        for i in 0..n {
            for k in 0..c {
                let pred: f64 = (0..d).map(|j| x[(j, i)] * w[(j, k)]).sum::<f64>() + b[k];
                fit += (pred - f[(i, k)]).powi(2);
            }
        }
        total += hp.alpha * (rows + hp.beta * fit);
    }
    let wall = stacked(vars);
    let root = sym_pow(&(&wall * wall.transpose()), hp.delta, 0.5);
    total += hp.gamma * root.trace();
    total
}

/// Analytic gradient of [`oracle_objective`], written out independently.
pub fn oracle_gradient(pb: &Problem, vars: &Vars) -> Vars {
    let hp = &pb.hp;
    let ab = hp.alpha * hp.beta;
    let wall = stacked(vars);
    let inv_root = sym_pow(&(&wall * wall.transpose()), hp.delta, -0.5);
    let mut g = vars.clone();
    for (l, task) in pb.ds.tasks().iter().enumerate() {
        let (x, y, w, f, b) = (task.x(), task.y(), &vars.w[l], &vars.f[l], &vars.b[l]);
        let n = task.n_samples();
        let mut e = x.transpose() * w - f;
        for i in 0..n {
            for k in 0..b.len() {
                e[(i, k)] += b[k];
            }
        }
        let mut gf = &pb.laplacians[l] * f * 2.0 - &e * (2.0 * ab);
        for i in 0..n {
            let ui = u_weight(task, i, hp);
            for k in 0..b.len() {
                gf[(i, k)] += 2.0 * ui * (f[(i, k)] - y[(i, k)]);
            }
        }
        let gb = DVector::from_fn(b.len(), |k, _| 2.0 * ab * e.column(k).sum());
        let mut gw = x * &e * (2.0 * ab) + &inv_root * w * hp.gamma;
        for j in 0..w.nrows() {
            let norm = (w.row(j).norm_squared() + hp.delta).sqrt();
            for k in 0..w.ncols() {
                gw[(j, k)] += hp.alpha * w[(j, k)] / norm;
            }
        }
        g.w[l] = gw;
        g.f[l] = gf;
        g.b[l] = gb;
    }
    g
}

/// Central finite-difference gradient of `f` at `z`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, z: &[f64], h: f64) -> Vec<f64> {
    let mut z = z.to_vec();
    (0..z.len())
        .map(|i| {
            let orig = z[i];
            z[i] = orig + h;
            let up = f(&z);
            z[i] = orig - h;
            let down = f(&z);
            z[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gradient descent with Barzilai–Borwein trial steps and Armijo
/// backtracking on the full (W, F, b) variable vector, from `restarts`
/// random starting points. Returns the best objective value found.
pub fn descent_oracle(pb: &Problem, restarts: usize, iters: usize, seed: u64) -> f64 {
    let template = Vars::zeros(pb.ds);
    let obj = |z: &[f64]| oracle_objective(pb, &template.unflatten(z));
    let grad = |z: &[f64]| oracle_gradient(pb, &template.unflatten(z)).flatten();
    let mut rng = rng(seed);
    let mut best = f64::INFINITY;
    for _ in 0..restarts {
        let mut z: Vec<f64> = template.flatten().iter().map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut fz = obj(&z);
        let mut gz = grad(&z);
        let mut step = 1e-6;
        for _ in 0..iters {
            let gn2: f64 = gz.iter().map(|g| g * g).sum();
            if gn2 == 0.0 {
                break;
            }
            let mut t = step;
            let mut accepted = None;
            for _ in 0..60 {
                let cand: Vec<f64> = z.iter().zip(&gz).map(|(a, g)| a - t * g).collect();
                let fc = obj(&cand);
                if fc <= fz - 1e-4 * t * gn2 {
                    accepted = Some((cand, fc));
                    break;
                }
                t *= 0.5;
            }
            let Some((cand, fc)) = accepted else { break };
            let gc = grad(&cand);
            let s: Vec<f64> = cand.iter().zip(&z).map(|(a, b)| a - b).collect();
            let yv: Vec<f64> = gc.iter().zip(&gz).map(|(a, b)| a - b).collect();
            let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
            let ss: f64 = s.iter().map(|a| a * a).sum();
            step = if sy > 0.0 { ss / sy } else { t * 2.0 };
            let done = (fz - fc).abs() <= 1e-15 * fz.abs();
            z = cand;
            fz = fc;
            gz = gc;
            if done {
                break;
            }
        }
        best = best.min(fz);
    }
    best
}

/// `U_l` as a dense diagonal matrix.
pub fn dense_u(task: &TaskData, hp: &Hyperparams) -> DMatrix<f64> {
    DMatrix::from_fn(task.n_samples(), task.n_samples(), |i, j| if i == j { u_weight(task, i, hp) } else { 0.0 })
}

/// `αβ H + U + L` assembled densely.
pub fn label_system(task: &TaskData, lap: &DMatrix<f64>, hp: &Hyperparams) -> DMatrix<f64> {
    let n = task.n_samples();
    let h = DMatrix::<f64>::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    h * (hp.alpha * hp.beta) + dense_u(task, hp) + lap
}

/// Minimizer over `(F, b)` for fixed `W`, by a dense LU solve.
pub fn eliminate_fb(task: &TaskData, lap: &DMatrix<f64>, hp: &Hyperparams, w: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = task.n_samples();
    let h = DMatrix::<f64>::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let q = &h * task.x().transpose() * w * (hp.alpha * hp.beta) + dense_u(task, hp) * task.y();
    let f = label_system(task, lap, hp).lu().solve(&q).unwrap();
    let resid = &f - task.x().transpose() * w;
    let b = DVector::from_fn(w.ncols(), |k, _| resid.column(k).mean());
    (f, b)
}

/// Objective with the two non-smooth terms replaced by the fixed quadratic
/// forms `α Σ_l Tr(WᵀD_l W) + γ Tr(WᵀD̃W)`.
pub fn reweighted_objective(pb: &Problem, vars: &Vars, dl: &[DVector<f64>], dtilde: &DMatrix<f64>) -> f64 {
    let hp = Hyperparams { alpha: pb.hp.alpha, gamma: 0.0, ..pb.hp.clone() };
    let smooth_only = Problem { ds: pb.ds, laplacians: pb.laplacians.clone(), hp };
    let mut total = oracle_objective(&smooth_only, vars);
    for (l, w) in vars.w.iter().enumerate() {
        let rows: f64 = (0..w.nrows()).map(|j| (w.row(j).norm_squared() + pb.hp.delta).sqrt()).sum();
        total -= pb.hp.alpha * rows;
        for j in 0..w.nrows() {
            total += pb.hp.alpha * dl[l][j] * w.row(j).norm_squared();
        }
        total += pb.hp.gamma * (w.transpose() * dtilde * w).trace();
    }
    total
}
