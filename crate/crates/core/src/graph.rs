//! Local-learning graph Laplacian.
//!
//! Every sample `i` defines a clique `G_i` made of itself and its `k − 1`
//! nearest neighbours. The clique's local Laplacian
//! `H_k (X_iᵀ X_i + λ I)⁻¹ H_k`, with `X_i` the d × k submatrix of the clique
//! columns, is scattered into the global n × n matrix through the index map
//! `G_i`. Selection matrices are never materialized.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;

/// `H_d = I − (1/d) 1 1ᵀ`.
pub fn centering_matrix(d: usize) -> DMatrix<f64> {
    assert!(d >= 1, "centering matrix needs d >= 1");
    let off = 1.0 / d as f64;
    DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 - off } else { -off })
}

/// Per-sample clique index sets; `sets[i][0] == i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliqueIndex {
    sets: Vec<Vec<usize>>,
    k: usize,
}

impl CliqueIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn clique(&self, i: usize) -> &[usize] {
        &self.sets[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.sets.iter().map(Vec::as_slice)
    }
}

fn squared_distance(x: &DMatrix<f64>, a: usize, b: usize) -> f64 {
    x.column(a)
        .iter()
        .zip(x.column(b).iter())
        .map(|(p, q)| (p - q) * (p - q))
        .sum()
}

/// Exact k-NN cliques under Euclidean distance; `x` is d × n (one sample per
/// column). Equal distances go to the lower sample index.
pub fn knn_cliques(x: &DMatrix<f64>, k: usize) -> Result<CliqueIndex> {
    let n = x.ncols();
    if k < 2 {
        return Err(Error::invalid(format!("clique size k = {k} must be at least 2")));
    }
    if k > n {
        return Err(Error::invalid(format!("clique size k = {k} exceeds sample count {n}")));
    }
    if !linalg::all_finite(x) {
        return Err(Error::invalid("non-finite feature values"));
    }
    let sets = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_distance(x, i, j), j))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            std::iter::once(i)
                .chain(others.into_iter().take(k - 1).map(|(_, j)| j))
                .collect()
        })
        .collect();
    Ok(CliqueIndex { sets, k })
}

/// `H_k (X_cᵀ X_c + λ I)⁻¹ H_k` for one d × k clique submatrix.
///
/// With the thin SVD `X_c = U Σ Vᵀ` the inverse is
/// `I/λ − V diag(σ²/(λ(σ²+λ))) Vᵀ`. Forming the Gram matrix instead would
/// round its null-space eigenvalues by about `ε‖X_c‖²`, an error the inverse
/// amplifies by `1/λ²`.
pub fn local_laplacian(xc: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("ridge lambda = {lambda} must be positive")));
    }
    if !linalg::all_finite(xc) {
        return Err(Error::numerical("non-finite entries in clique data"));
    }
    let k = xc.ncols();
    let svd = xc
        .clone()
        .try_svd(false, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::numerical("SVD of a clique did not converge"))?;
    let vt = svd.v_t.expect("right singular vectors were requested");
    let mut low_rank = DMatrix::<f64>::zeros(k, k);
    for (m, &s) in svd.singular_values.iter().enumerate() {
        let s2 = s * s;
        let weight = s2 / (lambda * (s2 + lambda));
        let v = vt.row(m);
        low_rank += v.transpose() * v * weight;
    }
    let h = centering_matrix(k);
    let mut out = &h / lambda - &h * low_rank * &h;
    linalg::symmetrize(&mut out);
    Ok(out)
}

/// Assembled task Laplacian together with the cliques that produced it.
#[derive(Debug, Clone)]
pub struct TaskLaplacian {
    laplacian: DMatrix<f64>,
    cliques: CliqueIndex,
    lambda: f64,
}

impl TaskLaplacian {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    pub fn cliques(&self) -> &CliqueIndex {
        &self.cliques
    }

    pub fn k(&self) -> usize {
        self.cliques.k
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Writes the Laplacian as header-free CSV, one matrix row per line.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for row in self.laplacian.row_iter() {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| Error::Io { path: path.to_owned(), source })
    }
}

/// Builds `L = Σ_i S_i L_i S_iᵀ` for the task with features `x` (d × n).
///
/// Local Laplacians are computed in parallel; the scatter-add runs in sample
/// order so every output cell sees the same summation order regardless of
/// scheduling.
pub fn build_task_laplacian(x: &DMatrix<f64>, k: usize, lambda: f64) -> Result<TaskLaplacian> {
    let cliques = knn_cliques(x, k)?;
    let locals = cliques
        .sets
        .par_iter()
        .map(|set| local_laplacian(&x.select_columns(set.iter()), lambda))
        .collect::<Result<Vec<_>>>()?;
    let n = x.ncols();
    let mut laplacian = DMatrix::<f64>::zeros(n, n);
    for (set, local) in cliques.sets.iter().zip(&locals) {
        for (p, &gp) in set.iter().enumerate() {
            for (q, &gq) in set.iter().enumerate() {
                laplacian[(gp, gq)] += local[(p, q)];
            }
        }
    }
    linalg::symmetrize(&mut laplacian);
    Ok(TaskLaplacian { laplacian, cliques, lambda })
}
