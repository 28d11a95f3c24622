//! Semi-supervised multi-task feature selection.
//!
//! Each task contributes a feature matrix `X_l` (d × n_l, one sample per
//! column), a partially labeled one-hot matrix `Y_l` and a local-learning
//! graph Laplacian. The solver jointly minimizes a manifold-regularized
//! least-squares loss with an l2,1 penalty on every per-task selection matrix
//! and a trace-norm penalty coupling all tasks, using alternating closed-form
//! updates with reweighting matrices.
//!
//! Module map:
//!
//! - [`dataset`]: task containers, manifest/CSV ingestion, label masking and
//!   a synthetic generator with a planted feature support.
//! - [`graph`]: k-NN cliques and Laplacian assembly.
//! - [`solver`]: the objective, the closed-form block updates and [`solver::fit`].
//! - [`select_eval`]: rankings, a Fisher-score baseline, a ridge classifier,
//!   average precision and the experiment runner.

pub mod dataset;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod select_eval;
pub mod solver;

pub use dataset::{MultiTaskDataset, SynthConfig, TaskData};
pub use error::{Error, Result};
pub use graph::{CliqueIndex, TaskLaplacian};
pub use solver::{fit, Hyperparams, SelectionModel};
