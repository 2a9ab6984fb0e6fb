//! Multi-threaded versions of the per-node and per-sample loops.
//!
//! Work is split the same way as in the sequential core routines and results are
//! combined in index order, so output does not depend on the thread count.

use anyhow::{bail, Context};
use nalgebra::DMatrix;
use rayon::prelude::*;

use ridgekit_core::embedded::{
    covariance_chunks, covariance_partial, fit_node, pairwise_sum, EmbeddedRidgeModel, FieldSamples, NodeFitConfig,
    QuadratureWeights,
};
use ridgekit_core::subspace::subspace_distance;
use ridgekit_core::{Error, Result, Subspace};

/// Overrides `--threads` when set.
pub const THREADS_ENV: &str = "RIDGEKIT_THREADS";

/// Thread count from the environment, falling back to the flag. `None` lets rayon decide.
pub fn resolve_threads(flag: Option<usize>) -> anyhow::Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => {
            let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}={v} is not a thread count"))?;
            if n == 0 {
                bail!("{THREADS_ENV} must be at least 1");
            }
            Ok(Some(n))
        }
        _ => {
            if flag == Some(0) {
                bail!("--threads must be at least 1");
            }
            Ok(flag)
        }
    }
}

/// Runs `f` on a dedicated pool with `threads` workers.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .context("could not start worker threads")?;
    Ok(pool.install(f))
}

/// Parallel [`ridgekit_core::embedded::fit_embedded`].
pub fn fit_embedded_parallel(
    field: &FieldSamples,
    weights: QuadratureWeights,
    cfg: &NodeFitConfig,
) -> Result<EmbeddedRidgeModel> {
    if weights.len() != field.num_nodes() {
        return Err(Error::DimensionMismatch { expected: field.num_nodes(), found: weights.len() });
    }
    let fits = (0..field.num_nodes())
        .into_par_iter()
        .map(|i| fit_node(field.x(), &field.values().column(i).into_owned(), cfg, i))
        .collect();
    EmbeddedRidgeModel::from_fits(fits, weights, field.node_coords().clone())
}

/// Parallel [`ridgekit_core::embedded::gradient_covariance`]; bitwise identical to it.
pub fn gradient_covariance_parallel(model: &EmbeddedRidgeModel, x_eval: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = x_eval.nrows();
    if m == 0 {
        return Err(Error::InvalidInput("no evaluation points for the gradient covariance".into()));
    }
    let parts = covariance_chunks(m)
        .into_par_iter()
        .map(|rows| covariance_partial(model, x_eval, rows))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(parts).expect("at least one chunk") / m as f64)
}

/// Parallel [`ridgekit_core::compression::distance_matrix`].
pub fn distance_matrix_parallel(directions: &[Subspace]) -> Result<DMatrix<f64>> {
    let n = directions.len();
    let rows = (0..n)
        .into_par_iter()
        .map(|i| (i + 1..n).map(|j| subspace_distance(&directions[i], &directions[j])).collect::<Result<Vec<f64>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut dist = DMatrix::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            dist[(i, i + 1 + off)] = v;
            dist[(i + 1 + off, i)] = v;
        }
    }
    Ok(dist)
}
