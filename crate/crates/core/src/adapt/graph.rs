//! Cross-view affinity graphs and the graph smoothness penalty.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Squared Euclidean distance between columns `i` and `j`.
pub(crate) fn column_sq_distance(points: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    points
        .column(i)
        .iter()
        .zip(points.column(j).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Binary k-nearest-neighbour graph over the columns of `points`, where only
/// columns from a different camera count as neighbours. Symmetrised by max,
/// so `W[(i, j)] = 1` when either endpoint picked the other.
pub fn build_cross_view_graph(points: &DMatrix<f64>, views: &[u32], k: usize) -> Result<DMatrix<f64>> {
    let m = points.ncols();
    if views.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: views.len(),
        });
    }
    if k == 0 {
        return Err(Error::Config("adapt.knn_k must be >= 1".into()));
    }
    let mut w = DMatrix::zeros(m, m);
    for i in 0..m {
        let mut candidates: Vec<(f64, usize)> = (0..m)
            .filter(|&j| views[j] != views[i])
            .map(|j| (column_sq_distance(points, i, j), j))
            .collect();
        if candidates.len() < k {
            return Err(Error::KnnTooLarge {
                k,
                available: candidates.len(),
            });
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &candidates[..k] {
            w[(i, j)] = 1.0;
            w[(j, i)] = 1.0;
        }
    }
    Ok(w)
}

fn check_affinity(w: &DMatrix<f64>, m: usize) -> Result<()> {
    if w.nrows() != m || w.ncols() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: w.nrows(),
        });
    }
    let scale = w.amax().max(1.0);
    for i in 0..m {
        for j in (i + 1)..m {
            if (w[(i, j)] - w[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::AsymmetricAffinity);
            }
        }
    }
    Ok(())
}

/// `L = diag(W 1) - W`.
pub fn laplacian(w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut l = -w.clone();
    for i in 0..w.nrows() {
        l[(i, i)] += w.row(i).sum();
    }
    l
}

/// `sum_ij W_ij ||z_i - z_j||^2` over the columns of `z`, with both ordered
/// terms of every edge counted.
pub fn graph_penalty(z: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<f64> {
    let m = z.ncols();
    check_affinity(w, m)?;
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            let wij = w[(i, j)];
            if wij != 0.0 {
                total += wij * column_sq_distance(z, i, j);
            }
        }
    }
    Ok(total)
}

/// `2 tr(Z L Z^T)`, equal to [`graph_penalty`] for symmetric `W`.
pub fn trace_penalty(z: &DMatrix<f64>, l: &DMatrix<f64>) -> f64 {
    2.0 * (z * l).component_mul(z).sum()
}
