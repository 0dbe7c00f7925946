//! Graph-regularised dictionary learning by alternating minimisation of
//! `||Y - D Z||_F^2 + lambda * sum_ij W_ij ||z_i - z_j||^2` with every atom
//! (column of `D`) inside the unit ball.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::graph::{laplacian, trace_penalty};
use crate::error::{Error, Result};
use crate::train::seeded_rng;

/// Eigenvalue sums at or below this fraction of the largest are treated as
/// singular.
pub const SINGULAR_EPS: f64 = 1e-12;
/// Slack allowed on the per-half-step monotonicity check.
const MONOTONE_SLACK: f64 = 1e-9;
const MAX_ATOM_SWEEPS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub lambda: f64,
    /// Defaults to `min(D_feat, M) / 2`.
    pub k_atoms: Option<usize>,
    pub max_iters: usize,
    /// Stop once the relative objective decrease over one iteration falls
    /// below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            k_atoms: None,
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HalfStep {
    Codes,
    Atoms,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverRecord {
    pub iter: usize,
    pub step: HalfStep,
    pub objective: f64,
    pub recon_term: f64,
    /// Unweighted graph penalty.
    pub graph_term: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DictModel {
    /// `D_feat x K` dictionary.
    pub dictionary: DMatrix<f64>,
    /// `K x M` codes, one column per input column.
    pub codes: DMatrix<f64>,
    pub affinity: DMatrix<f64>,
    pub lambda: f64,
    /// One record per half-step.
    pub history: Vec<SolverRecord>,
}

impl DictModel {
    pub fn objective(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.objective)
    }

    /// Writes `iter,objective,recon_term,graph_term`, one row per completed
    /// iteration.
    pub fn write_diagnostics<W: Write>(&self, out: W) -> Result<()> {
        super::write_solver_history(&self.history, out)
    }

    /// Least-squares code of a new column with no graph coupling.
    pub fn encode(&self, y: &[f64]) -> Result<Vec<f64>> {
        let d = &self.dictionary;
        if y.len() != d.nrows() {
            return Err(Error::DimensionMismatch {
                expected: d.nrows(),
                found: y.len(),
            });
        }
        let rhs = d.tr_mul(&nalgebra::DVector::from_column_slice(y));
        let eig = SymmetricEigen::new(d.tr_mul(d));
        let cutoff = SINGULAR_EPS * eig.eigenvalues.amax().max(1.0);
        let proj = eig.eigenvectors.tr_mul(&rhs);
        let scaled = proj.zip_map(&eig.eigenvalues, |p, s| if s > cutoff { p / s } else { 0.0 });
        Ok((&eig.eigenvectors * scaled).iter().copied().collect())
    }
}

/// `(objective, recon, graph)` at `(D, Z)`.
pub fn objective_terms(
    y: &DMatrix<f64>,
    d: &DMatrix<f64>,
    z: &DMatrix<f64>,
    l: &DMatrix<f64>,
    lambda: f64,
) -> (f64, f64, f64) {
    let recon = (y - d * z).norm_squared();
    let graph = trace_penalty(z, l);
    (recon + lambda * graph, recon, graph)
}

fn normalise_columns(d: &mut DMatrix<f64>) {
    let rows = d.nrows();
    for (k, mut col) in d.column_iter_mut().enumerate() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        } else {
            col.fill(0.0);
            col[k % rows] = 1.0;
        }
    }
}

/// `K` distinct data columns chosen by `seed`, each scaled to unit norm.
pub fn init_dictionary(y: &DMatrix<f64>, k_atoms: usize, seed: u64) -> DMatrix<f64> {
    let m = y.ncols();
    let mut rng = seeded_rng(seed, 0);
    let picks: Vec<usize> = if k_atoms <= m {
        sample(&mut rng, m, k_atoms).into_vec()
    } else {
        let base = sample(&mut rng, m, m).into_vec();
        (0..k_atoms).map(|i| base[i % m]).collect()
    };
    let mut d = DMatrix::from_fn(y.nrows(), k_atoms, |r, c| y[(r, picks[c])]);
    normalise_columns(&mut d);
    d
}

/// Exact minimiser over `Z` of the objective for fixed `D`, from the
/// Sylvester equation `D^T D Z + 2 lambda Z L = D^T Y` diagonalised by the
/// eigenbases of both sides. Components whose eigenvalue sum is singular
/// keep their value from `z_prev`, which can only lower the objective.
fn codes_step(
    y: &DMatrix<f64>,
    d: &DMatrix<f64>,
    laplacian_eig: &SymmetricEigen<f64, nalgebra::Dyn>,
    lambda: f64,
    z_prev: &DMatrix<f64>,
) -> DMatrix<f64> {
    let gram = SymmetricEigen::new(d.tr_mul(d));
    let (v, s) = (&gram.eigenvectors, &gram.eigenvalues);
    let (u, mu) = (&laplacian_eig.eigenvectors, &laplacian_eig.eigenvalues);
    let c = v.tr_mul(&d.tr_mul(y)) * u;
    let old = v.tr_mul(z_prev) * u;
    let scale = s.amax().max(2.0 * lambda * mu.amax()).max(1.0);
    let tilde = DMatrix::from_fn(c.nrows(), c.ncols(), |k, l| {
        let denom = s[k] + 2.0 * lambda * mu[l];
        if denom > SINGULAR_EPS * scale {
            c[(k, l)] / denom
        } else {
            old[(k, l)]
        }
    });
    v * tilde * u.transpose()
}

/// Block-coordinate descent over atoms: each atom is set to its exact
/// constrained minimiser with the others fixed, sweeping to convergence.
fn atoms_step(y: &DMatrix<f64>, d: &mut DMatrix<f64>, z: &DMatrix<f64>) {
    let a = z * z.transpose();
    let b = y * z.transpose();
    let scale = a.diagonal().amax().max(1e-300);
    for _ in 0..MAX_ATOM_SWEEPS {
        let mut moved = 0.0f64;
        for k in 0..d.ncols() {
            let akk = a[(k, k)];
            if akk <= SINGULAR_EPS * scale {
                continue;
            }
            let residual = b.column(k) - &*d * a.column(k);
            let mut u = d.column(k) + residual / akk;
            let n = u.norm();
            if n > 1.0 {
                u /= n;
            }
            moved = moved.max((&u - d.column(k)).amax());
            d.set_column(k, &u);
        }
        if moved <= 1e-13 {
            break;
        }
    }
}

fn check_inputs(y: &DMatrix<f64>, w: &DMatrix<f64>, lambda: f64, k_atoms: usize) -> Result<()> {
    if y.ncols() == 0 || y.nrows() == 0 {
        return Err(Error::Empty("feature matrix"));
    }
    if k_atoms == 0 {
        return Err(Error::Config("adapt.k_atoms must be >= 1".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("adapt.lambda must be >= 0, got {lambda}")));
    }
    if w.nrows() != y.ncols() || w.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch {
            expected: y.ncols(),
            found: w.nrows(),
        });
    }
    if w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Config("affinity entries must be finite and >= 0".into()));
    }
    if w != &w.transpose() {
        return Err(Error::AsymmetricAffinity);
    }
    Ok(())
}

/// `min(D_feat, M) / 2`, at least 1.
pub fn default_k_atoms(feature_dim: usize, num_columns: usize) -> usize {
    (feature_dim.min(num_columns) / 2).max(1)
}

/// Learns `(D, Z)` for the columns of `y` from a seeded data-column start.
pub fn solve_graph_dictionary(y: &DMatrix<f64>, w: &DMatrix<f64>, cfg: &SolverConfig) -> Result<DictModel> {
    let k = cfg.k_atoms.unwrap_or_else(|| default_k_atoms(y.nrows(), y.ncols()));
    check_inputs(y, w, cfg.lambda, k)?;
    solve_from(y, w, cfg.lambda, init_dictionary(y, k, cfg.seed), cfg.max_iters, cfg.tol)
}

/// Alternates code and atom steps from the dictionary `d0`, starting with a
/// code step. Errors if the objective turns non-finite or rises.
pub fn solve_from(
    y: &DMatrix<f64>,
    w: &DMatrix<f64>,
    lambda: f64,
    d0: DMatrix<f64>,
    max_iters: usize,
    tol: f64,
) -> Result<DictModel> {
    check_inputs(y, w, lambda, d0.ncols())?;
    if d0.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch {
            expected: y.nrows(),
            found: d0.nrows(),
        });
    }
    let l = laplacian(w);
    let l_eig = SymmetricEigen::new(l.clone());
    let mut d = d0;
    let mut z = DMatrix::zeros(d.ncols(), y.ncols());
    let mut history = Vec::new();
    let mut last = f64::INFINITY;
    let mut iter_start = f64::INFINITY;
    // round-off floor for objectives that reach zero
    let floor = 1e-12 * y.norm_squared().max(f64::MIN_POSITIVE);
    for iter in 1..=max_iters {
        for step in [HalfStep::Codes, HalfStep::Atoms] {
            match step {
                HalfStep::Codes => z = codes_step(y, &d, &l_eig, lambda, &z),
                HalfStep::Atoms => atoms_step(y, &mut d, &z),
            }
            let (objective, recon_term, graph_term) = objective_terms(y, &d, &z, &l, lambda);
            if !objective.is_finite() {
                return Err(Error::Solver(format!("non-finite objective at iteration {iter}")));
            }
            if objective > last + MONOTONE_SLACK * last.abs() + floor {
                return Err(Error::Solver(format!(
                    "objective rose from {last} to {objective} at iteration {iter} ({step:?} step)"
                )));
            }
            last = objective;
            history.push(SolverRecord {
                iter,
                step,
                objective,
                recon_term,
                graph_term,
            });
        }
        let decrease = iter_start - last;
        if last <= floor || (iter_start.is_finite() && decrease <= tol * iter_start) {
            break;
        }
        iter_start = last;
    }
    Ok(DictModel {
        dictionary: d,
        codes: z,
        affinity: w.clone(),
        lambda,
        history,
    })
}
