//! L1-penalized least squares by cyclic coordinate descent, with k-fold
//! cross-validation over a log-spaced penalty grid.
//!
//! The objective is `(1/2n) ||y - Xw||^2 + lambda ||w||_1`. The
//! unnormalized form `||y - Xw||^2 + lambda' ||w||_1` has the same minimizer
//! at `lambda = lambda' / (2n)`; see [`LassoObjective`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stats::{mean, sample_std, ZERO_VARIANCE_TOL};
use super::Matrix;
use crate::error::{Error, Result};

pub const TOLERANCE: f64 = 1e-8;
pub const MAX_SWEEPS: usize = 10_000;
const STANDARDIZED_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoSolution {
    /// One weight per feature, in the (standardized) feature space of `x`.
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Penalty in the normalized objective.
    pub lambda: f64,
    pub n_iterations: usize,
    pub converged: bool,
    /// Objective value before the first sweep and after every sweep.
    pub objective_trace: Vec<f64>,
}

impl LassoSolution {
    pub fn nonzero_count(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }
}

/// Scale convention of the penalty values handed to the solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LassoObjective {
    /// `(1/2n)||y - Xw||^2 + lambda||w||_1`.
    #[default]
    Normalized,
    /// `||y - Xw||^2 + lambda||w||_1`.
    Unnormalized,
}

impl LassoObjective {
    /// Converts a penalty in this convention to the normalized one for a
    /// problem with `n` samples.
    pub fn to_normalized(self, lambda: f64, n: usize) -> f64 {
        match self {
            LassoObjective::Normalized => lambda,
            LassoObjective::Unnormalized => lambda / (2.0 * n as f64),
        }
    }
}

/// Smallest normalized penalty at which every weight is zero:
/// `max_j |x_j^T (y - mean(y))| / n`.
pub fn lambda_max(x: &Matrix, y: &[f64]) -> f64 {
    let n = x.rows() as f64;
    let ym = mean(y);
    (0..x.cols())
        .map(|j| {
            (0..x.rows())
                .map(|i| x.get(i, j) * (y[i] - ym))
                .sum::<f64>()
                .abs()
                / n
        })
        .fold(0.0, f64::max)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

struct Problem {
    n: usize,
    cols: Vec<Vec<f64>>,
    col_sq: Vec<f64>,
}

impl Problem {
    fn new(x: &Matrix) -> Self {
        let n = x.rows();
        let cols: Vec<Vec<f64>> = (0..x.cols()).map(|j| x.col(j)).collect();
        let col_sq = cols
            .iter()
            .map(|c| c.iter().map(|v| v * v).sum::<f64>() / n as f64)
            .collect();
        Self { n, cols, col_sq }
    }

    fn objective(&self, residual: &[f64], w: &[f64], lambda: f64) -> f64 {
        let rss: f64 = residual.iter().map(|r| r * r).sum();
        rss / (2.0 * self.n as f64) + lambda * w.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Coordinate descent on centered `y`, optionally warm-started.
    fn solve(&self, y: &[f64], lambda: f64, warm: Option<&[f64]>) -> (Vec<f64>, usize, bool, Vec<f64>) {
        let p = self.cols.len();
        let nf = self.n as f64;
        let mut w = warm.map_or_else(|| vec![0.0; p], <[f64]>::to_vec);
        let mut residual = y.to_vec();
        for (j, wj) in w.iter().enumerate() {
            if *wj != 0.0 {
                for (r, x) in residual.iter_mut().zip(&self.cols[j]) {
                    *r -= x * wj;
                }
            }
        }
        let mut trace = vec![self.objective(&residual, &w, lambda)];
        let mut converged = false;
        let mut sweeps = 0;
        while sweeps < MAX_SWEEPS {
            sweeps += 1;
            let mut max_change: f64 = 0.0;
            for j in 0..p {
                if self.col_sq[j] == 0.0 {
                    w[j] = 0.0;
                    continue;
                }
                let col = &self.cols[j];
                let dot: f64 = col.iter().zip(&residual).map(|(x, r)| x * r).sum();
                let rho = dot / nf + self.col_sq[j] * w[j];
                let updated = soft_threshold(rho, lambda) / self.col_sq[j];
                let delta = updated - w[j];
                if delta != 0.0 {
                    for (r, x) in residual.iter_mut().zip(col) {
                        *r -= x * delta;
                    }
                    w[j] = updated;
                    max_change = max_change.max(delta.abs());
                }
            }
            trace.push(self.objective(&residual, &w, lambda));
            if max_change < TOLERANCE {
                converged = true;
                break;
            }
        }
        (w, sweeps, converged, trace)
    }
}

fn check_standardized(x: &Matrix) -> Result<()> {
    if x.rows() < 2 {
        return Err(Error::InvalidArgument("lasso needs at least 2 samples".into()));
    }
    for c in 0..x.cols() {
        let col = x.col(c);
        if col.iter().all(|v| *v == 0.0) {
            // flagged zero-variance column
            continue;
        }
        let s = sample_std(&col);
        if (s - 1.0).abs() > STANDARDIZED_TOL || mean(&col).abs() > STANDARDIZED_TOL {
            return Err(Error::NotStandardized { column: c, std: s });
        }
        if s <= ZERO_VARIANCE_TOL {
            return Err(Error::NotStandardized { column: c, std: s });
        }
    }
    Ok(())
}

/// Fits the LASSO at a single normalized penalty on z-scored `x`.
///
/// `y` is mean-centered internally; its mean is reported as the intercept.
pub fn lasso_fit(x: &Matrix, y: &[f64], lambda: f64) -> Result<LassoSolution> {
    if y.len() != x.rows() {
        return Err(Error::Shape(format!("{} targets for {} rows", y.len(), x.rows())));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be a finite non-negative value, got {lambda}")));
    }
    if let Some(index) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "lasso target", index });
    }
    check_standardized(x)?;
    let ym = mean(y);
    let centered: Vec<f64> = y.iter().map(|v| v - ym).collect();
    let problem = Problem::new(x);
    let (weights, n_iterations, converged, objective_trace) = problem.solve(&centered, lambda, None);
    Ok(LassoSolution {
        weights,
        intercept: ym,
        lambda,
        n_iterations,
        converged,
        objective_trace,
    })
}

/// Cross-validation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvOptions {
    pub folds: usize,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_n: usize,
    pub seed: u64,
    pub objective: LassoObjective,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            grid_lo: 1e-4,
            grid_hi: 1e1,
            grid_n: 50,
            seed: 0,
            objective: LassoObjective::Normalized,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    /// Strictly increasing penalty grid, in the convention of `objective`.
    pub lambda_grid: Vec<f64>,
    pub mean_cv_error: Vec<f64>,
    /// `fold_errors[f][g]`: held-out mean squared error of fold `f` at grid point `g`.
    pub fold_errors: Vec<Vec<f64>>,
    pub chosen_lambda: f64,
    pub chosen_index: usize,
    pub fold_count: usize,
    pub objective: LassoObjective,
    /// Non-zero coefficient count of the full-data fit at each grid point.
    pub path_nonzero: Vec<usize>,
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo && lo.is_finite() && hi.is_finite()) || n < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid needs 0 < lo < hi and n >= 2 (lo={lo}, hi={hi}, n={n})"
        )));
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == n - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect())
}

/// Deterministic fold label for each sample.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0; n];
    for (rank, &i) in perm.iter().enumerate() {
        out[i] = rank % folds;
    }
    out
}

/// Selects the penalty by k-fold cross-validation, then refits on all data.
pub fn lasso_cv(x: &Matrix, y: &[f64], opts: &CvOptions) -> Result<(CvReport, LassoSolution)> {
    let n = x.rows();
    if opts.folds < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {}", opts.folds)));
    }
    if n < opts.folds {
        return Err(Error::InvalidArgument(format!(
            "{n} samples cannot be split into {} folds",
            opts.folds
        )));
    }
    if y.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} rows", y.len())));
    }
    check_standardized(x)?;
    let grid = log_grid(opts.grid_lo, opts.grid_hi, opts.grid_n)?;
    let labels = fold_assignment(n, opts.folds, opts.seed);
    let p = x.cols();

    let mut fold_errors = Vec::with_capacity(opts.folds);
    for fold in 0..opts.folds {
        let train: Vec<usize> = (0..n).filter(|&i| labels[i] != fold).collect();
        let test: Vec<usize> = (0..n).filter(|&i| labels[i] == fold).collect();
        let xt = Matrix::from_fn(train.len(), p, |r, c| x.get(train[r], c));
        let x_means: Vec<f64> = (0..p).map(|c| mean(&xt.col(c))).collect();
        let xc = Matrix::from_fn(train.len(), p, |r, c| xt.get(r, c) - x_means[c]);
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let ym = mean(&yt);
        let yc: Vec<f64> = yt.iter().map(|v| v - ym).collect();
        let problem = Problem::new(&xc);

        let mut errors = vec![0.0; grid.len()];
        let mut warm: Option<Vec<f64>> = None;
        // Largest penalty first so warm starts move along the path.
        for g in (0..grid.len()).rev() {
            let lambda = opts.objective.to_normalized(grid[g], train.len());
            let (w, _, _, _) = problem.solve(&yc, lambda, warm.as_deref());
            let mse = test
                .iter()
                .map(|&i| {
                    let pred: f64 = ym + (0..p).map(|c| (x.get(i, c) - x_means[c]) * w[c]).sum::<f64>();
                    (y[i] - pred).powi(2)
                })
                .sum::<f64>()
                / test.len() as f64;
            errors[g] = mse;
            warm = Some(w);
        }
        fold_errors.push(errors);
    }

    let mean_cv_error: Vec<f64> = (0..grid.len())
        .map(|g| fold_errors.iter().map(|e| e[g]).sum::<f64>() / opts.folds as f64)
        .collect();
    // Exact minimizer; scanning from the top keeps the larger penalty on ties.
    let mut chosen_index = grid.len() - 1;
    for g in (0..grid.len()).rev() {
        if mean_cv_error[g] < mean_cv_error[chosen_index] {
            chosen_index = g;
        }
    }
    let chosen_lambda = grid[chosen_index];

    let ym = mean(y);
    let yc: Vec<f64> = y.iter().map(|v| v - ym).collect();
    let problem = Problem::new(x);
    let mut path_nonzero = vec![0; grid.len()];
    let mut warm: Option<Vec<f64>> = None;
    for g in (0..grid.len()).rev() {
        let (w, _, _, _) = problem.solve(&yc, opts.objective.to_normalized(grid[g], n), warm.as_deref());
        path_nonzero[g] = w.iter().filter(|v| **v != 0.0).count();
        warm = Some(w);
    }

    let solution = lasso_fit(x, y, opts.objective.to_normalized(chosen_lambda, n))?;
    let report = CvReport {
        lambda_grid: grid,
        mean_cv_error,
        fold_errors,
        chosen_lambda,
        chosen_index,
        fold_count: opts.folds,
        objective: opts.objective,
        path_nonzero,
    };
    Ok((report, solution))
}
