//! Numerics checked against independent oracles: nalgebra's symmetric
//! eigen-solver for singular values, closed-form LASSO on orthogonal
//! designs, and planted/null regression problems.

use alignlab::numerics::{
    lasso_cv, lasso_fit, standardize, svd, truncate_reconstruct, variance_captured, CvOptions, Matrix,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Singular values as square roots of the eigenvalues of m^T m (or m m^T),
/// descending.
fn gram_oracle(m: &Matrix) -> Vec<f64> {
    let a = DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let gram = if m.rows() >= m.cols() {
        a.transpose() * &a
    } else {
        &a * a.transpose()
    };
    let mut ev: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().map(|e| e.max(0.0).sqrt()).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

#[test]
fn singular_values_match_gram_eigenvalues_5x3() {
    let m = gaussian(5, 3, 2024);
    let f = svd(&m).unwrap();
    let oracle = gram_oracle(&m);
    for (s, o) in f.sigma.iter().zip(&oracle) {
        assert!((s - o).abs() < 1e-9, "{s} vs {o}");
    }
}

#[test]
fn seeded_6x4_truncation_error_is_trailing_mass() {
    let m = gaussian(6, 4, 77);
    let f = svd(&m).unwrap();
    let oracle = gram_oracle(&m);
    let approx = truncate_reconstruct(&f, 2).unwrap();
    let err2 = approx.distance(&m).unwrap().powi(2);
    let trailing = oracle[2].powi(2) + oracle[3].powi(2);
    assert!((err2 - trailing).abs() <= 1e-8 * trailing.max(1e-300));
}

#[test]
fn full_rank_truncation_is_identity() {
    let m = gaussian(7, 5, 5);
    let f = svd(&m).unwrap();
    let back = truncate_reconstruct(&f, 5).unwrap();
    assert!(back.distance(&m).unwrap() / m.frobenius_norm() < 1e-8);
}

#[test]
fn variance_captured_matches_oracle_ratio() {
    let m = gaussian(8, 5, 31);
    let f = svd(&m).unwrap();
    let ev2: Vec<f64> = gram_oracle(&m).iter().map(|s| s * s).collect();
    let total: f64 = ev2.iter().sum();
    let mut prev = 0.0;
    for k in 1..=5 {
        let vc = variance_captured(&f, k).unwrap();
        let oracle: f64 = ev2[..k].iter().sum::<f64>() / total;
        assert!((vc - oracle).abs() < 1e-10, "k={k}: {vc} vs {oracle}");
        assert!(vc >= prev);
        prev = vc;
    }
    assert_eq!(variance_captured(&f, 5).unwrap(), 1.0);
}

/// Standardized columns that are mutually orthogonal: Gram-Schmidt against
/// the ones vector and each other, scaled to norm sqrt(n - 1).
fn orthogonal_standardized(n: usize, p: usize, seed: u64) -> Matrix {
    let raw = gaussian(n, p, seed);
    let mut basis: Vec<Vec<f64>> = vec![vec![1.0 / (n as f64).sqrt(); n]];
    let mut cols = Vec::new();
    for j in 0..p {
        let mut c = raw.col(j);
        for b in &basis {
            let d: f64 = c.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in c.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        let unit: Vec<f64> = c.iter().map(|x| x / norm).collect();
        basis.push(unit.clone());
        cols.push(unit.iter().map(|x| x * ((n - 1) as f64).sqrt()).collect::<Vec<_>>());
    }
    Matrix::from_fn(n, p, |r, c| cols[c][r])
}

#[test]
fn orthonormal_design_matches_soft_threshold() {
    let n = 40;
    let p = 6;
    let x = orthogonal_standardized(n, p, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let y: Vec<f64> = (0..n)
        .map(|i| 1.5 * x.get(i, 0) - 0.4 * x.get(i, 2) + 0.05 * x.get(i, 5) + 0.2 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let ym = y.iter().sum::<f64>() / n as f64;
    let col_sq = (n - 1) as f64 / n as f64;
    for &lambda in &[0.0, 0.01, 0.1, 0.5, 2.0] {
        let s = lasso_fit(&x, &y, lambda).unwrap();
        for j in 0..p {
            let xty: f64 = (0..n).map(|i| x.get(i, j) * (y[i] - ym)).sum::<f64>() / n as f64;
            let oracle = xty.signum() * (xty.abs() - lambda).max(0.0) / col_sq;
            assert!((s.weights[j] - oracle).abs() < 1e-8, "lambda={lambda} j={j}: {} vs {oracle}", s.weights[j]);
        }
    }
}

#[test]
fn planted_column_is_recovered() {
    let n = 64;
    let x = standardize(&gaussian(n, 6, 99)).unwrap().z;
    let planted = 3;
    let y: Vec<f64> = (0..n).map(|i| 0.8 * x.get(i, planted) + 0.25).collect();
    let (report, sol) = lasso_cv(&x, &y, &CvOptions { seed: 5, ..CvOptions::default() }).unwrap();
    assert!(sol.weights[planted].abs() > 0.0);
    for (j, w) in sol.weights.iter().enumerate() {
        if j != planted {
            assert!(w.abs() < 0.05, "feature {j} weight {w}");
        }
    }
    // OLS on the planted column alone recovers the slope.
    let col = x.col(planted);
    let ym = y.iter().sum::<f64>() / n as f64;
    let slope = col.iter().zip(&y).map(|(a, b)| a * (b - ym)).sum::<f64>() / col.iter().map(|a| a * a).sum::<f64>();
    assert!((slope - 0.8).abs() < 1e-12);
    assert!((sol.weights[planted] - slope).abs() < report.chosen_lambda * 2.0 + 1e-9);
}

#[test]
fn pure_noise_gives_null_model() {
    let n = 60;
    let x = standardize(&gaussian(n, 5, 41)).unwrap().z;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    // Shuffling y cannot create structure: the null fit must stay null.
    y.shuffle(&mut rng);
    let (report, sol) = lasso_cv(&x, &y, &CvOptions { seed: 1, ..CvOptions::default() }).unwrap();
    assert!(sol.weights.iter().all(|w| *w == 0.0), "weights {:?} at {}", sol.weights, report.chosen_lambda);
}

#[test]
fn cv_is_deterministic_and_ties_prefer_larger_lambda() {
    let x = standardize(&gaussian(30, 4, 3)).unwrap().z;
    let y: Vec<f64> = (0..30).map(|i| x.get(i, 1)).collect();
    let opts = CvOptions { seed: 9, ..CvOptions::default() };
    let (a, _) = lasso_cv(&x, &y, &opts).unwrap();
    let (b, _) = lasso_cv(&x, &y, &opts).unwrap();
    assert_eq!(a.mean_cv_error, b.mean_cv_error);
    let best = a.mean_cv_error[a.chosen_index];
    for (g, e) in a.mean_cv_error.iter().enumerate() {
        assert!(*e >= best);
        if *e == best {
            assert!(g <= a.chosen_index);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn svd_reconstructs_and_obeys_eckart_young(rows in 1usize..20, cols in 1usize..20, seed in any::<u64>()) {
        let m = gaussian(rows, cols, seed);
        let f = svd(&m).unwrap();
        let r = rows.min(cols);
        prop_assert_eq!(f.sigma.len(), r);
        prop_assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]));
        let norm2 = m.frobenius_norm().powi(2);
        for k in 1..=r {
            let approx = truncate_reconstruct(&f, k).unwrap();
            let err2 = approx.distance(&m).unwrap().powi(2);
            let tail: f64 = f.sigma[k..].iter().map(|s| s * s).sum();
            prop_assert!((err2 - tail).abs() <= 1e-8 * norm2);
        }
    }

    #[test]
    fn lasso_sparsity_shrinks_along_grid(seed in 0u64..500) {
        let x = standardize(&gaussian(40, 5, seed)).unwrap().z;
        let y: Vec<f64> = (0..40).map(|i| 1.0 * x.get(i, 0) - 0.6 * x.get(i, 4)).collect();
        let (report, _) = lasso_cv(&x, &y, &CvOptions { seed, ..CvOptions::default() }).unwrap();
        prop_assert!(report.path_nonzero.windows(2).all(|w| w[1] <= w[0]));
    }
}
