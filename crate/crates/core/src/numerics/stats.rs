use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Column standard deviations below this are treated as zero variance.
pub const ZERO_VARIANCE_TOL: f64 = 1e-12;

/// Column z-scores plus the statistics needed to undo them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardized {
    pub z: Matrix,
    pub means: Vec<f64>,
    /// Sample standard deviations (n - 1 denominator).
    pub stds: Vec<f64>,
    /// Columns with no variance; their z-scores are all zero.
    pub zero_variance: Vec<bool>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation with the n - 1 convention.
pub fn sample_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() as f64 - 1.0)).sqrt()
}

/// Standard error of the mean (sample std / sqrt(n)); zero for n < 2.
pub fn std_error(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    sample_std(xs) / (xs.len() as f64).sqrt()
}

/// Z-scores each column of `x`.
pub fn standardize(x: &Matrix) -> Result<Standardized> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "standardize needs at least 2 samples per column, got {n}"
        )));
    }
    let p = x.cols();
    let mut means = Vec::with_capacity(p);
    let mut stds = Vec::with_capacity(p);
    let mut zero_variance = Vec::with_capacity(p);
    for c in 0..p {
        let col = x.col(c);
        let m = mean(&col);
        let s = sample_std(&col);
        let flat = s <= ZERO_VARIANCE_TOL * (1.0 + m.abs());
        means.push(m);
        stds.push(s);
        zero_variance.push(flat);
    }
    let z = Matrix::from_fn(n, p, |r, c| {
        if zero_variance[c] {
            0.0
        } else {
            (x.get(r, c) - means[c]) / stds[c]
        }
    });
    Ok(Standardized {
        z,
        means,
        stds,
        zero_variance,
    })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation; zero when either input has no variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    pearson(&ranks(xs), &ranks(ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_two_three() {
        let x = Matrix::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let s = standardize(&x).unwrap();
        assert_eq!(s.z.data(), &[-1.0, 0.0, 1.0]);
        assert!(!s.zero_variance[0]);
    }

    #[test]
    fn constant_column_is_flagged() {
        let x = Matrix::new(3, 2, vec![5.0, 1.0, 5.0, 2.0, 5.0, 4.0]).unwrap();
        let s = standardize(&x).unwrap();
        assert!(s.zero_variance[0]);
        assert_eq!(s.z.col(0), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn single_sample_rejected() {
        assert!(standardize(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn matches_naive_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Matrix::from_fn(10, 4, |_, c| rng.random_range(-3.0..3.0) * (c + 1) as f64);
        let s = standardize(&x).unwrap();
        for c in 0..4 {
            let mut sum = 0.0;
            for r in 0..10 {
                sum += x.get(r, c);
            }
            let m = sum / 10.0;
            let mut ss = 0.0;
            for r in 0..10 {
                ss += (x.get(r, c) - m).powi(2);
            }
            let sd = (ss / 9.0).sqrt();
            assert!((s.means[c] - m).abs() < 1e-12);
            assert!((s.stds[c] - sd).abs() < 1e-12);
            let zc = s.z.col(c);
            assert!(mean(&zc).abs() < 1e-10);
            assert!((sample_std(&zc) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_monotone() {
        let x = [0.0, 0.25, 0.5, 0.75, 1.0];
        let y = [0.0, 0.1, 5.0, 5.5, 100.0];
        assert!((spearman(&x, &y) - 1.0).abs() < 1e-15);
    }
}
