//! Slice-level kernels for the forward and backward passes. All matrices
//! are row-major.

pub(crate) const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `a (m x k) * b (k x n)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let br = &b[kk * n..(kk + 1) * n];
            for (x, y) in o.iter_mut().zip(br) {
                *x += av * y;
            }
        }
    }
    out
}

/// `out (k x n) += a^T (k x m) * g (m x n)`.
pub(crate) fn acc_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o = &mut out[kk * n..(kk + 1) * n];
            for (x, y) in o.iter_mut().zip(gr) {
                *x += av * y;
            }
        }
    }
}

/// `g (m x n) * b^T` where `b` is `k x n`; result `m x k`.
pub(crate) fn matmul_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let br = &b[kk * n..(kk + 1) * n];
            out[i * k + kk] = gr.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Row-wise RMS normalization with gain. Returns the output and the
/// per-row inverse RMS.
pub(crate) fn rmsnorm(x: &[f64], gain: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let mut out = vec![0.0; rows * d];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let s = 1.0 / (ms + NORM_EPS).sqrt();
        inv[r] = s;
        for ((o, xv), g) in out[r * d..(r + 1) * d].iter_mut().zip(xr).zip(gain) {
            *o = xv * s * g;
        }
    }
    (out, inv)
}

/// Backward of [`rmsnorm`]: accumulates into `dgain` and returns `dx`.
pub(crate) fn rmsnorm_backward(x: &[f64], gain: &[f64], inv: &[f64], dy: &[f64], dgain: &mut [f64]) -> Vec<f64> {
    let d = gain.len();
    let rows = inv.len();
    let mut dx = vec![0.0; rows * d];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let s = inv[r];
        let mut dot = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xr[j] * s;
            dot += dyr[j] * gain[j] * xr[j];
        }
        let coef = s * s * s * dot / d as f64;
        for j in 0..d {
            dx[r * d + j] = s * gain[j] * dyr[j] - xr[j] * coef;
        }
    }
    dx
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Numerically stable log-softmax of one row.
pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Fixed sinusoidal position code for position `t`.
pub(crate) fn position_code(t: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let pair = (j / 2) as f64;
            let angle = t as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn log_softmax_normalizes() {
        let l = log_softmax(&[1.0, 2.0, 3.0, 1000.0]);
        let total: f64 = l.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transposed_products_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let ab = matmul(&a, &b, 2, 3, 2);
        assert_eq!(ab, vec![0.5, 7.0, 2.0, 16.0]);
        let bt = [1.0, -1.0, 0.5, 0.0, 2.0, 1.0]; // b^T as 2x3
        assert_eq!(matmul_bt(&a, &bt, 2, 3, 2), ab);
        let mut acc = vec![0.0; 6];
        acc_at_b(&a, &ab, 2, 3, 2, &mut acc); // a^T (3x2) * ab (2x2)
        assert_eq!(acc[0], 1.0 * 0.5 + 4.0 * 2.0);
    }
}
