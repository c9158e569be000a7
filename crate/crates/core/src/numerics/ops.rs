//! Row softmax, layer normalization and GELU, each with its backward pass.

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

/// Gradient of `softmax_rows` given its output `y` and the upstream `dy`:
/// `dx = y ∘ (dy − rowsum(dy ∘ y))`.
pub fn softmax_rows_backward(y: &Matrix, dy: &Matrix) -> Result<Matrix> {
    if y.shape() != dy.shape() {
        return Err(Error::shape(
            "softmax_rows_backward",
            format!("{:?} vs {:?}", y.shape(), dy.shape()),
        ));
    }
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let (yr, dyr) = (y.row(i), dy.row(i));
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((o, &a), &b) in dx.row_mut(i).iter_mut().zip(yr).zip(dyr) {
            *o = a * (b - dot);
        }
    }
    Ok(dx)
}

/// Per-row statistics kept by [`layer_norm`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

/// `y = gamma ∘ (x − mean) / sqrt(var + eps) + beta` per row, with the
/// population variance.
pub fn layer_norm(
    x: &Matrix,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Matrix, LayerNormCache)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "gamma/beta lengths {}/{} for {d} columns",
                gamma.len(),
                beta.len()
            ),
        ));
    }
    let mut normalized = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        inv_std.push(r);
        let nrow = normalized.row_mut(i);
        for (n, v) in nrow.iter_mut().zip(row) {
            *n = (v - mean) * r;
        }
        let nrow = normalized.row(i);
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = gamma[j] * nrow[j] + beta[j];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Gradients of layer norm: returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &[f64],
    dy: &Matrix,
) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    let xhat = &cache.normalized;
    if xhat.shape() != dy.shape() || gamma.len() != dy.cols() {
        return Err(Error::shape(
            "layer_norm_backward",
            format!("{:?} vs {:?}", xhat.shape(), dy.shape()),
        ));
    }
    let d = dy.cols();
    let mut dx = Matrix::zeros(dy.rows(), d);
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for i in 0..dy.rows() {
        let (dyr, xr) = (dy.row(i), xhat.row(i));
        for j in 0..d {
            dgamma[j] += dyr[j] * xr[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_x = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let r = cache.inv_std[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = r * (dxhat[j] - mean_dxhat - xr[j] * mean_dxhat_x);
        }
    }
    Ok((dx, dgamma, dbeta))
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// The tanh term shared by [`gelu`] and [`gelu_grad`].
#[inline]
pub fn gelu_tanh(x: f64) -> f64 {
    (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh()
}

/// GELU, tanh approximation:
/// `gelu(x) = 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    gelu_from_tanh(x, gelu_tanh(x))
}

#[inline]
pub fn gelu_from_tanh(x: f64, t: f64) -> f64 {
    0.5 * x * (1.0 + t)
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    gelu_grad_from_tanh(x, gelu_tanh(x))
}

#[inline]
pub fn gelu_grad_from_tanh(x: f64, t: f64) -> f64 {
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Matrix::from_rows(&[[0.0, 0.0]]).unwrap());
        assert_eq!(s.as_slice(), &[0.5, 0.5]);

        let s = softmax_rows(&Matrix::from_rows(&[[1000.0, 1000.0 + 2f64.ln()]]).unwrap());
        assert_abs_diff_eq!(s.get(0, 0), 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.get(0, 1), 2.0 / 3.0, epsilon = 1e-12);

        let s = softmax_rows(&Matrix::from_rows(&[[-42.0]]).unwrap());
        assert_eq!(s.as_slice(), &[1.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let x = Matrix::from_rows(&[[5.0, 5.0, 5.0]]).unwrap();
        let (y, _) = layer_norm(&x, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert_eq!(y.as_slice(), &[0.0, 0.0, 0.0]);

        let x = Matrix::from_rows(&[[1.0, 3.0]]).unwrap();
        let (y, _) = layer_norm(&x, &[1.0; 2], &[0.0; 2], 1e-300).unwrap();
        assert_abs_diff_eq!(y.get(0, 0), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y.get(0, 1), 1.0, epsilon = 1e-12);

        let x = Matrix::from_rows(&[[0.3, -2.0, 9.0]]).unwrap();
        let beta = [0.1, 0.2, 0.3];
        let (y, _) = layer_norm(&x, &[0.0; 3], &beta, 1e-5).unwrap();
        assert_eq!(y.as_slice(), &beta);
    }

    #[test]
    fn layer_norm_rejects_bad_affine() {
        let x = Matrix::zeros(2, 3);
        assert!(layer_norm(&x, &[1.0; 2], &[0.0; 3], 1e-5).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(0.0), 0.0);
        assert_abs_diff_eq!(gelu(1.0), 0.8412, epsilon = 1e-4);
        assert!(gelu(-10.0).abs() < 1e-4);
    }

    #[test]
    fn gelu_grad_matches_finite_differences() {
        let h = 1e-5;
        for i in -40..=40 {
            let x = i as f64 * 0.17;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_grad(x), fd, epsilon = 1e-6);
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let x = Matrix::from_fn(3, 4, |i, j| ((i * 4 + j) as f64 * 1.3).sin() * 2.0);
        let w = Matrix::from_fn(3, 4, |i, j| ((i + 3 * j) as f64 * 0.7).cos());
        let loss = |m: &Matrix| softmax_rows(m).hadamard(&w).unwrap().sum();
        let dx = softmax_rows_backward(&softmax_rows(&x), &w).unwrap();
        let h = 1e-4;
        for i in 0..3 {
            for j in 0..4 {
                let mut p = x.clone();
                p.add_at(i, j, h);
                let mut m = x.clone();
                m.add_at(i, j, -h);
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!(rel_err(dx.get(i, j), fd) < 1e-6, "({i},{j})");
            }
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = Matrix::from_fn(3, 5, |i, j| ((i * 5 + j) as f64 * 0.9).sin() * 3.0 + i as f64);
        let gamma: Vec<f64> = (0..5).map(|j| 0.5 + 0.3 * j as f64).collect();
        let beta: Vec<f64> = (0..5).map(|j| -0.2 * j as f64).collect();
        let w = Matrix::from_fn(3, 5, |i, j| ((2 * i + j) as f64 * 0.37).cos());
        let eps = 1e-5;
        let loss = |x: &Matrix, g: &[f64], b: &[f64]| {
            layer_norm(x, g, b, eps).unwrap().0.hadamard(&w).unwrap().sum()
        };
        let (_, cache) = layer_norm(&x, &gamma, &beta, eps).unwrap();
        let (dx, dg, db) = layer_norm_backward(&cache, &gamma, &w).unwrap();
        let h = 1e-4;
        for i in 0..3 {
            for j in 0..5 {
                let mut p = x.clone();
                p.add_at(i, j, h);
                let mut m = x.clone();
                m.add_at(i, j, -h);
                let fd = (loss(&p, &gamma, &beta) - loss(&m, &gamma, &beta)) / (2.0 * h);
                assert!(rel_err(dx.get(i, j), fd) < 1e-6, "dx ({i},{j})");
            }
        }
        for j in 0..5 {
            let (mut gp, mut gm) = (gamma.clone(), gamma.clone());
            gp[j] += h;
            gm[j] -= h;
            let fd = (loss(&x, &gp, &beta) - loss(&x, &gm, &beta)) / (2.0 * h);
            assert!(rel_err(dg[j], fd) < 1e-6, "dgamma {j}");
            let (mut bp, mut bm) = (beta.clone(), beta.clone());
            bp[j] += h;
            bm[j] -= h;
            let fd = (loss(&x, &gamma, &bp) - loss(&x, &gamma, &bm)) / (2.0 * h);
            assert!(rel_err(db[j], fd) < 1e-6, "dbeta {j}");
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-1e4f64..1e4, 12)) {
            let m = Matrix::from_vec(3, 4, vals).unwrap();
            let s = softmax_rows(&m);
            for i in 0..3 {
                let sum: f64 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
            prop_assert!(s.is_finite());
        }

        #[test]
        fn softmax_shift_invariant(
            vals in proptest::collection::vec(-50.0f64..50.0, 12),
            shifts in proptest::collection::vec(-100.0f64..100.0, 3),
        ) {
            let m = Matrix::from_vec(3, 4, vals).unwrap();
            let shifted = Matrix::from_fn(3, 4, |i, j| m.get(i, j) + shifts[i]);
            let (a, b) = (softmax_rows(&m), softmax_rows(&shifted));
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
