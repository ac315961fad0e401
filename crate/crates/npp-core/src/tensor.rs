//! Dense row-major f64 tensor and the matrix kernels the model core needs.
//!
//! Everything downstream (quantizers, adapters, datapath simulators) moves
//! values through this type. FP64 is the reference arithmetic; lower
//! precisions are simulated on top of it.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense real-valued array with shape, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that the element count matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(
                "tensor constructed with non-finite values".into(),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// 2-D convenience constructor.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows of a 2-D tensor (count for 1-D is 1).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns of a 1-D or 2-D tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_2d(&self) -> bool {
        self.shape.len() == 2
    }

    /// Max absolute value, 0.0 for the all-zero tensor.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self @ other` for 2-D operands.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul {m}x{k} @ {k2}x{n}: inner dimensions differ"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor::from_rows(m, n, out)
    }
}

/// C[m,n] += A[m,k] @ B[k,n]. ikj order so the inner loop runs over
/// contiguous rows of B and C.
pub fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// C[k,n] += A[m,k]^T @ G[m,n]; used for weight gradients without
/// materializing the transpose.
pub fn matmul_at_b_into(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in c_row.iter_mut().zip(g_row) {
                *cv += a_ip * gv;
            }
        }
    }
}

/// C[m,r] += A[m,n] @ B[r,n]^T; used for input gradients.
pub fn matmul_a_bt_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, r: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), r * n);
    debug_assert_eq!(c.len(), m * r);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * r..(i + 1) * r];
        for (q, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[q * n..(q + 1) * n];
            let mut s = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            *cv += s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent oracle: textbook triple loop in ijk order.
    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn arange(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i as f64) * 0.37 - 3.0).collect()
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let (m, k, n) = (5, 7, 4);
        let a = arange(m * k);
        let b = arange(k * n);
        let t = Tensor::from_rows(m, k, a.clone()).unwrap();
        let u = Tensor::from_rows(k, n, b.clone()).unwrap();
        let c = t.matmul(&u).unwrap();
        let oracle = naive_matmul(&a, &b, m, k, n);
        for (x, y) in c.data().iter().zip(&oracle) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn transpose_kernels_match_naive_oracle() {
        let (m, k, n) = (6, 3, 5);
        let a = arange(m * k);
        let g = arange(m * n);
        // A^T @ G
        let mut c = vec![0.0; k * n];
        matmul_at_b_into(&a, &g, &mut c, m, k, n);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let oracle = naive_matmul(&at, &g, k, m, n);
        for (x, y) in c.iter().zip(&oracle) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
        // A @ B^T
        let b = arange(n * k);
        let mut c2 = vec![0.0; m * n];
        matmul_a_bt_into(&a, &b, &mut c2, m, k, n);
        let mut bt = vec![0.0; k * n];
        for q in 0..n {
            for j in 0..k {
                bt[j * n + q] = b[q * k + j];
            }
        }
        let oracle2 = naive_matmul(&a, &bt, m, k, n);
        for (x, y) in c2.iter().zip(&oracle2) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
    }
}
