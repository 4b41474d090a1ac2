//! Row-major matrix storage and the handful of dense kernels everything
//! else builds on. Shapes are validated at the call boundary; inner loops
//! use slices so the compiler can drop bounds checks.

use crate::error::{Error, Result};

/// Dense row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "Matrix::from_vec",
                expected: format!("{rows}x{cols} = {} elements", rows * cols),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Dot product of two equal-length slices.
///
/// Eight independent accumulators with a fixed reduction tree: the
/// summation order is deterministic yet leaves the compiler free to use
/// SIMD lanes, unlike a single serial chain.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let ca = &a[i * 8..i * 8 + 8];
        let cb = &b[i * 8..i * 8 + 8];
        for j in 0..8 {
            acc[j] += ca[j] * cb[j];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// y = W x for row-major W [out x in].
pub fn matvec(w: &Matrix, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(w.cols, x.len());
    debug_assert_eq!(w.rows, y.len());
    for (r, out) in y.iter_mut().enumerate() {
        *out = dot(w.row(r), x);
    }
}

/// y += a * x (axpy).
#[inline]
pub fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += a * xi;
    }
}

/// x^T W accumulated into y: y[c] += sum_r x[r] * W[r][c].
/// This is the transpose product used by backprop through `matvec`.
pub fn matvec_t_acc(w: &Matrix, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(w.rows, x.len());
    debug_assert_eq!(w.cols, y.len());
    for (r, &xr) in x.iter().enumerate() {
        if xr != 0.0 {
            axpy(xr, w.row(r), y);
        }
    }
}

/// Rank-1 update dW += dy * x^T for row-major dW [out x in].
pub fn outer_acc(dw: &mut Matrix, dy: &[f32], x: &[f32]) {
    debug_assert_eq!(dw.rows, dy.len());
    debug_assert_eq!(dw.cols, x.len());
    for (r, &d) in dy.iter().enumerate() {
        if d != 0.0 {
            axpy(d, x, dw.row_mut(r));
        }
    }
}

/// L2 norm of a slice, accumulated in f64.
pub fn l2_norm(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_small() {
        let w = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut y = [0.0f32; 2];
        matvec(&w, &[1.0, 0.0, -1.0], &mut y);
        assert_eq!(y, [-2.0, -2.0]);
    }

    #[test]
    fn transpose_product_matches_naive() {
        let w = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let x = [0.5f32, -1.5];
        let mut y = [0.0f32; 3];
        matvec_t_acc(&w, &x, &mut y);
        for c in 0..3 {
            let want: f32 = (0..2).map(|r| x[r] * w.row(r)[c]).sum();
            assert!((y[c] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn from_vec_rejects_bad_shape() {
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
