//! Dense row-major tensor of 64-bit reals.
//!
//! Tensors are plain immutable value containers. Differentiation happens in
//! [`crate::graph`], which stores `Tensor` values at its nodes; the raw
//! numeric kernels shared by the graph and by no-grad inference live here.

use crate::error::{Error, Result};

/// An n-dimensional array of `f64` in row-major order. Rank 0 (empty shape)
/// is a scalar; `product(shape) == data.len()` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from an explicit shape and row-major data.
    pub fn from_shape_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_shape_vec(vec![rows, cols], data)
    }

    /// Matrix built from row slices; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::shape("from_rows: no rows"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows: ragged rows"));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor { shape: other.shape.clone(), data: vec![0.0; other.data.len()] }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![v; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Scalar value; panics on non-scalars (internal misuse, not input data).
    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.numel() == 1, "scalar_value on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    /// Row `r` of a 1-D (r must be 0) or 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry, first occurrence on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

/// First index of the largest value in a slice (ties broken low).
pub fn argmax_slice(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Normalizes a slice to unit L2 norm in place; errors on zero norm.
pub fn l2_normalize_in_place(a: &mut [f64]) -> Result<()> {
    let n = l2_norm(a);
    if n == 0.0 {
        return Err(Error::domain("cannot normalize a zero vector"));
    }
    for v in a.iter_mut() {
        *v /= n;
    }
    Ok(())
}

// ── Raw kernels ─────────────────────────────────────────────────────────
// Shared by graph forward passes and by no-grad inference so that both
// routes produce bit-identical values.

/// C\[m,n\] = A\[m,k\] · B\[k,n\].
pub fn matmul_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += av * b[p * n + j];
            }
        }
    }
    c
}

/// y\[m\] = A\[m,k\] · x\[k\].
pub fn matmul_mv(a: &[f64], x: &[f64], m: usize, k: usize) -> Vec<f64> {
    (0..m).map(|i| dot(&a[i * k..(i + 1) * k], x)).collect()
}

/// y\[n\] = x\[k\] · A\[k,n\].
pub fn matmul_vm(x: &[f64], a: &[f64], k: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for p in 0..k {
        let xv = x[p];
        if xv == 0.0 {
            continue;
        }
        for j in 0..n {
            y[j] += xv * a[p * n + j];
        }
    }
    y
}

/// Numerically stable softmax of one row (max subtraction).
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data_length() {
        assert!(Tensor::from_shape_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_shape_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_shape_vec(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero_with_one_element() {
        let s = Tensor::scalar(4.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.scalar_value(), 4.5);
    }

    #[test]
    fn matmul_kernels_agree_on_small_case() {
        // [[1,2],[3,4]] · [5,6] = [17, 39]
        let a = [1.0, 2.0, 3.0, 4.0];
        let x = [5.0, 6.0];
        assert_eq!(matmul_mv(&a, &x, 2, 2), vec![17.0, 39.0]);
        let c = matmul_mm(&a, &[5.0, 6.0], 2, 2, 1);
        assert_eq!(c, vec![17.0, 39.0]);
        assert_eq!(matmul_vm(&x, &a, 2, 2), vec![23.0, 34.0]);
    }

    #[test]
    fn softmax_row_is_symmetric_on_equal_inputs() {
        let p = softmax_row(&[0.0, 0.0]);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn normalize_rejects_zero_vector() {
        let mut z = [0.0, 0.0];
        assert!(l2_normalize_in_place(&mut z).is_err());
    }
}
