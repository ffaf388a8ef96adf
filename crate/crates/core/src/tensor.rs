//! Dense row-major `f64` tensors and the matrix kernels everything else is
//! built from.
//!
//! Feature tensors use the `[batch, joints, frames, channels]` layout, so a
//! per-position linear map is a single `(B*N*T) x C_in` by `C_in x C_out`
//! product over contiguous rows.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Default for Tensor {
    fn default() -> Self {
        Tensor::zeros(&[1])
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "axis lengths must be positive: {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a matrix from rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let n = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == n), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor {
            shape: vec![rows.len(), n],
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let [m, n] = self.as_matrix_dims("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    fn as_matrix_dims(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [m, n] => Ok([m, n]),
            _ => Err(Error::dim(op, &self.shape, &[])),
        }
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ([m, k], [k2, n]) = (
        a.as_matrix_dims("matmul").map_err(|_| Error::dim("matmul", a.shape(), b.shape()))?,
        b.as_matrix_dims("matmul").map_err(|_| Error::dim("matmul", a.shape(), b.shape()))?,
    );
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Vector-Jacobian products of `c = a * b` given `dc`: returns `(dc * b^T, a^T * dc)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    let [m, k] = a.as_matrix_dims("matmul_backward")?;
    let [k2, n] = b.as_matrix_dims("matmul_backward")?;
    if k != k2 || dc.shape() != [m, n] {
        return Err(Error::dim("matmul_backward", a.shape(), b.shape()));
    }
    let mut da = vec![0.0; m * k];
    gemm_a_bt(&dc.data, &b.data, &mut da, m, n, k);
    let mut db = vec![0.0; k * n];
    gemm_at_b(&a.data, &dc.data, &mut db, m, k, n);
    Ok((Tensor::new(vec![m, k], da)?, Tensor::new(vec![k, n], db)?))
}

/// `c[m x n] += a[m x k] * b[k x n]`
pub fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    gemm_tiled(&a[..m * k], &b[..k * n], &mut c[..m * n], m, k, n);
}

/// `c[k x n] += a[m x k]^T * b[m x n]`
pub fn gemm_at_b(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    let at = transpose_raw(&a[..m * k], m, k);
    gemm_tiled(&at, &b[..m * n], &mut c[..k * n], k, m, n);
}

/// `c[m x k] += a[m x n] * b[k x n]^T`
pub fn gemm_a_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert!(a.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    let bt = transpose_raw(&b[..k * n], k, n);
    gemm_tiled(&a[..m * n], &bt, &mut c[..m * k], m, n, k);
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for (i, row) in x.chunks_exact(cols).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j * rows + i] = v;
        }
    }
    t
}

const MR: usize = 4;
const NR: usize = 4;

/// Register-tiled `c += a * b` over contiguous row-major operands.
fn gemm_tiled(a: &[f64], b: &[f64], c: &mut [f64], m: usize, red: usize, n: usize) {
    if m == 0 || n == 0 || red == 0 {
        return;
    }
    let m_full = m - m % MR;
    let mut panel = vec![0.0; red * NR];
    for j0 in (0..n).step_by(NR) {
        let w = NR.min(n - j0);
        if w < NR {
            for i in 0..m {
                let arow = &a[i * red..(i + 1) * red];
                for j in j0..n {
                    let mut acc = 0.0;
                    for (p, &av) in arow.iter().enumerate() {
                        acc += av * b[p * n + j];
                    }
                    c[i * n + j] += acc;
                }
            }
            break;
        }
        for (dst, brow) in panel.chunks_exact_mut(NR).zip(b.chunks_exact(n)) {
            dst.copy_from_slice(&brow[j0..j0 + NR]);
        }
        for i0 in (0..m_full).step_by(MR) {
            let a0 = &a[i0 * red..(i0 + 1) * red];
            let a1 = &a[(i0 + 1) * red..(i0 + 2) * red];
            let a2 = &a[(i0 + 2) * red..(i0 + 3) * red];
            let a3 = &a[(i0 + 3) * red..(i0 + 4) * red];
            let mut acc = [[0.0; NR]; MR];
            for ((((bp, &x0), &x1), &x2), &x3) in panel.chunks_exact(NR).zip(a0).zip(a1).zip(a2).zip(a3) {
                let bp: &[f64; NR] = bp.try_into().expect("panel row");
                for q in 0..NR {
                    acc[0][q] += x0 * bp[q];
                    acc[1][q] += x1 * bp[q];
                    acc[2][q] += x2 * bp[q];
                    acc[3][q] += x3 * bp[q];
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let dst = &mut c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
                for (d, v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        for i in m_full..m {
            let arow = &a[i * red..(i + 1) * red];
            let mut acc = [0.0; NR];
            for (bp, &av) in panel.chunks_exact(NR).zip(arow) {
                for q in 0..NR {
                    acc[q] += av * bp[q];
                }
            }
            for (d, v) in c[i * n + j0..i * n + j0 + NR].iter_mut().zip(&acc) {
                *d += v;
            }
        }
    }
}
