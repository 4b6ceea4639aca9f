//! Minimal row-major matrix used by the reader; just the handful of
//! operations forward/backward passes need.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: Vec<Vec<S>>) -> Self {
        let r = rows.len();
        let c = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut S {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn zero_out(&mut self) {
        self.data.iter_mut().for_each(|v| *v = S::zero());
    }

    pub fn add_assign(&mut self, other: &Mat<S>) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, factor: S) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// self (n x k) * other (k x m) -> n x m
    pub fn matmul(&self, other: &Mat<S>) -> Mat<S> {
        assert_eq!(self.cols, other.rows, "matmul dims");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == S::zero() {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * *b;
                }
            }
        }
        out
    }

    /// self (n x k) * otherᵀ (m x k) -> n x m
    pub fn matmul_nt(&self, other: &Mat<S>) -> Mat<S> {
        assert_eq!(self.cols, other.cols, "matmul_nt dims");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                let b_row = other.row(j);
                let mut acc = S::zero();
                for (a, b) in a_row.iter().zip(b_row) {
                    acc += *a * *b;
                }
                *out.at_mut(i, j) = acc;
            }
        }
        out
    }

    /// selfᵀ (k x n) * other (k x m) -> n x m, accumulated into `into`.
    pub fn matmul_tn_into(&self, other: &Mat<S>, into: &mut Mat<S>) {
        assert_eq!(self.rows, other.rows, "matmul_tn dims");
        debug_assert_eq!((into.rows, into.cols), (self.cols, other.cols));
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
            for (i, a) in a_row.iter().enumerate() {
                if *a == S::zero() {
                    continue;
                }
                let out_row = &mut into.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += *a * *b;
                }
            }
        }
    }

    /// selfᵀ * other as a fresh matrix.
    pub fn matmul_tn(&self, other: &Mat<S>) -> Mat<S> {
        let mut out = Mat::zeros(self.cols, other.cols);
        self.matmul_tn_into(other, &mut out);
        out
    }

    /// Stacks blocks vertically.
    pub fn vstack(blocks: &[&Mat<S>]) -> Mat<S> {
        let cols = blocks[0].cols;
        let rows = blocks.iter().map(|b| b.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for b in blocks {
            assert_eq!(b.cols, cols, "vstack cols");
            data.extend_from_slice(&b.data);
        }
        Mat { rows, cols, data }
    }

    pub fn frobenius_sq(&self) -> S {
        self.data.iter().map(|v| *v * *v).sum()
    }
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// In-place row softmax with max subtraction; entries at `masked` column
/// indices >= `limit[r]` are treated as -inf when `limit` is provided.
pub fn softmax_rows_masked<S: Scalar>(mat: &mut Mat<S>, causal: bool) {
    let cols = mat.cols();
    for r in 0..mat.rows() {
        let limit = if causal { r + 1 } else { cols };
        let row = mat.row_mut(r);
        let mut max = S::neg_infinity();
        for &v in row.iter().take(limit) {
            if v > max {
                max = v;
            }
        }
        let mut sum = S::zero();
        for v in row.iter_mut().take(limit) {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut().take(limit) {
            *v /= sum;
        }
        for v in row.iter_mut().skip(limit) {
            *v = S::zero();
        }
    }
}
