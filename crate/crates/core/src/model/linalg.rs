//! Row-major dense matrices and the three matmul shapes backprop needs.

use super::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn zeros_like(&self) -> Self {
        Mat::zeros(self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn select_rows(&self, rows: &[usize]) -> Mat<T> {
        let mut out = Mat::zeros(rows.len(), self.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(r));
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_row_vector(&mut self, bias: &[T]) {
        for r in 0..self.rows {
            for (a, &b) in self.row_mut(r).iter_mut().zip(bias) {
                *a += b;
            }
        }
    }

    /// `acc[c] += Σ_r self[r][c]`.
    pub fn accumulate_column_sums(&self, acc: &mut [T]) {
        for r in 0..self.rows {
            for (a, &v) in acc.iter_mut().zip(self.row(r)) {
                *a += v;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::of(v.to_f64c())).collect(),
        }
    }
}

/// `a (r×k) · b (k×c)`.
pub fn matmul<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in a.row(i).iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (r×k) · bᵀ` for `b (c×k)`.
pub fn matmul_bt<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    assert_eq!(a.cols, b.cols, "matmul_bt inner dimension");
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    out
}

/// `acc += aᵀ (c×r) · b (r×k)` for `a (r×c)`.
pub fn matmul_at_acc<T: Scalar>(acc: &mut Mat<T>, a: &Mat<T>, b: &Mat<T>) {
    assert_eq!(a.rows, b.rows, "matmul_at inner dimension");
    assert_eq!((acc.rows, acc.cols), (a.cols, b.cols), "matmul_at output shape");
    for r in 0..a.rows {
        let br = b.row(r);
        for (c, &av) in a.row(r).iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in acc.row_mut(c).iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    row.iter().map(|&v| v - log_z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shapes_agree() {
        let a = Mat::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
        let bt = Mat::from_vec(2, 3, vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]);
        assert_eq!(matmul_bt(&a, &bt).data, c.data);
        // a = atᵀ, so atᵀ·b reproduces a·b
        let at = Mat::from_vec(3, 2, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let mut acc = Mat::zeros(2, 2);
        matmul_at_acc(&mut acc, &at, &b);
        assert_eq!(acc.data, c.data);
    }

    #[test]
    fn log_softmax_normalizes() {
        let ls = log_softmax(&[1.0f64, 2.0, 3.0]);
        let total: f64 = ls.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let uniform = log_softmax(&[0.0f64; 4]);
        assert!((uniform[0] + 4f64.ln()).abs() < 1e-12);
    }
}
