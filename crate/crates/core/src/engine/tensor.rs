use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Dim, DimKind};

/// Dense row-major 2-D block of `f64`. Rank-0 values are stored as 1x1.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Matrix {
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Matrix {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn scalar(value: f64) -> Matrix {
        Matrix { rows: 1, cols: 1, data: vec![value] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Rows `[start, end)`.
    pub fn rows_slice(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_vec(end - start, self.cols, self.data[start * self.cols..end * self.cols].to_vec())
    }

    pub fn sub_block(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Matrix {
        let mut out = Vec::with_capacity((r1 - r0) * (c1 - c0));
        for r in r0..r1 {
            out.extend_from_slice(&self.data[r * self.cols + c0..r * self.cols + c1]);
        }
        Matrix::from_vec(r1 - r0, c1 - c0, out)
    }

    pub fn write_rows(&mut self, start: usize, block: &Matrix) {
        assert_eq!(block.cols, self.cols);
        self.data[start * self.cols..(start + block.rows) * self.cols].copy_from_slice(&block.data);
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self @ rhs`, accumulating the inner dimension in ascending order.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.cols {
                let mut acc = 0.0;
                for (k, &av) in a.iter().enumerate() {
                    acc += av * rhs.data[k * rhs.cols + j];
                }
                out.data[i * rhs.cols + j] = acc;
            }
        }
        out
    }

    /// `self @ rhs^T` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.cols, "matmul_t inner dimension");
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                let b = rhs.row(j);
                let mut acc = 0.0;
                for k in 0..a.len() {
                    acc += a[k] * b[k];
                }
                out.data[i * rhs.rows + j] = acc;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        max_abs_diff(&self.data, &other.data)
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|x| x.is_nan())
    }
}

/// Largest elementwise absolute difference; any NaN makes the result infinite.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| {
        let d = (x - y).abs();
        if d.is_nan() {
            f64::INFINITY
        } else {
            m.max(d)
        }
    })
}

/// Rank-4 `[batch, heads, rows, cols]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    pub shape: Vec<Dim>,
    pub data: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(shape: Vec<Dim>) -> DenseTensor {
        assert_eq!(shape.len(), 4, "dense tensors are [batch, heads, rows, cols]");
        let n = shape.iter().map(Dim::extent).product();
        DenseTensor { shape, data: vec![0.0; n] }
    }

    pub fn batch(&self) -> usize {
        self.shape[0].extent()
    }

    pub fn heads(&self) -> usize {
        self.shape[1].extent()
    }

    pub fn rows(&self) -> usize {
        self.shape[2].extent()
    }

    pub fn cols(&self) -> usize {
        self.shape[3].extent()
    }

    pub fn slice_len(&self) -> usize {
        self.rows() * self.cols()
    }

    fn offset(&self, b: usize, h: usize) -> usize {
        (b * self.heads() + h) * self.slice_len()
    }

    pub fn slice(&self, b: usize, h: usize) -> Matrix {
        let o = self.offset(b, h);
        Matrix::from_vec(self.rows(), self.cols(), self.data[o..o + self.slice_len()].to_vec())
    }

    pub fn set_slice(&mut self, b: usize, h: usize, m: &Matrix) {
        assert_eq!((m.rows, m.cols), (self.rows(), self.cols()));
        let o = self.offset(b, h);
        let n = self.slice_len();
        self.data[o..o + n].copy_from_slice(&m.data);
    }

    pub fn slice_at(&self, b: usize, h: usize, r: usize, c: usize) -> f64 {
        self.data[((b * self.heads() + h) * self.rows() + r) * self.cols() + c]
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> f64 {
        max_abs_diff(&self.data, &other.data)
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|x| x.is_nan())
    }

    /// Uniform fill in `[lo, hi]` from the counter-based generator.
    ///
    /// The generator is ChaCha8 seeded with `seed` (via `seed_from_u64`) on
    /// stream `stream`; each element consumes one `u64`, mapped to
    /// `u = (x >> 11) * 2^-53` and then to `lo + (hi - lo) * u`.
    pub fn uniform(shape: Vec<Dim>, seed: u64, stream: u64, lo: f64, hi: f64) -> DenseTensor {
        let mut t = DenseTensor::zeros(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        for x in &mut t.data {
            let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            *x = lo + (hi - lo) * u;
        }
        t
    }
}

pub fn dense_shape(batch: usize, heads: usize, rows: Dim, cols: Dim) -> Vec<Dim> {
    vec![Dim::of(DimKind::Batch, batch), Dim::of(DimKind::Heads, heads), rows, cols]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_is_reproducible_and_bounded() {
        let shape = dense_shape(1, 2, Dim::of(DimKind::SeqQ, 8), Dim::of(DimKind::DimQK, 4));
        let a = DenseTensor::uniform(shape.clone(), 7, 0, -1.0, 1.0);
        let b = DenseTensor::uniform(shape.clone(), 7, 0, -1.0, 1.0);
        let c = DenseTensor::uniform(shape, 7, 1, -1.0, 1.0);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn matmul_t_matches_transpose() {
        let a = Matrix::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Matrix::from_vec(2, 3, vec![0.5, -1., 2., 1., 1., 1.]);
        assert_eq!(a.matmul_t(&b), a.matmul(&b.transpose()));
    }
}
