//! Dense row-major 2-D float32 tensors and the blocked matmul kernel.
//!
//! The matmul kernel tiles over rows and the inner dimension for cache
//! locality and may fan out across a thread pool, but every output element
//! accumulates its products in ascending inner-index order. Results are
//! therefore bit-identical whatever the thread count or tile size, which is
//! what lets replicated training assert byte-equal parameters.

use thiserror::Error;

/// Default kernel tile edge when no execution plan is in play.
pub const DEFAULT_BLOCK: usize = 64;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    BadLength { len: usize, rows: usize, cols: usize },
}

/// Dense row-major float32 matrix.
///
/// Tensors are value-like: cheap to clone relative to the compute spent on
/// them, safe to read from many threads, never mutated concurrently.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::BadLength { len: data.len(), rows, cols });
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Builds a tensor from nested rows. Panics on ragged input; intended for
    /// literals in tests and small fixtures.
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged row in Tensor::from_rows");
            data.extend_from_slice(row);
        }
        Tensor { rows: r, cols: c, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Extracts the listed rows, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor { rows: indices.len(), cols: self.cols, data }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Matrix product with the reference single-thread configuration.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.matmul_with(other, 1, DEFAULT_BLOCK)
    }

    /// Matrix product on `threads` workers with tile edge `block`.
    ///
    /// Output rows are partitioned contiguously across threads; each element
    /// still accumulates in ascending inner-index order, so the result is
    /// bit-identical for every `(threads, block)` choice.
    pub fn matmul_with(
        &self,
        other: &Tensor,
        threads: usize,
        block: usize,
    ) -> Result<Tensor, TensorError> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: other.rows,
                rhs_cols: other.cols,
            });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        let block = block.max(1);
        let threads = threads.max(1).min(self.rows.max(1));
        if threads == 1 || self.rows < 2 * threads {
            matmul_rows(
                &self.data,
                &other.data,
                &mut out.data,
                0,
                self.rows,
                self.cols,
                other.cols,
                block,
            );
            return Ok(out);
        }

        let n = other.cols;
        let chunk_sizes = crate::split_sizes(self.rows, threads);
        std::thread::scope(|scope| {
            let mut rest: &mut [f32] = &mut out.data;
            let mut row0 = 0usize;
            for &chunk in &chunk_sizes {
                let (head, tail) = rest.split_at_mut(chunk * n);
                rest = tail;
                let a = &self.data;
                let b = &other.data;
                let (i0, i1) = (row0, row0 + chunk);
                let k_dim = self.cols;
                scope.spawn(move || {
                    matmul_rows(a, b, head, i0, i1, k_dim, n, block);
                });
                row0 += chunk;
            }
        });
        Ok(out)
    }

    /// Largest absolute entry; 0 for empty tensors.
    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Computes output rows `i0..i1` of `a (m x k_dim) * b (k_dim x n)` into
/// `out`, which holds exactly those rows. Tiles over rows and the inner
/// dimension; the inner index always ascends per output element.
#[allow(clippy::too_many_arguments)]
fn matmul_rows(
    a: &[f32],
    b: &[f32],
    out: &mut [f32],
    i0: usize,
    i1: usize,
    k_dim: usize,
    n: usize,
    block: usize,
) {
    for ib in (i0..i1).step_by(block) {
        let ie = (ib + block).min(i1);
        for kb in (0..k_dim).step_by(block) {
            let ke = (kb + block).min(k_dim);
            for i in ib..ie {
                let out_row = &mut out[(i - i0) * n..(i - i0) * n + n];
                let a_row = &a[i * k_dim..i * k_dim + k_dim];
                for k in kb..ke {
                    let aik = a_row[k];
                    let b_row = &b[k * n..k * n + n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += aik * bv;
                    }
                }
            }
        }
    }
}
