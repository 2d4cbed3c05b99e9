//! Dense matrices and symmetric sparse matrices used by the diff engine and
//! the graph shift operator.
//!
//! Everything is f64; barrier terms near a constraint boundary need the
//! headroom, so there is no f32 path.

use thiserror::Error;

/// Row-major dense real matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length {} != {rows}x{cols}", data.len());
        Matrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn scalar(x: f64) -> Self {
        Matrix { rows: 1, cols: 1, data: vec![x] }
    }

    /// Column vector from a slice.
    pub fn column_vector(data: &[f64]) -> Self {
        Matrix { rows: data.len(), cols: 1, data: data.to_vec() }
    }

    /// Copies column `c` out as a plain vector.
    pub fn column(&self, c: usize) -> Vec<f64> {
        assert!(c < self.cols, "column {c} out of range for {} columns", self.cols);
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, x: f64) {
        self.data[r * self.cols + c] = x;
    }

    pub fn fill(&mut self, x: f64) {
        self.data.fill(x);
    }

    /// `out = self * rhs`. Shapes must already conform.
    pub fn matmul_into(&self, rhs: &Matrix, out: &mut Matrix) {
        debug_assert_eq!(self.cols, rhs.rows);
        debug_assert_eq!(out.rows, self.rows);
        debug_assert_eq!(out.cols, rhs.cols);
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        out.data.fill(0.0);
        for i in 0..n {
            let lhs_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out.data[i * m..(i + 1) * m];
            for (p, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
    }

    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul: {}x{} times {}x{}", self.rows, self.cols, rhs.rows, rhs.cols);
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        self.matmul_into(rhs, &mut out);
        out
    }

    /// Applies `f` to every entry in place.
    pub fn map_in_place(&mut self, f: impl Fn(f64) -> f64) {
        for x in &mut self.data {
            *x = f(*x);
        }
    }
}

impl std::ops::AddAssign<&Matrix> for Matrix {
    fn add_assign(&mut self, rhs: &Matrix) {
        assert_eq!(self.shape(), rhs.shape(), "add_assign: shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("power iteration did not converge within {0} iterations")]
    NoConvergence(usize),
}

/// Symmetric sparse matrix in CSR form. Construction mirrors each undirected
/// entry, so callers pass every off-diagonal pair once.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSym {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseSym {
    /// `pairs` holds off-diagonal entries (i, j, w) with i != j, one per
    /// unordered pair; the (j, i) mirror is added here.
    pub fn from_pairs(n: usize, pairs: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; n];
        for &(i, j, _) in pairs {
            assert!(i != j, "diagonal entries are not representable");
            assert!(i < n && j < n, "index out of range");
            counts[i] += 1;
            counts[j] += 1;
        }
        let mut row_ptr = vec![0usize; n + 1];
        for i in 0..n {
            row_ptr[i + 1] = row_ptr[i] + counts[i];
        }
        let nnz = row_ptr[n];
        let mut col_idx = vec![0usize; nnz];
        let mut vals = vec![0.0; nnz];
        let mut cursor = row_ptr.clone();
        for &(i, j, w) in pairs {
            col_idx[cursor[i]] = j;
            vals[cursor[i]] = w;
            cursor[i] += 1;
            col_idx[cursor[j]] = i;
            vals[cursor[j]] = w;
            cursor[j] += 1;
        }
        // Sort each row by column for reproducible application order.
        for i in 0..n {
            let lo = row_ptr[i];
            let hi = row_ptr[i + 1];
            let mut entries: Vec<(usize, f64)> =
                col_idx[lo..hi].iter().copied().zip(vals[lo..hi].iter().copied()).collect();
            entries.sort_by_key(|&(c, _)| c);
            for (k, (c, v)) in entries.into_iter().enumerate() {
                col_idx[lo + k] = c;
                vals[lo + k] = v;
            }
        }
        SparseSym { n, row_ptr, col_idx, vals }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.vals.len() / 2
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (i, self.col_idx[k], self.vals[k]))
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        match self.col_idx[lo..hi].binary_search(&j) {
            Ok(k) => self.vals[lo + k],
            Err(_) => 0.0,
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.vals {
            *v *= c;
        }
    }

    /// `out = A * x` where `x` is n-by-f.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        self.apply_into(x, &mut out);
        out
    }

    pub fn apply_into(&self, x: &Matrix, out: &mut Matrix) {
        debug_assert_eq!(x.rows(), self.n);
        debug_assert_eq!(out.shape(), x.shape());
        let f = x.cols();
        out.data_mut().fill(0.0);
        for i in 0..self.n {
            let out_row_start = i * f;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                let w = self.vals[k];
                let x_row = &x.data()[j * f..(j + 1) * f];
                let out_row = &mut out.data_mut()[out_row_start..out_row_start + f];
                for (o, &v) in out_row.iter_mut().zip(x_row) {
                    *o += w * v;
                }
            }
        }
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for (i, j, w) in self.entries() {
            m.set(i, j, w);
        }
        m
    }

    /// Largest-magnitude eigenvalue by power iteration.
    ///
    /// The matrix is nonnegative and symmetric in every use here, so the
    /// spectral radius equals the Perron eigenvalue; iterating on A + rI
    /// keeps that eigenvalue strictly dominant even for bipartite graphs.
    pub fn spectral_radius(&self, tol: f64, max_iters: usize) -> Result<f64, SpectralError> {
        let max_abs_row_sum = (0..self.n)
            .map(|i| {
                self.vals[self.row_ptr[i]..self.row_ptr[i + 1]].iter().map(|v| v.abs()).sum::<f64>()
            })
            .fold(0.0_f64, f64::max);
        if max_abs_row_sum == 0.0 {
            return Ok(0.0);
        }
        let shift = 0.5 * max_abs_row_sum;
        let mut x = Matrix::from_vec(self.n, 1, vec![1.0 / (self.n as f64).sqrt(); self.n]);
        let mut y = Matrix::zeros(self.n, 1);
        let mut lambda_prev = f64::INFINITY;
        for _ in 0..max_iters {
            self.apply_into(&x, &mut y);
            for (yi, xi) in y.data_mut().iter_mut().zip(x.data()) {
                *yi += shift * xi;
            }
            // Rayleigh quotient with ||x|| = 1.
            let lambda: f64 = x.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let norm = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Ok(0.0);
            }
            for (xi, yi) in x.data_mut().iter_mut().zip(y.data()) {
                *xi = yi / norm;
            }
            if (lambda - lambda_prev).abs() <= tol * lambda.abs().max(1.0) {
                return Ok(lambda - shift);
            }
            lambda_prev = lambda;
        }
        Err(SpectralError::NoConvergence(max_iters))
    }
}
