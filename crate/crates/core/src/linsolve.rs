//! Sparse row-compressed matrices, BiCGSTAB with Jacobi or ILU(0)
//! preconditioning,
//! and a banded Cholesky factorization for symmetric positive definite
//! systems.

use crate::error::{Error, Result};

/// Compressed sparse row matrix, assembled row by row.
#[derive(Clone, Debug, Default)]
pub struct CsrMatrix {
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn with_capacity(n_cols: usize, nnz: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(n_cols + 1);
        row_ptr.push(0);
        CsrMatrix { n_cols, row_ptr, col_idx: Vec::with_capacity(nnz), values: Vec::with_capacity(nnz) }
    }

    /// Appends one row. Entries with duplicate columns are summed by `mul_vec`.
    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (col, v) in entries {
            debug_assert!(col < self.n_cols);
            self.col_idx.push(col);
            self.values.push(v);
        }
        self.row_ptr.push(self.col_idx.len());
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Stored values in insertion order, for refilling a fixed pattern.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows())
            .map(|r| self.row(r).filter(|(c, _)| *c == r).map(|(_, v)| v).sum())
            .collect()
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for (out, span) in y.iter_mut().zip(self.row_ptr.windows(2)) {
            let (cols, vals) = (&self.col_idx[span[0]..span[1]], &self.values[span[0]..span[1]]);
            *out = cols.iter().zip(vals).map(|(&c, v)| v * x[c]).sum();
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.n_cols]; self.n_rows()];
        for (r, row) in dense.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] += v;
            }
        }
        dense
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// `||b - A x|| / ||b||` of the recursively updated residual.
    pub relative_residual: f64,
}

/// Dot product with four independent partial sums, which lets the compiler
/// vectorise the loop.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Approximate inverse applied as `z = M^{-1} r`.
pub trait Preconditioner {
    fn apply(&self, r: &[f64], z: &mut [f64]);
}

/// Diagonal scaling; zero diagonal entries are left unscaled.
#[derive(Clone, Debug)]
pub struct Jacobi {
    inv_diag: Vec<f64>,
}

impl Jacobi {
    pub fn new(a: &CsrMatrix) -> Self {
        let inv_diag = a.diagonal().into_iter().map(|d| if d != 0.0 { 1.0 / d } else { 1.0 }).collect();
        Jacobi { inv_diag }
    }
}

impl Preconditioner for Jacobi {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        for ((zi, ri), d) in z.iter_mut().zip(r).zip(&self.inv_diag) {
            *zi = d * ri;
        }
    }
}

/// Incomplete LU factorization with the sparsity pattern of `A`.
///
/// `L` has a unit diagonal; both factors share one row-sorted CSR layout.
/// The symbolic part is kept so that matrices with the same pattern can be
/// refactored without allocating.
#[derive(Clone, Debug)]
pub struct Ilu0 {
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    diag_pos: Vec<usize>,
    /// Sorted slot of every stored entry of the source matrix.
    slot_of_entry: Vec<usize>,
    /// For each strictly lower slot `p`, the `(q, u)` pairs with
    /// `values[q] -= values[p] * values[u]`, delimited by `update_ptr`.
    update_ptr: Vec<usize>,
    updates: Vec<(usize, usize)>,
}

impl Ilu0 {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let mut ilu = Self::symbolic(a)?;
        ilu.refactor(a)?;
        Ok(ilu)
    }

    fn symbolic(a: &CsrMatrix) -> Result<Self> {
        let n = a.n_rows();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(a.nnz());
        let mut diag_pos = Vec::with_capacity(n);
        let mut slot_of_entry = vec![0; a.nnz()];
        row_ptr.push(0);
        let mut row: Vec<(usize, usize)> = Vec::new();
        for r in 0..n {
            row.clear();
            row.extend((a.row_ptr[r]..a.row_ptr[r + 1]).map(|e| (a.col_idx[e], e)));
            row.sort_unstable();
            let start = col_idx.len();
            for &(c, e) in &row {
                if col_idx.len() == start || *col_idx.last().unwrap() != c {
                    col_idx.push(c);
                }
                slot_of_entry[e] = col_idx.len() - 1;
            }
            let d = col_idx[start..]
                .iter()
                .position(|&c| c == r)
                .ok_or_else(|| Error::invalid(format!("row {r} has no diagonal entry")))?;
            diag_pos.push(start + d);
            row_ptr.push(col_idx.len());
        }
        let mut update_ptr = vec![0; col_idx.len() + 1];
        let mut updates = Vec::new();
        for i in 0..n {
            for p in row_ptr[i]..row_ptr[i + 1] {
                if p < diag_pos[i] {
                    let k = col_idx[p];
                    for q in p + 1..row_ptr[i + 1] {
                        if let Some(u) = (diag_pos[k] + 1..row_ptr[k + 1]).find(|&u| col_idx[u] == col_idx[q]) {
                            updates.push((q, u));
                        }
                    }
                }
                update_ptr[p + 1] = updates.len();
            }
        }
        let values = vec![0.0; col_idx.len()];
        Ok(Ilu0 { row_ptr, col_idx, values, diag_pos, slot_of_entry, update_ptr, updates })
    }

    /// Numeric factorization of `a`, which must have the pattern this
    /// factorization was built from.
    pub fn refactor(&mut self, a: &CsrMatrix) -> Result<()> {
        if a.nnz() != self.slot_of_entry.len() || a.n_rows() != self.diag_pos.len() {
            return Err(Error::ShapeMismatch { expected: self.slot_of_entry.len(), found: a.nnz() });
        }
        self.values.fill(0.0);
        for (&slot, v) in self.slot_of_entry.iter().zip(&a.values) {
            self.values[slot] += v;
        }
        for i in 0..self.diag_pos.len() {
            for p in self.row_ptr[i]..self.diag_pos[i] {
                let pivot = self.values[self.diag_pos[self.col_idx[p]]];
                if pivot == 0.0 {
                    return Err(Error::invalid(format!("zero pivot in row {}", self.col_idx[p])));
                }
                self.values[p] /= pivot;
                let lik = self.values[p];
                for &(q, u) in &self.updates[self.update_ptr[p]..self.update_ptr[p + 1]] {
                    self.values[q] -= lik * self.values[u];
                }
            }
            if self.values[self.diag_pos[i]] == 0.0 {
                return Err(Error::invalid(format!("zero pivot in row {i}")));
            }
        }
        Ok(())
    }
}

impl Preconditioner for Ilu0 {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let n = self.diag_pos.len();
        for i in 0..n {
            let mut acc = r[i];
            for p in self.row_ptr[i]..self.diag_pos[i] {
                acc -= self.values[p] * z[self.col_idx[p]];
            }
            z[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = z[i];
            for p in self.diag_pos[i] + 1..self.row_ptr[i + 1] {
                acc -= self.values[p] * z[self.col_idx[p]];
            }
            z[i] = acc / self.values[self.diag_pos[i]];
        }
    }
}

/// Right-preconditioned BiCGSTAB with a Jacobi (diagonal) preconditioner.
///
/// `x` holds the initial guess on entry and the solution on success. The
/// iteration stops once `||r|| <= rel_tol * ||b||`.
pub fn bicgstab(a: &CsrMatrix, b: &[f64], x: &mut [f64], rel_tol: f64, max_iter: usize) -> Result<SolveStats> {
    bicgstab_with(a, &Jacobi::new(a), b, x, rel_tol, max_iter)
}

/// [`bicgstab`] with a caller-supplied right preconditioner.
pub fn bicgstab_with(
    a: &CsrMatrix,
    m: &dyn Preconditioner,
    b: &[f64],
    x: &mut [f64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<SolveStats> {
    Bicgstab::new(a.n_rows()).solve(a, m, b, x, rel_tol, max_iter)
}

/// Work vectors of the BiCGSTAB iteration, kept between solves of one size.
#[derive(Clone, Debug, Default)]
pub struct Bicgstab {
    r: Vec<f64>,
    r_hat: Vec<f64>,
    p: Vec<f64>,
    v: Vec<f64>,
    p_hat: Vec<f64>,
    s: Vec<f64>,
    s_hat: Vec<f64>,
    t: Vec<f64>,
}

impl Bicgstab {
    pub fn new(n: usize) -> Self {
        let z = vec![0.0; n];
        Bicgstab {
            r: z.clone(),
            r_hat: z.clone(),
            p: z.clone(),
            v: z.clone(),
            p_hat: z.clone(),
            s: z.clone(),
            s_hat: z.clone(),
            t: z,
        }
    }

    pub fn solve(
        &mut self,
        a: &CsrMatrix,
        m: &dyn Preconditioner,
        b: &[f64],
        x: &mut [f64],
        rel_tol: f64,
        max_iter: usize,
    ) -> Result<SolveStats> {
        let n = a.n_rows();
        if b.len() != n || x.len() != n {
            return Err(Error::ShapeMismatch { expected: n, found: b.len().min(x.len()) });
        }
        if self.r.len() != n {
            *self = Bicgstab::new(n);
        }
        let b_norm = norm(b);
        if b_norm == 0.0 {
            x.fill(0.0);
            return Ok(SolveStats { iterations: 0, relative_residual: 0.0 });
        }
        let Bicgstab { r, r_hat, p, v, p_hat, s, s_hat, t } = self;
        a.mul_vec(x, r);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        let tol = rel_tol * b_norm;
        let mut r_norm = norm(r);
        if r_norm <= tol {
            return Ok(SolveStats { iterations: 0, relative_residual: r_norm / b_norm });
        }

        r_hat.copy_from_slice(r);
        p.fill(0.0);
        v.fill(0.0);
        let (mut rho, mut alpha, mut omega) = (1.0f64, 1.0f64, 1.0f64);

        for iter in 1..=max_iter {
            let rho_new = dot(r_hat, r);
            if rho_new == 0.0 || omega == 0.0 {
                // Breakdown: restart the shadow residual from the current one.
                r_hat.copy_from_slice(r);
                p.fill(0.0);
                v.fill(0.0);
                rho = 1.0;
                alpha = 1.0;
                omega = 1.0;
                continue;
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for k in 0..n {
                p[k] = r[k] + beta * (p[k] - omega * v[k]);
            }
            m.apply(p, p_hat);
            a.mul_vec(p_hat, v);
            let denom = dot(r_hat, v);
            if denom == 0.0 {
                r_hat.copy_from_slice(r);
                p.fill(0.0);
                v.fill(0.0);
                rho = 1.0;
                alpha = 1.0;
                omega = 1.0;
                continue;
            }
            alpha = rho / denom;
            for k in 0..n {
                s[k] = r[k] - alpha * v[k];
            }
            let s_norm = norm(s);
            if s_norm <= tol {
                for k in 0..n {
                    x[k] += alpha * p_hat[k];
                }
                return Ok(SolveStats { iterations: iter, relative_residual: s_norm / b_norm });
            }
            m.apply(s, s_hat);
            a.mul_vec(s_hat, t);
            let tt = dot(t, t);
            omega = if tt > 0.0 { dot(t, s) / tt } else { 0.0 };
            for k in 0..n {
                x[k] += alpha * p_hat[k] + omega * s_hat[k];
                r[k] = s[k] - omega * t[k];
            }
            r_norm = norm(r);
            if r_norm <= tol {
                return Ok(SolveStats { iterations: iter, relative_residual: r_norm / b_norm });
            }
            if !r_norm.is_finite() {
                break;
            }
        }
        Err(Error::SolverDivergence { iterations: max_iter, residual: r_norm / b_norm })
    }
}

/// Cholesky factor `L` of a symmetric positive definite banded matrix.
///
/// Storage is column-major over the band: `band[k * w + d]` holds
/// `L[k + d][k]` for `d` in `0..w`, with `w = bandwidth + 1`.
#[derive(Clone, Debug)]
pub struct BandedCholesky {
    n: usize,
    bandwidth: usize,
    band: Vec<f64>,
}

impl BandedCholesky {
    /// Factors a square matrix whose sparsity pattern is assumed symmetric;
    /// only entries on or below the diagonal are read.
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.n_rows();
        if a.n_cols() != n {
            return Err(Error::ShapeMismatch { expected: n, found: a.n_cols() });
        }
        let bandwidth = (0..n).flat_map(|r| a.row(r).map(move |(c, _)| r.abs_diff(c))).max().unwrap_or(0);
        let w = bandwidth + 1;
        let mut band = vec![0.0; n * w];
        for r in 0..n {
            for (c, v) in a.row(r) {
                if c <= r {
                    band[c * w + (r - c)] += v;
                }
            }
        }
        // Right-looking elimination: finish column k, then subtract its outer
        // product from the trailing columns it reaches.
        for k in 0..n {
            let m = bandwidth.min(n - 1 - k);
            let (head, tail) = band.split_at_mut((k + 1) * w);
            let col = &mut head[k * w..];
            if !(col[0] > 0.0) {
                return Err(Error::invalid(format!("matrix is not positive definite at row {k}")));
            }
            col[0] = col[0].sqrt();
            let inv = 1.0 / col[0];
            for v in &mut col[1..=m] {
                *v *= inv;
            }
            for j in 1..=m {
                let l = col[j];
                let target = &mut tail[(j - 1) * w..(j - 1) * w + (m - j + 1)];
                for (t, s) in target.iter_mut().zip(&col[j..=m]) {
                    *t -= l * s;
                }
            }
        }
        Ok(BandedCholesky { n, bandwidth, band })
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    /// Solves `A x = b` in place.
    pub fn solve(&self, x: &mut [f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::ShapeMismatch { expected: self.n, found: x.len() });
        }
        let (n, w) = (self.n, self.bandwidth + 1);
        for k in 0..n {
            let m = self.bandwidth.min(n - 1 - k);
            let col = &self.band[k * w..k * w + m + 1];
            x[k] /= col[0];
            let xk = x[k];
            for (xi, l) in x[k + 1..=k + m].iter_mut().zip(&col[1..]) {
                *xi -= l * xk;
            }
        }
        for k in (0..n).rev() {
            let m = self.bandwidth.min(n - 1 - k);
            let col = &self.band[k * w..k * w + m + 1];
            x[k] = (x[k] - dot(&col[1..], &x[k + 1..=k + m])) / col[0];
        }
        Ok(())
    }
}
