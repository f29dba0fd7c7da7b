//! Small dense and sparse helpers shared by the engine and the control code.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{CooMatrix, CsrMatrix};

/// Relative singular-value cutoff used for every numerical rank in the crate.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Triplet accumulator; duplicates are summed on conversion.
#[derive(Debug, Clone)]
pub struct Triplets {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(rows: usize, cols: usize) -> Self {
        Triplets {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        if v != 0.0 {
            self.entries.push((r, c, v));
        }
    }

    pub fn to_csr(&self) -> CsrMatrix<f64> {
        let mut coo = CooMatrix::new(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            coo.push(r, c, v);
        }
        CsrMatrix::from(&coo)
    }
}

/// y = M·x
pub fn spmv(m: &CsrMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; m.nrows()];
    spmv_add(m, x, &mut y);
    y
}

/// y += M·x
pub fn spmv_add(m: &CsrMatrix<f64>, x: &[f64], y: &mut [f64]) {
    for (i, row) in m.row_iter().enumerate() {
        let mut acc = 0.0;
        for (&j, &v) in row.col_indices().iter().zip(row.values()) {
            acc += v * x[j];
        }
        y[i] += acc;
    }
}

pub fn to_dense(m: &CsrMatrix<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(m.nrows(), m.ncols());
    for (i, row) in m.row_iter().enumerate() {
        for (&j, &v) in row.col_indices().iter().zip(row.values()) {
            d[(i, j)] += v;
        }
    }
    d
}

/// Block-diagonal matrix with `copies` copies of `block`.
pub fn block_diagonal(block: &CsrMatrix<f64>, copies: usize) -> CsrMatrix<f64> {
    let (n, m) = (block.nrows(), block.ncols());
    let mut t = Triplets::new(n * copies, m * copies);
    for k in 0..copies {
        for (i, row) in block.row_iter().enumerate() {
            for (&j, &v) in row.col_indices().iter().zip(row.values()) {
                t.push(k * n + i, k * m + j, v);
            }
        }
    }
    t.to_csr()
}

fn to_faer(m: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Singular values of `m`, descending.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s = to_faer(m).singular_values().unwrap_or_else(|_| {
        log::warn!("SVD did not converge; falling back to the nalgebra routine");
        m.clone()
            .svd(false, false)
            .singular_values
            .iter()
            .copied()
            .collect()
    });
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Orthonormal basis of the left singular vectors of `m` whose singular
/// values exceed `cutoff`. nalgebra's SVD can return inaccurate vectors for
/// rank-deficient thin matrices, so faer does the work here.
pub fn range_basis(m: &DMatrix<f64>, cutoff: f64) -> Vec<DVector<f64>> {
    if m.ncols() == 0 || m.nrows() == 0 {
        return Vec::new();
    }
    match to_faer(m).thin_svd() {
        Ok(svd) => {
            let (u, s) = (svd.U(), svd.S().column_vector());
            (0..s.nrows())
                .filter(|&i| s[i] > cutoff)
                .map(|i| DVector::from_fn(m.nrows(), |r, _| u[(r, i)]))
                .collect()
        }
        Err(_) => {
            log::warn!("SVD did not converge; falling back to the nalgebra routine");
            let svd = m.clone().svd(true, false);
            let u = svd.u.expect("requested");
            svd.singular_values
                .iter()
                .enumerate()
                .filter(|(_, s)| **s > cutoff)
                .map(|(i, _)| u.column(i).into_owned())
                .collect()
        }
    }
}

/// Number of singular values above `RANK_TOLERANCE · reference`.
pub fn numerical_rank(m: &DMatrix<f64>, reference: f64) -> usize {
    let cutoff = RANK_TOLERANCE * reference;
    singular_values(m).iter().filter(|&&s| s > cutoff).count()
}

/// Eigenvalues of a symmetric matrix, descending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let sym = 0.5 * (m + m.transpose());
    let mut e: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    e.sort_by(|a, b| b.total_cmp(a));
    e
}

/// Orthonormalizes `v` against the columns in `basis` (two passes of modified
/// Gram-Schmidt). Returns `None` when what is left is below `cutoff`.
pub fn orthogonalize(
    basis: &[DVector<f64>],
    v: &DVector<f64>,
    cutoff: f64,
) -> Option<DVector<f64>> {
    let mut w = v.clone();
    for _ in 0..2 {
        for q in basis {
            let proj = q.dot(&w);
            w.axpy(-proj, q, 1.0);
        }
    }
    let norm = w.norm();
    (norm > cutoff).then(|| w / norm)
}

/// Extends orthonormal columns to a full orthonormal basis of R^n, keeping the
/// given columns first.
pub fn complete_basis(basis: &[DVector<f64>], n: usize) -> Vec<DVector<f64>> {
    let mut out = basis.to_vec();
    for i in 0..n {
        if out.len() == n {
            break;
        }
        let e = DVector::from_fn(n, |r, _| if r == i { 1.0 } else { 0.0 });
        if let Some(q) = orthogonalize(&out, &e, 1e-8) {
            out.push(q);
        }
    }
    out
}

pub fn columns_to_matrix(cols: &[DVector<f64>], rows: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols.len());
    for (j, c) in cols.iter().enumerate() {
        m.set_column(j, c);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 1, 1.0);
        t.push(0, 1, 2.0);
        t.push(1, 0, -1.0);
        let d = to_dense(&t.to_csr());
        assert_eq!(d, DMatrix::from_row_slice(2, 2, &[0.0, 3.0, -1.0, 0.0]));
        assert_eq!(spmv(&t.to_csr(), &[1.0, 2.0]), vec![6.0, -1.0]);
    }

    #[test]
    fn completed_basis_is_orthonormal() {
        let v = DVector::from_vec(vec![1.0, 1.0, 0.0]).normalize();
        let b = complete_basis(&[v], 3);
        let q = columns_to_matrix(&b, 3);
        assert!((q.transpose() * &q - DMatrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn rank_uses_relative_cutoff() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-6, 1e-12]));
        assert_eq!(numerical_rank(&m, 1.0), 2);
    }
}
