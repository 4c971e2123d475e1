//! Dense linear-algebra and optimization kernels used by every other module:
//! SVD with a fixed numerical-rank convention, Moore-Penrose pseudoinverse,
//! convex QP, smooth NLP, and finite-difference gradients.

mod nlp;
mod qp;

pub use nlp::{fd_gradient, solve_nlp, NlpOptions, NlpProblem, NlpSolution};
pub use qp::{solve_qp, solve_qp_warm, QpOptions, QpProblem, QpSolution};

use crate::error::{Error, Result};

pub type Matrix = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;

/// Relative singular-value cutoff: sigma_i <= RANK_CUTOFF * sigma_1 counts as zero.
pub const RANK_CUTOFF: f64 = 1e-10;

/// Build a matrix from a row-major slice.
pub fn mat(rows: usize, cols: usize, entries: &[f64]) -> Matrix {
    Matrix::from_row_slice(rows, cols, entries)
}

/// Build a column vector from a slice.
pub fn vec_from(entries: &[f64]) -> Vector {
    Vector::from_row_slice(entries)
}

pub fn is_finite_matrix(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn is_finite_vector(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::InvalidMatrix(format!("{what} has a zero dimension")));
    }
    if !is_finite_matrix(m) {
        return Err(Error::InvalidMatrix(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Singular value decomposition M = U * diag(S) * V^T with S nonincreasing.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Left singular vectors, one column per singular value.
    pub u: Matrix,
    /// Singular values, sorted nonincreasing.
    pub s: Vector,
    /// Right singular vectors, one column per singular value.
    pub v: Matrix,
}

impl SvdResult {
    /// U * diag(S) * V^T.
    pub fn reconstruct(&self) -> Matrix {
        &self.u * Matrix::from_diagonal(&self.s) * self.v.transpose()
    }

    /// Numerical rank: number of singular values above `RANK_CUTOFF * sigma_1`.
    pub fn rank(&self) -> usize {
        if self.s.len() == 0 {
            return 0;
        }
        let cut = RANK_CUTOFF * self.s[0];
        self.s.iter().filter(|&&x| x > cut).count()
    }
}

/// Thin SVD with singular values sorted in nonincreasing order.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    check_finite(m, "svd input")?;
    let decomp = m.clone().svd(true, true);
    let u = decomp.u.expect("svd requested u");
    let v_t = decomp.v_t.expect("svd requested v_t");
    let s = decomp.singular_values;

    // nalgebra sorts already; enforce the ordering defensively.
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
    let k = s.len();
    let mut us = Matrix::zeros(u.nrows(), k);
    let mut vs = Matrix::zeros(v_t.ncols(), k);
    let mut ss = Vector::zeros(k);
    for (new, &old) in order.iter().enumerate() {
        us.set_column(new, &u.column(old));
        vs.set_column(new, &v_t.row(old).transpose());
        ss[new] = s[old];
    }
    Ok(SvdResult { u: us, s: ss, v: vs })
}

/// Moore-Penrose pseudoinverse with the crate-wide rank cutoff.
pub fn pinv(m: &Matrix) -> Result<Matrix> {
    let dec = svd(m)?;
    let smax = if dec.s.len() > 0 { dec.s[0] } else { 0.0 };
    let cut = RANK_CUTOFF * smax;
    let mut sinv = Vector::zeros(dec.s.len());
    for i in 0..dec.s.len() {
        sinv[i] = if dec.s[i] > cut { 1.0 / dec.s[i] } else { 0.0 };
    }
    Ok(&dec.v * Matrix::from_diagonal(&sinv) * dec.u.transpose())
}

/// Minimum-norm least-squares solution of A x = b.
pub fn lstsq(a: &Matrix, b: &Vector) -> Result<Vector> {
    if a.nrows() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "lstsq: {}x{} matrix vs rhs of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    Ok(pinv(a)? * b)
}

/// Numerical rank via the SVD cutoff.
pub fn numerical_rank(m: &Matrix) -> Result<usize> {
    Ok(svd(m)?.rank())
}

/// Stack matrices on top of each other. All blocks must share a column count.
pub fn stack_vertical(blocks: &[&Matrix]) -> Matrix {
    assert!(!blocks.is_empty());
    let cols = blocks[0].ncols();
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "stack_vertical: column mismatch");
        out.view_mut((at, 0), (b.nrows(), cols)).copy_from(*b);
        at += b.nrows();
    }
    out
}

/// Stack matrices side by side. All blocks must share a row count.
pub fn stack_horizontal(blocks: &[&Matrix]) -> Matrix {
    assert!(!blocks.is_empty());
    let rows = blocks[0].nrows();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "stack_horizontal: row mismatch");
        out.view_mut((0, at), (rows, b.ncols())).copy_from(*b);
        at += b.ncols();
    }
    out
}

/// Block-diagonal concatenation.
pub fn block_diag(blocks: &[&Matrix]) -> Matrix {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Repeat a per-step block matrix N times down the diagonal.
pub fn block_diag_repeat(block: &Matrix, times: usize) -> Matrix {
    let blocks: Vec<&Matrix> = (0..times).map(|_| block).collect();
    block_diag(&blocks)
}

/// Stack `times` copies of a vector into one long vector.
pub fn tile_vector(v: &Vector, times: usize) -> Vector {
    let mut out = Vector::zeros(v.len() * times);
    for i in 0..times {
        out.rows_mut(i * v.len(), v.len()).copy_from(v);
    }
    out
}
