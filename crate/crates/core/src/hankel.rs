//! Block-Hankel construction, past/future partitioning of training data, and
//! persistency-of-excitation rank checks.
//!
//! Data conventions used crate-wide: input samples are the columns of an
//! `m x D` matrix starting at `u_0`; output samples are the columns of a
//! `p x D` matrix starting at `y_1`. A block-Hankel built from a sequence has
//! block `(i, j)` equal to sample `start + i + j`.

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix};
use crate::plants::LinearModel;

/// The four partitioned block-Hankel matrices over one training record.
#[derive(Debug, Clone)]
pub struct HankelBlocks {
    /// Past inputs, `m*M x H`.
    pub up: Matrix,
    /// Past outputs, `p*M x H`.
    pub yp: Matrix,
    /// Future inputs, `m*N x H`.
    pub uf: Matrix,
    /// Future outputs, `p*N x H`.
    pub yf: Matrix,
    /// Future horizon N in samples.
    pub future: usize,
    /// Past horizon M in samples.
    pub past: usize,
    /// Column (training-window) count H.
    pub cols: usize,
}

/// Build the block-Hankel matrix with `block_rows` block rows and `cols`
/// columns from the sample columns of `seq`, starting at sample `start`.
pub fn build_hankel(seq: &Matrix, start: usize, block_rows: usize, cols: usize) -> Result<Matrix> {
    let d = seq.nrows();
    let len = seq.ncols();
    if block_rows == 0 || cols == 0 {
        return Err(Error::InvalidConfig("Hankel with zero block rows or columns".into()));
    }
    let needed = start + block_rows + cols - 1;
    if needed > len {
        return Err(Error::InsufficientData(format!(
            "Hankel needs {needed} samples, sequence has {len}"
        )));
    }
    let mut out = Matrix::zeros(d * block_rows, cols);
    for i in 0..block_rows {
        for j in 0..cols {
            out.view_mut((i * d, j), (d, 1))
                .copy_from(&seq.column(start + i + j));
        }
    }
    Ok(out)
}

/// Partition training data into past/future input and output Hankel blocks.
///
/// `u` holds `u_0..u_{D-1}` and `y` holds `y_1..y_D`; the past blocks take M
/// block rows starting at `u_0`/`y_1`, the future blocks take N block rows
/// starting at `u_M`/`y_{M+1}`.
pub fn partition_past_future(
    u: &Matrix,
    y: &Matrix,
    future: usize,
    past: usize,
    cols: usize,
) -> Result<HankelBlocks> {
    let d = u.ncols();
    if y.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "input has {d} samples, output has {}",
            y.ncols()
        )));
    }
    if past + future + cols - 1 > d {
        return Err(Error::InsufficientData(format!(
            "need M + N + H - 1 = {} samples, have D = {d}",
            past + future + cols - 1
        )));
    }
    Ok(HankelBlocks {
        up: build_hankel(u, 0, past, cols)?,
        yp: build_hankel(y, 0, past, cols)?,
        uf: build_hankel(u, past, future, cols)?,
        yf: build_hankel(y, past, future, cols)?,
        future,
        past,
        cols,
    })
}

/// Persistency of excitation of order L: the L-block Hankel of the input has
/// full row rank `m*L`. Returns the verdict together with the achieved
/// numerical rank.
pub fn is_persistently_exciting(u: &Matrix, order: usize) -> Result<(bool, usize)> {
    let m = u.nrows();
    let len = u.ncols();
    if order == 0 {
        return Err(Error::InvalidConfig("PE order must be at least 1".into()));
    }
    // Use every available window; full row rank needs at least m*L of them.
    if len + 1 <= order {
        return Err(Error::InsufficientData(format!(
            "PE order {order} needs more than {order} samples, have {len}"
        )));
    }
    let cols = len - order + 1;
    if cols < m * order {
        return Err(Error::InsufficientData(format!(
            "PE order {order} needs at least {} windows, have {cols}",
            m * order
        )));
    }
    let h = build_hankel(u, 0, order, cols)?;
    let rank = numerics::numerical_rank(&h)?;
    Ok((rank == m * order, rank))
}

/// Ranks of the controllability and observability matrices of a model.
pub fn ctrb_obsv_rank(model: &LinearModel) -> (usize, usize) {
    let n = model.order();
    let mut ctrb_blocks: Vec<Matrix> = Vec::with_capacity(n);
    let mut obsv_blocks: Vec<Matrix> = Vec::with_capacity(n);
    let mut apow = Matrix::identity(n, n);
    for _ in 0..n {
        ctrb_blocks.push(&apow * &model.b);
        obsv_blocks.push(&model.c * &apow);
        apow = &model.a * apow;
    }
    let ctrb = numerics::stack_horizontal(&ctrb_blocks.iter().collect::<Vec<_>>());
    let obsv = numerics::stack_vertical(&obsv_blocks.iter().collect::<Vec<_>>());
    let rc = numerics::numerical_rank(&ctrb).unwrap_or(0);
    let ro = numerics::numerical_rank(&obsv).unwrap_or(0);
    (rc, ro)
}
