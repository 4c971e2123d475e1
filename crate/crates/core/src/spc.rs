//! Subspace predictive control: identify the linear predictor mapping past
//! inputs/outputs and future inputs to future outputs by least squares on
//! Hankel data, then control with the resulting QP.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::hankel;
use crate::mpc::{
    shift_warm_start, BoxConstraints, ControlStep, Controller, MpcWeights, StepStatus,
};
use crate::numerics::{
    self, block_diag_repeat, solve_qp_warm, tile_vector, Matrix, QpOptions, QpProblem, Vector,
};

/// Identified predictor `Y_future = P1 U_past + P2 Y_past + BY U_future`.
#[derive(Debug, Clone)]
pub struct SpcPredictor {
    /// pN x mM map from the stacked past inputs.
    pub p1: Matrix,
    /// pN x pM map from the stacked past outputs.
    pub p2: Matrix,
    /// pN x mN map from the stacked future inputs.
    pub b_y: Matrix,
    pub future: usize,
    pub past: usize,
    pub n_inputs: usize,
    pub n_outputs: usize,
    /// Numerical rank of the stacked data matrix during identification. For
    /// noiseless order-n data this is mM + mN + n: past outputs are linear in
    /// past inputs and states, so the stack never reaches full row rank.
    pub data_rank: usize,
    /// Warning: the column count cannot support the stacked row dimension
    /// (H < mM + pM + mN). Identification proceeds with the pseudoinverse.
    pub rank_warning: bool,
    /// Relative identification residual on the training data.
    pub residual: f64,
}

/// Identify the predictor from input samples `u_0..u_{D-1}` and output
/// samples `y_1..y_D` with horizons (N, M, H).
pub fn identify_spc(
    u: &Matrix,
    y: &Matrix,
    future: usize,
    past: usize,
    cols: usize,
) -> Result<SpcPredictor> {
    let blocks = hankel::partition_past_future(u, y, future, past, cols)?;
    let m = u.nrows();
    let p = y.nrows();
    let s = numerics::stack_vertical(&[&blocks.up, &blocks.yp, &blocks.uf]);
    let rank = numerics::numerical_rank(&s)?;
    let rank_warning = cols < s.nrows();

    let params = &blocks.yf * numerics::pinv(&s)?;
    let residual = (&blocks.yf - &params * &s).norm() / blocks.yf.norm().max(f64::EPSILON);

    let p1 = params.columns(0, m * past).clone_owned();
    let p2 = params.columns(m * past, p * past).clone_owned();
    let b_y = params.columns(m * past + p * past, m * future).clone_owned();
    Ok(SpcPredictor {
        p1,
        p2,
        b_y,
        future,
        past,
        n_inputs: m,
        n_outputs: p,
        data_rank: rank,
        rank_warning,
        residual,
    })
}

/// Rolling window of the last M applied inputs and measured outputs, stacked
/// oldest-first to match the Hankel column layout.
#[derive(Debug, Clone)]
pub struct PastWindow {
    u_hist: VecDeque<Vector>,
    y_hist: VecDeque<Vector>,
    past: usize,
}

impl PastWindow {
    pub fn new(past: usize) -> Self {
        PastWindow {
            u_hist: VecDeque::with_capacity(past),
            y_hist: VecDeque::with_capacity(past),
            past,
        }
    }

    pub fn push_input(&mut self, u: &Vector) {
        if self.u_hist.len() == self.past {
            self.u_hist.pop_front();
        }
        self.u_hist.push_back(u.clone());
    }

    pub fn push_output(&mut self, y: &Vector) {
        if self.y_hist.len() == self.past {
            self.y_hist.pop_front();
        }
        self.y_hist.push_back(y.clone());
    }

    pub fn is_full(&self) -> bool {
        self.u_hist.len() == self.past && self.y_hist.len() == self.past
    }

    /// Stacked past inputs, oldest block first (length m*M).
    pub fn stacked_inputs(&self) -> Vector {
        stack_window(&self.u_hist)
    }

    /// Stacked past outputs, oldest block first (length p*M).
    pub fn stacked_outputs(&self) -> Vector {
        stack_window(&self.y_hist)
    }
}

fn stack_window(hist: &VecDeque<Vector>) -> Vector {
    let block = hist.front().map(|v| v.len()).unwrap_or(0);
    let mut out = Vector::zeros(block * hist.len());
    for (i, v) in hist.iter().enumerate() {
        out.rows_mut(i * block, block).copy_from(v);
    }
    out
}

/// Predicted future output stack for a given past window and future inputs.
pub fn spc_predict(pred: &SpcPredictor, past: &PastWindow, u_future: &Vector) -> Result<Vector> {
    if !past.is_full() {
        return Err(Error::InsufficientData("past window not yet full".into()));
    }
    let up = past.stacked_inputs();
    let yp = past.stacked_outputs();
    if up.len() != pred.p1.ncols() || yp.len() != pred.p2.ncols() || u_future.len() != pred.b_y.ncols()
    {
        return Err(Error::DimensionMismatch("predictor window sizes".into()));
    }
    Ok(&pred.p1 * up + &pred.p2 * yp + &pred.b_y * u_future)
}

/// One controller instant: minimize
/// `[Y_r - Y]' Q_Y [Y_r - Y] + U' R_U U` over the future inputs subject to
/// input (and optional output) box constraints. Returns the QP ready to
/// solve, with the constant part of the prediction folded in.
pub fn assemble_spc_qp(
    pred: &SpcPredictor,
    past: &PastWindow,
    y_ref: &Vector,
    weights: &MpcWeights,
    bounds: &BoxConstraints,
) -> Result<QpProblem> {
    if weights.horizon != pred.future {
        return Err(Error::DimensionMismatch(
            "weights horizon differs from predictor future horizon".into(),
        ));
    }
    let free = spc_predict(pred, past, &Vector::zeros(pred.b_y.ncols()))?;
    let q_l = weights.q_lifted();
    let r_l = weights.r_lifted();
    let h = pred.b_y.transpose() * &q_l * &pred.b_y + &r_l;
    // Note: the input penalty has no reference offset in this scheme.
    let qvec = 2.0 * pred.b_y.transpose() * &q_l * (&free - y_ref);
    let mut problem = QpProblem::new(0.5 * (&h + h.transpose()), qvec);

    let mut f_blocks: Vec<Matrix> = Vec::new();
    let mut g_parts: Vec<Vector> = Vec::new();
    let m = pred.n_inputs;
    let p = pred.n_outputs;
    if bounds.u_min.is_some() || bounds.u_max.is_some() {
        let (f_u, g_u) = input_rows(m, bounds.u_min.as_ref(), bounds.u_max.as_ref());
        f_blocks.push(block_diag_repeat(&f_u, pred.future));
        g_parts.push(tile_vector(&g_u, pred.future));
    }
    if bounds.y_min.is_some() || bounds.y_max.is_some() {
        let (f_y, g_y) = input_rows(p, bounds.y_min.as_ref(), bounds.y_max.as_ref());
        let f_lift = block_diag_repeat(&f_y, pred.future);
        g_parts.push(tile_vector(&g_y, pred.future) - &f_lift * &free);
        f_blocks.push(&f_lift * &pred.b_y);
    }
    if !f_blocks.is_empty() {
        let refs: Vec<&Matrix> = f_blocks.iter().collect();
        let f = numerics::stack_vertical(&refs);
        let mut g = Vector::zeros(f.nrows());
        let mut at = 0;
        for part in &g_parts {
            g.rows_mut(at, part.len()).copy_from(part);
            at += part.len();
        }
        problem = problem.with_inequalities(f, g);
    }
    Ok(problem)
}

fn input_rows(dim: usize, lower: Option<&Vector>, upper: Option<&Vector>) -> (Matrix, Vector) {
    let mut rows: Vec<Matrix> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    if let Some(up) = upper {
        rows.push(Matrix::identity(dim, dim));
        rhs.extend(up.iter());
    }
    if let Some(lo) = lower {
        rows.push(-Matrix::identity(dim, dim));
        rhs.extend(lo.iter().map(|v| -v));
    }
    let refs: Vec<&Matrix> = rows.iter().collect();
    (
        numerics::stack_vertical(&refs),
        Vector::from_row_slice(&rhs),
    )
}

/// Solve the control QP and return the full optimal input sequence.
pub fn spc_control_step(
    pred: &SpcPredictor,
    past: &PastWindow,
    y_ref: &Vector,
    weights: &MpcWeights,
    bounds: &BoxConstraints,
    opts: &QpOptions,
) -> Result<Vector> {
    let qp = assemble_spc_qp(pred, past, y_ref, weights, bounds)?;
    Ok(solve_qp_warm(&qp, opts, None)?.z)
}

/// Receding-horizon controller wrapping the predictor. The first M instants
/// replay the given warmup inputs while the past window fills; control
/// starts once the window is full.
pub struct SpcController {
    pred: SpcPredictor,
    past: PastWindow,
    weights: MpcWeights,
    bounds: BoxConstraints,
    warmup_inputs: Vec<Vector>,
    warm: Option<(Vector, Vector)>,
    pub qp_options: QpOptions,
}

impl SpcController {
    pub fn new(
        pred: SpcPredictor,
        weights: MpcWeights,
        bounds: BoxConstraints,
        warmup_inputs: Vec<Vector>,
    ) -> Result<Self> {
        if weights.horizon != pred.future {
            return Err(Error::DimensionMismatch(
                "weights horizon differs from predictor horizon".into(),
            ));
        }
        if warmup_inputs.len() < pred.past {
            return Err(Error::InsufficientData(format!(
                "warmup needs {} inputs, got {}",
                pred.past,
                warmup_inputs.len()
            )));
        }
        let past = PastWindow::new(pred.past);
        Ok(SpcController {
            pred,
            past,
            weights,
            bounds,
            warmup_inputs,
            warm: None,
            qp_options: QpOptions::default(),
        })
    }
}

impl Controller for SpcController {
    fn compute(&mut self, k: usize, _x: &Vector, y: &Vector, r: &Vector) -> Result<ControlStep> {
        self.past.push_output(y);
        let m = self.pred.n_inputs;
        if k < self.pred.past {
            let mut seq = Vector::zeros(m * self.pred.future);
            seq.rows_mut(0, m).copy_from(&self.warmup_inputs[k]);
            return Ok(ControlStep {
                sequence: seq,
                cost: f64::NAN,
                status: StepStatus::Warmup,
            });
        }
        let y_ref = tile_vector(r, self.pred.future);
        let qp = assemble_spc_qp(&self.pred, &self.past, &y_ref, &self.weights, &self.bounds)?;
        let warm = self.warm.as_ref().map(|(z, y)| (z, y));
        let sol = solve_qp_warm(&qp, &self.qp_options, warm)?;
        self.warm = Some((shift_warm_start(&sol.z, m), sol.ineq_multipliers.clone()));
        Ok(ControlStep {
            sequence: sol.z,
            cost: sol.objective,
            status: StepStatus::Ok,
        })
    }

    fn input_dim(&self) -> usize {
        self.pred.n_inputs
    }

    fn applied(&mut self, u: &Vector, _y: &Vector) {
        self.past.push_input(u);
    }
}
