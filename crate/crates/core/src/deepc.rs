//! Data-enabled predictive control: the raw data Hankel matrices act as the
//! equality constraint of the control QP, with the trajectory-selector
//! vector regularized in the cost. No model is identified.

use crate::error::{Error, Result};
use crate::hankel::{self, HankelBlocks};
use crate::mpc::{
    shift_warm_start, BoxConstraints, ControlStep, Controller, MpcWeights, StepStatus,
};
use crate::numerics::{
    self, block_diag_repeat, solve_qp_warm, tile_vector, Matrix, QpOptions, QpProblem, Vector,
};
use crate::spc::{PastWindow, SpcPredictor};

#[derive(Clone)]
pub struct DeepcConfig {
    pub blocks: HankelBlocks,
    /// Selector regularization weight, >= 0.
    pub alpha: f64,
    pub weights: MpcWeights,
    pub bounds: BoxConstraints,
    pub n_inputs: usize,
    pub n_outputs: usize,
}

impl DeepcConfig {
    pub fn new(
        blocks: HankelBlocks,
        alpha: f64,
        weights: MpcWeights,
        bounds: BoxConstraints,
        n_inputs: usize,
        n_outputs: usize,
    ) -> Result<Self> {
        if alpha < 0.0 {
            return Err(Error::InvalidConfig("alpha must be nonnegative".into()));
        }
        if weights.horizon != blocks.future {
            return Err(Error::DimensionMismatch(
                "weights horizon differs from Hankel future horizon".into(),
            ));
        }
        Ok(DeepcConfig {
            blocks,
            alpha,
            weights,
            bounds,
            n_inputs,
            n_outputs,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DeepcSolution {
    /// Optimal future input stack (mN).
    pub u: Vector,
    /// Predicted future output stack (pN), itself a decision block.
    pub y: Vector,
    /// Trajectory selector over the data columns (H).
    pub v: Vector,
    /// Tracking-plus-effort cost including the selector regularizer.
    pub cost: f64,
    /// Residual of the data-consistency equality at the solution.
    pub hankel_residual: f64,
}

/// Input-excitation check used before building the data constraint: the
/// training input must be persistently exciting of order N + M + n.
pub fn check_pe_for_deepc(
    u: &Matrix,
    future: usize,
    past: usize,
    n_est: usize,
) -> Result<(bool, usize)> {
    hankel::is_persistently_exciting(u, future + past + n_est)
}

/// Build the control QP over the stacked decision `(U, Y, v)`:
/// minimize `[Y_r - Y]' Q_Y [Y_r - Y] + U' R_U U + alpha ||v||^2`
/// subject to the data-consistency equalities and box bounds.
/// `pin_u` adds equality rows fixing the future inputs (used by the
/// prediction oracles).
pub fn assemble_deepc_qp(
    cfg: &DeepcConfig,
    past: &PastWindow,
    y_ref: &Vector,
    pin_u: Option<&Vector>,
) -> Result<QpProblem> {
    let m = cfg.n_inputs;
    let p = cfg.n_outputs;
    let n_f = cfg.blocks.future;
    let m_p = cfg.blocks.past;
    let h_cols = cfg.blocks.cols;
    let (nu, ny) = (m * n_f, p * n_f);
    let dim = nu + ny + h_cols;
    if y_ref.len() != ny {
        return Err(Error::DimensionMismatch("stacked output reference".into()));
    }
    if !past.is_full() {
        return Err(Error::InsufficientData("past window not yet full".into()));
    }

    // Cost blocks: R_U on U, Q_Y on Y, alpha I on v.
    let q_l = cfg.weights.q_lifted();
    let r_l = cfg.weights.r_lifted();
    let mut h = Matrix::zeros(dim, dim);
    h.view_mut((0, 0), (nu, nu)).copy_from(&r_l);
    h.view_mut((nu, nu), (ny, ny)).copy_from(&q_l);
    for i in 0..h_cols {
        h[(nu + ny + i, nu + ny + i)] = cfg.alpha;
    }
    let mut q = Vector::zeros(dim);
    q.rows_mut(nu, ny).copy_from(&(-2.0 * &q_l * y_ref));

    // Data-consistency equalities, stacked block rows:
    //   Up v = Up1, Yp v = Yp1, Uf v - U = 0, Yf v - Y = 0
    let up1 = past.stacked_inputs();
    let yp1 = past.stacked_outputs();
    let rows_eq = m * m_p + p * m_p + nu + ny + pin_u.map(|u| u.len()).unwrap_or(0);
    let mut f_eq = Matrix::zeros(rows_eq, dim);
    let mut g_eq = Vector::zeros(rows_eq);
    let mut at = 0;
    f_eq.view_mut((at, nu + ny), (m * m_p, h_cols))
        .copy_from(&cfg.blocks.up);
    g_eq.rows_mut(at, m * m_p).copy_from(&up1);
    at += m * m_p;
    f_eq.view_mut((at, nu + ny), (p * m_p, h_cols))
        .copy_from(&cfg.blocks.yp);
    g_eq.rows_mut(at, p * m_p).copy_from(&yp1);
    at += p * m_p;
    f_eq.view_mut((at, nu + ny), (nu, h_cols))
        .copy_from(&cfg.blocks.uf);
    for i in 0..nu {
        f_eq[(at + i, i)] = -1.0;
    }
    at += nu;
    f_eq.view_mut((at, nu + ny), (ny, h_cols))
        .copy_from(&cfg.blocks.yf);
    for i in 0..ny {
        f_eq[(at + i, nu + i)] = -1.0;
    }
    at += ny;
    if let Some(u_fix) = pin_u {
        if u_fix.len() != nu {
            return Err(Error::DimensionMismatch("pinned input stack".into()));
        }
        for i in 0..nu {
            f_eq[(at + i, i)] = 1.0;
        }
        g_eq.rows_mut(at, nu).copy_from(u_fix);
    }

    let mut problem = QpProblem::new(h, q).with_equalities(f_eq, g_eq);

    // Box bounds on the input and output decision blocks.
    let mut f_rows: Vec<Matrix> = Vec::new();
    let mut g_parts: Vec<f64> = Vec::new();
    let mut push_box = |offset: usize, dim_step: usize, lo: Option<&Vector>, up: Option<&Vector>| {
        for step in 0..n_f {
            for i in 0..dim_step {
                if let Some(upv) = up {
                    let mut row = Matrix::zeros(1, dim);
                    row[(0, offset + step * dim_step + i)] = 1.0;
                    f_rows.push(row);
                    g_parts.push(upv[i]);
                }
                if let Some(lov) = lo {
                    let mut row = Matrix::zeros(1, dim);
                    row[(0, offset + step * dim_step + i)] = -1.0;
                    f_rows.push(row);
                    g_parts.push(-lov[i]);
                }
            }
        }
    };
    push_box(0, m, cfg.bounds.u_min.as_ref(), cfg.bounds.u_max.as_ref());
    push_box(nu, p, cfg.bounds.y_min.as_ref(), cfg.bounds.y_max.as_ref());
    if !f_rows.is_empty() {
        let refs: Vec<&Matrix> = f_rows.iter().collect();
        problem = problem.with_inequalities(
            numerics::stack_vertical(&refs),
            Vector::from_row_slice(&g_parts),
        );
    }
    Ok(problem)
}

/// Solve one control instant. The three decision blocks are returned
/// explicitly; the caller applies the first input block.
pub fn deepc_control_step(
    cfg: &DeepcConfig,
    past: &PastWindow,
    y_ref: &Vector,
    opts: &QpOptions,
    warm: Option<(&Vector, &Vector)>,
) -> Result<DeepcSolution> {
    solve_deepc(cfg, past, y_ref, None, opts, warm)
}

/// Prediction oracle: pin the future inputs and recover the output stack the
/// data constraint implies.
pub fn deepc_predict_pinned(
    cfg: &DeepcConfig,
    past: &PastWindow,
    u_fixed: &Vector,
    opts: &QpOptions,
) -> Result<DeepcSolution> {
    solve_deepc(cfg, past, &Vector::zeros(cfg.n_outputs * cfg.blocks.future), Some(u_fixed), opts, None)
}

fn solve_deepc(
    cfg: &DeepcConfig,
    past: &PastWindow,
    y_ref: &Vector,
    pin_u: Option<&Vector>,
    opts: &QpOptions,
    warm: Option<(&Vector, &Vector)>,
) -> Result<DeepcSolution> {
    let m = cfg.n_inputs;
    let p = cfg.n_outputs;
    let n_f = cfg.blocks.future;
    let (nu, ny) = (m * n_f, p * n_f);
    let qp = assemble_deepc_qp(cfg, past, y_ref, pin_u)?;
    let sol = solve_qp_warm(&qp, opts, warm)?;
    let u = Vector::from(sol.z.rows(0, nu));
    let y = Vector::from(sol.z.rows(nu, ny));
    let v = Vector::from(sol.z.rows(nu + ny, cfg.blocks.cols));
    let hankel_residual = (&qp.f_eq * &sol.z - &qp.g_eq).amax();
    // report the true cost including the reference-dependent constant
    let q_l = cfg.weights.q_lifted();
    let err = y_ref - &y;
    let cost = (err.transpose() * &q_l * &err)[(0, 0)]
        + (u.transpose() * cfg.weights.r_lifted() * &u)[(0, 0)]
        + cfg.alpha * v.dot(&v);
    Ok(DeepcSolution {
        u,
        y,
        v,
        cost,
        hankel_residual,
    })
}

/// Cross-method validation: for probe windows and pinned inputs, the largest
/// gap between the data-driven prediction and an identified subspace
/// predictor built from the same record. Returns 0.0 for no probes.
pub fn deepc_vs_spc_gap(
    cfg: &DeepcConfig,
    spc: &SpcPredictor,
    probes: &[(PastWindow, Vector)],
    opts: &QpOptions,
) -> Result<f64> {
    let mut gap = 0.0f64;
    for (window, u_fix) in probes {
        let direct = deepc_predict_pinned(cfg, window, u_fix, opts)?;
        let identified = crate::spc::spc_predict(spc, window, u_fix)?;
        gap = gap.max((&direct.y - &identified).amax());
    }
    Ok(gap)
}

/// Receding-horizon DeePC controller with training-data warmup replay while
/// the past window fills.
pub struct DeepcController {
    cfg: DeepcConfig,
    past: PastWindow,
    warmup_inputs: Vec<Vector>,
    warm: Option<(Vector, Vector)>,
    pub qp_options: QpOptions,
}

impl DeepcController {
    pub fn new(cfg: DeepcConfig, warmup_inputs: Vec<Vector>) -> Result<Self> {
        if warmup_inputs.len() < cfg.blocks.past {
            return Err(Error::InsufficientData(format!(
                "warmup needs {} inputs, got {}",
                cfg.blocks.past,
                warmup_inputs.len()
            )));
        }
        let past = PastWindow::new(cfg.blocks.past);
        // Loose splitting tolerances are enough here: the polish step
        // restores tight KKT residuals and the loop reuses warm starts.
        let qp_options = QpOptions::default();
        Ok(DeepcController {
            past,
            warmup_inputs,
            warm: None,
            qp_options,
            cfg,
        })
    }
}

impl Controller for DeepcController {
    fn compute(&mut self, k: usize, _x: &Vector, y: &Vector, r: &Vector) -> Result<ControlStep> {
        self.past.push_output(y);
        let m = self.cfg.n_inputs;
        let n_f = self.cfg.blocks.future;
        if k < self.cfg.blocks.past {
            let mut seq = Vector::zeros(m * n_f);
            seq.rows_mut(0, m).copy_from(&self.warmup_inputs[k]);
            return Ok(ControlStep {
                sequence: seq,
                cost: f64::NAN,
                status: StepStatus::Warmup,
            });
        }
        let y_ref = tile_vector(r, n_f);
        let warm = self.warm.as_ref().map(|(z, y)| (z, y));
        let sol = deepc_control_step(&self.cfg, &self.past, &y_ref, &self.qp_options, warm)?;
        // Warm-start the next instant from the shifted decision stack.
        let mut z = Vector::zeros(sol.u.len() + sol.y.len() + sol.v.len());
        z.rows_mut(0, sol.u.len())
            .copy_from(&shift_warm_start(&sol.u, m));
        z.rows_mut(sol.u.len(), sol.y.len())
            .copy_from(&shift_warm_start(&sol.y, self.cfg.n_outputs));
        z.rows_mut(sol.u.len() + sol.y.len(), sol.v.len())
            .copy_from(&sol.v);
        self.warm = Some((z, Vector::zeros(0)));
        let mut sequence = Vector::zeros(m * n_f);
        sequence.copy_from(&sol.u);
        Ok(ControlStep {
            sequence,
            cost: sol.cost,
            status: StepStatus::Ok,
        })
    }

    fn input_dim(&self) -> usize {
        self.cfg.n_inputs
    }

    fn applied(&mut self, u: &Vector, _y: &Vector) {
        self.past.push_input(u);
    }
}

/// Convenience: lift per-step weights to a full config for the tracking runs.
pub fn tracking_weights(q_y: f64, r_u: f64, horizon: usize) -> Result<MpcWeights> {
    MpcWeights::new(
        Matrix::from_element(1, 1, q_y),
        Matrix::from_element(1, 1, r_u),
        horizon,
    )
}

/// Block-diagonal helper re-exported for the tests of this module.
#[allow(dead_code)]
fn lift(block: &Matrix, times: usize) -> Matrix {
    block_diag_repeat(block, times)
}
