//! Receding-horizon machinery shared by all controllers: stacked prediction
//! matrices, lifting of costs and box constraints into a QP, NLP assembly for
//! nonlinear predictors, and the closed-loop runner.

mod controllers;

pub use controllers::{
    gradient_check, LmpcController, NmpcController, NmpcFlavor, NmpcRefFn, NmpcStateSource,
    Predictor, StateTarget,
};

use crate::error::{Error, Result};
use crate::numerics::{
    self, block_diag_repeat, tile_vector, Matrix, NlpProblem, QpProblem, Vector,
};
use crate::plants::{LinearModel, Plant, ReferenceSchedule};

/// Per-step weights lifted block-diagonally over the horizon.
#[derive(Debug, Clone)]
pub struct MpcWeights {
    /// Output (p x p) or state (n x n) weight for one step.
    pub q: Matrix,
    /// Input weight (m x m) for one step.
    pub r: Matrix,
    /// Prediction horizon N; the control horizon equals it.
    pub horizon: usize,
}

impl MpcWeights {
    pub fn new(q: Matrix, r: Matrix, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        for (m, name) in [(&q, "Q"), (&r, "R")] {
            if m.nrows() != m.ncols() {
                return Err(Error::DimensionMismatch(format!("{name} must be square")));
            }
            if (m.transpose() - m).amax() > 1e-12 * m.amax().max(1.0) {
                return Err(Error::InvalidMatrix(format!("{name} must be symmetric")));
            }
        }
        Ok(MpcWeights { q, r, horizon })
    }

    pub fn q_lifted(&self) -> Matrix {
        block_diag_repeat(&self.q, self.horizon)
    }

    pub fn r_lifted(&self) -> Matrix {
        block_diag_repeat(&self.r, self.horizon)
    }
}

/// Optional elementwise bounds on outputs, states, and inputs.
#[derive(Debug, Clone, Default)]
pub struct BoxConstraints {
    pub y_min: Option<Vector>,
    pub y_max: Option<Vector>,
    pub x_min: Option<Vector>,
    pub x_max: Option<Vector>,
    pub u_min: Option<Vector>,
    pub u_max: Option<Vector>,
}

impl BoxConstraints {
    pub fn input_box(u_min: Vector, u_max: Vector) -> Self {
        BoxConstraints {
            u_min: Some(u_min),
            u_max: Some(u_max),
            ..Default::default()
        }
    }
}

/// Per-step polytope rows `F v <= g` for the finite bounds of one variable.
fn bound_rows(dim: usize, lower: Option<&Vector>, upper: Option<&Vector>) -> (Matrix, Vector) {
    let mut rows: Vec<Matrix> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    if let Some(up) = upper {
        let mut f = Matrix::zeros(dim, dim);
        f.fill_with_identity();
        rows.push(f);
        rhs.extend(up.iter());
    }
    if let Some(lo) = lower {
        let mut f = Matrix::zeros(dim, dim);
        f.fill_with_identity();
        rows.push(-f);
        rhs.extend(lo.iter().map(|v| -v));
    }
    if rows.is_empty() {
        (Matrix::zeros(0, dim), Vector::zeros(0))
    } else {
        let refs: Vec<&Matrix> = rows.iter().collect();
        (
            numerics::stack_vertical(&refs),
            Vector::from_row_slice(&rhs),
        )
    }
}

/// Stacked prediction matrices mapping the current state and the input
/// sequence to the predicted state and output sequences.
#[derive(Debug, Clone)]
pub struct PredictionMatrices {
    /// nN x n: powers of A stacked.
    pub a_x: Matrix,
    /// nN x mN: lower block-triangular input-to-state map.
    pub b_x: Matrix,
    /// pN x n.
    pub a_y: Matrix,
    /// pN x mN.
    pub b_y: Matrix,
}

pub fn build_prediction_matrices(model: &LinearModel, horizon: usize) -> PredictionMatrices {
    let n = model.order();
    let m = model.n_inputs();
    let p = model.n_outputs();
    let mut a_x = Matrix::zeros(n * horizon, n);
    let mut b_x = Matrix::zeros(n * horizon, m * horizon);
    let mut a_y = Matrix::zeros(p * horizon, n);
    let mut b_y = Matrix::zeros(p * horizon, m * horizon);

    // Row block i holds A^{i+1} and [A^i B ... B 0 ...].
    let mut apow = model.a.clone();
    let mut markov: Vec<Matrix> = vec![model.b.clone()];
    for i in 0..horizon {
        a_x.view_mut((i * n, 0), (n, n)).copy_from(&apow);
        a_y.view_mut((i * p, 0), (p, n)).copy_from(&(&model.c * &apow));
        for j in 0..=i {
            let blk = &markov[i - j];
            b_x.view_mut((i * n, j * m), (n, m)).copy_from(blk);
            b_y.view_mut((i * p, j * m), (p, m))
                .copy_from(&(&model.c * blk));
        }
        apow = &model.a * &apow;
        markov.push(&model.a * markov.last().unwrap());
    }
    PredictionMatrices { a_x, b_x, a_y, b_y }
}

/// Output-tracking QP over the stacked input sequence:
/// cost `U' H U + U' q` with `H = B_Y' Q_Y B_Y + R_U` and
/// `q = 2 B_Y' Q_Y (A_Y x - Y_r) - 2 R_U U_r`, plus lifted output and input
/// box constraints.
pub fn assemble_output_lmpc_qp(
    pm: &PredictionMatrices,
    w: &MpcWeights,
    c: &BoxConstraints,
    x_now: &Vector,
    y_ref: &Vector,
    u_ref: &Vector,
) -> Result<QpProblem> {
    let horizon = w.horizon;
    let p_dim = pm.a_y.nrows() / horizon;
    let m_dim = pm.b_y.ncols() / horizon;
    if x_now.len() != pm.a_y.ncols() {
        return Err(Error::DimensionMismatch("state vs prediction matrices".into()));
    }
    if y_ref.len() != p_dim * horizon || u_ref.len() != m_dim * horizon {
        return Err(Error::DimensionMismatch("stacked reference lengths".into()));
    }
    let q_y = w.q_lifted();
    let r_u = w.r_lifted();
    let h = pm.b_y.transpose() * &q_y * &pm.b_y + &r_u;
    let free = &pm.a_y * x_now - y_ref;
    let qvec = 2.0 * pm.b_y.transpose() * &q_y * free - 2.0 * &r_u * u_ref;

    let mut problem = QpProblem::new(symmetrize(h), qvec);
    problem = add_lifted_constraints(
        problem,
        &pm.b_y,
        &(&pm.a_y * x_now),
        p_dim,
        c.y_min.as_ref(),
        c.y_max.as_ref(),
        m_dim,
        c.u_min.as_ref(),
        c.u_max.as_ref(),
        horizon,
    );
    Ok(problem)
}

/// State-tracking QP; identical structure with (A_X, B_X, Q_X).
pub fn assemble_state_lmpc_qp(
    pm: &PredictionMatrices,
    w: &MpcWeights,
    c: &BoxConstraints,
    x_now: &Vector,
    x_ref: &Vector,
    u_ref: &Vector,
) -> Result<QpProblem> {
    let horizon = w.horizon;
    let n_dim = pm.a_x.nrows() / horizon;
    let m_dim = pm.b_x.ncols() / horizon;
    if x_now.len() != pm.a_x.ncols() {
        return Err(Error::DimensionMismatch("state vs prediction matrices".into()));
    }
    if x_ref.len() != n_dim * horizon || u_ref.len() != m_dim * horizon {
        return Err(Error::DimensionMismatch("stacked reference lengths".into()));
    }
    let q_x = w.q_lifted();
    let r_u = w.r_lifted();
    let h = pm.b_x.transpose() * &q_x * &pm.b_x + &r_u;
    let free = &pm.a_x * x_now - x_ref;
    let qvec = 2.0 * pm.b_x.transpose() * &q_x * free - 2.0 * &r_u * u_ref;

    let mut problem = QpProblem::new(symmetrize(h), qvec);
    problem = add_lifted_constraints(
        problem,
        &pm.b_x,
        &(&pm.a_x * x_now),
        n_dim,
        c.x_min.as_ref(),
        c.x_max.as_ref(),
        m_dim,
        c.u_min.as_ref(),
        c.u_max.as_ref(),
        horizon,
    );
    Ok(problem)
}

fn symmetrize(m: Matrix) -> Matrix {
    0.5 * (&m + m.transpose())
}

#[allow(clippy::too_many_arguments)]
fn add_lifted_constraints(
    mut problem: QpProblem,
    map: &Matrix,
    offset: &Vector,
    var_dim: usize,
    v_min: Option<&Vector>,
    v_max: Option<&Vector>,
    m_dim: usize,
    u_min: Option<&Vector>,
    u_max: Option<&Vector>,
    horizon: usize,
) -> QpProblem {
    let mut f_blocks: Vec<Matrix> = Vec::new();
    let mut g_parts: Vec<Vector> = Vec::new();

    let (f_v, g_v) = bound_rows(var_dim, v_min, v_max);
    if f_v.nrows() > 0 {
        let f_lift = block_diag_repeat(&f_v, horizon);
        f_blocks.push(&f_lift * map);
        g_parts.push(tile_vector(&g_v, horizon) - &f_lift * offset);
    }
    let (f_u, g_u) = bound_rows(m_dim, u_min, u_max);
    if f_u.nrows() > 0 {
        f_blocks.push(block_diag_repeat(&f_u, horizon));
        g_parts.push(tile_vector(&g_u, horizon));
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
    problem
}

/// Nonlinear rollout predictor: maps the current predictor state and an
/// `m x N` input matrix to the predicted trajectory columns (outputs or
/// states, depending on the controller flavor). `None` signals divergence.
pub type RolloutFn = std::rc::Rc<dyn Fn(&Vector, &Matrix) -> Option<Matrix>>;

/// Quadratic tracking cost composed with a nonlinear rollout, plus box
/// constraints on the predicted trajectory (as inequality functions) and on
/// the inputs (as bounds on the decision vector).
pub fn assemble_nmpc_nlp(
    rollout: RolloutFn,
    w: &MpcWeights,
    c: &BoxConstraints,
    x_now: &Vector,
    target: &Vector,
    u_ref: &Vector,
    u_init: &Vector,
) -> NlpProblem {
    let horizon = w.horizon;
    let m_dim = u_init.len() / horizon;
    let var_dim = target.len() / horizon;
    let q_l = w.q_lifted();
    let r_l = w.r_lifted();
    let target = target.clone();
    let u_ref = u_ref.clone();
    let x_now_c = x_now.clone();
    let rollout_cost = rollout.clone();

    let cost = move |u: &Vector| -> f64 {
        let u_mat = columns_from_stacked(u, m_dim);
        match rollout_cost(&x_now_c, &u_mat) {
            Some(pred) => {
                let stacked = stack_columns(&pred);
                let ev = &target - &stacked;
                let eu = &u_ref - u;
                ((ev.transpose() * &q_l * &ev) + (eu.transpose() * &r_l * &eu))[(0, 0)]
            }
            None => 1e12,
        }
    };

    let mut problem = NlpProblem::new(cost, u_init.clone());

    // Input bounds act directly on the decision vector.
    let lower = c.u_min.as_ref().map(|lo| tile_vector(lo, horizon));
    let upper = c.u_max.as_ref().map(|up| tile_vector(up, horizon));
    problem = problem.with_bounds(lower, upper);

    // Trajectory bounds become inequality functions of the rollout. The
    // state/output flavors share `target` dimensionality, so reuse its size.
    let (f_v, g_v) = bound_rows(
        var_dim,
        if c.x_min.is_some() { c.x_min.as_ref() } else { c.y_min.as_ref() },
        if c.x_max.is_some() { c.x_max.as_ref() } else { c.y_max.as_ref() },
    );
    if f_v.nrows() > 0 {
        let f_lift = block_diag_repeat(&f_v, horizon);
        let g_lift = tile_vector(&g_v, horizon);
        let x_now_c = x_now.clone();
        problem = problem.with_inequalities(move |u: &Vector| {
            let u_mat = columns_from_stacked(u, m_dim);
            match rollout(&x_now_c, &u_mat) {
                Some(pred) => &f_lift * stack_columns(&pred) - &g_lift,
                None => Vector::from_element(g_lift.len(), 1e6),
            }
        });
    }
    problem
}

/// Reshape a stacked decision vector into per-step columns.
pub fn columns_from_stacked(u: &Vector, dim: usize) -> Matrix {
    let steps = u.len() / dim;
    Matrix::from_fn(dim, steps, |r, c| u[c * dim + r])
}

/// Stack matrix columns into one long vector.
pub fn stack_columns(m: &Matrix) -> Vector {
    Vector::from_fn(m.nrows() * m.ncols(), |i, _| m[(i % m.nrows(), i / m.nrows())])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Ok,
    /// Training-data replay before the controller has a full past window.
    Warmup,
    /// Solver failed at this instant; the previous input was re-applied.
    Fallback,
}

impl std::fmt::Display for StepStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StepStatus::Ok => write!(f, "ok"),
            StepStatus::Warmup => write!(f, "warmup"),
            StepStatus::Fallback => write!(f, "fallback"),
        }
    }
}

/// One optimal control decision: the full input sequence (the runner applies
/// the first block) plus the optimizer objective.
#[derive(Debug, Clone)]
pub struct ControlStep {
    pub sequence: Vector,
    pub cost: f64,
    pub status: StepStatus,
}

/// A receding-horizon controller invoked once per instant.
pub trait Controller {
    /// Compute the input sequence for instant `k` from the measured output
    /// `y` and the current reference. `x_plant` is the simulator state, made
    /// available for logging-oriented controllers; data-driven controllers
    /// must rely on `y` and their own internal models.
    fn compute(&mut self, k: usize, x_plant: &Vector, y: &Vector, r: &Vector)
        -> Result<ControlStep>;

    fn input_dim(&self) -> usize;

    /// Called after the first block of the sequence has been applied.
    fn applied(&mut self, _u: &Vector, _y: &Vector) {}
}

/// Per-instant record of the closed loop.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub k: usize,
    pub x: Vector,
    pub y: Vector,
    pub u: Vector,
    pub reference: Vector,
    pub cost: f64,
    pub status: StepStatus,
}

#[derive(Debug, Clone, Default)]
pub struct ClosedLoopTrace {
    pub steps: Vec<TraceStep>,
}

impl ClosedLoopTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Largest absolute tracking error over instants `[from, to)`,
    /// comparing output to reference componentwise.
    pub fn max_tracking_error(&self, from: usize, to: usize) -> f64 {
        self.steps[from.min(self.len())..to.min(self.len())]
            .iter()
            .map(|s| (&s.y - &s.reference).amax())
            .fold(0.0, f64::max)
    }

    pub fn inputs(&self) -> Vec<Vector> {
        self.steps.iter().map(|s| s.u.clone()).collect()
    }
}

/// Run the loop: measure, solve, apply the first input block, advance.
/// A `QpInfeasible` from the controller at instant k falls back to the
/// previously applied input and flags the step; other solver errors abort
/// with the instant attached.
pub fn run_receding_horizon(
    plant: &mut dyn Plant,
    controller: &mut dyn Controller,
    schedule: &ReferenceSchedule,
    n_t: usize,
) -> Result<ClosedLoopTrace> {
    let m = controller.input_dim();
    let mut trace = ClosedLoopTrace::default();
    let mut last_u = Vector::zeros(m);
    for k in 0..n_t {
        let x = plant.state();
        let y = plant.measure();
        let r = schedule.reference_at(k).clone();
        let (u, cost, status) = match controller.compute(k, &x, &y, &r) {
            Ok(step) => {
                let u = Vector::from(step.sequence.rows(0, m));
                (u, step.cost, step.status)
            }
            Err(Error::QpInfeasible) if k > 0 => (last_u.clone(), f64::NAN, StepStatus::Fallback),
            Err(e) => {
                return Err(Error::AtInstant {
                    instant: k,
                    source: Box::new(e),
                })
            }
        };
        controller.applied(&u, &y);
        plant.advance(&u).map_err(|e| Error::AtInstant {
            instant: k,
            source: Box::new(e),
        })?;
        trace.steps.push(TraceStep {
            k,
            x,
            y,
            u: u.clone(),
            reference: r,
            cost,
            status,
        });
        last_u = u;
    }
    Ok(trace)
}

/// Shift a stacked input sequence one block forward, repeating the last
/// block: the standard receding-horizon warm start.
pub fn shift_warm_start(u: &Vector, m: usize) -> Vector {
    let steps = u.len() / m;
    let mut out = Vector::zeros(u.len());
    for s in 0..steps {
        let src = if s + 1 < steps { s + 1 } else { steps - 1 };
        for i in 0..m {
            out[s * m + i] = u[src * m + i];
        }
    }
    out
}
