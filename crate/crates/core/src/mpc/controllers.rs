//! Model-based receding-horizon controllers: LMPC over an identified linear
//! model and NMPC over a nonlinear rollout predictor. Both maintain their own
//! model state by simulating the identified model alongside the applied
//! inputs; the nonlinear observer additionally damps in the measured output.

use std::rc::Rc;

use super::{
    assemble_nmpc_nlp, assemble_output_lmpc_qp, assemble_state_lmpc_qp,
    build_prediction_matrices, shift_warm_start, BoxConstraints, ControlStep, Controller,
    MpcWeights, PredictionMatrices, RolloutFn, StepStatus,
};
use crate::error::{Error, Result};
use crate::numerics::{
    fd_gradient, solve_nlp, solve_qp_warm, tile_vector, Matrix, NlpOptions, QpOptions, Vector,
};
use crate::plants::LinearModel;

/// State reference for state-based LMPC.
pub enum StateTarget {
    /// Fixed (x_r, u_r), e.g. the origin for regulation problems.
    Fixed { x_ref: Vector, u_ref: Vector },
    /// Solve the model's steady-state system for each output reference.
    FromOutput(Box<dyn Fn(&Vector) -> Result<(Vector, Vector)>>),
}

enum LmpcMode {
    Output { u_ref: Vector },
    State { target: StateTarget },
}

/// Linear MPC over an identified model, with the model simulated in parallel
/// with the applied inputs to provide the current state.
pub struct LmpcController {
    model: LinearModel,
    pm: PredictionMatrices,
    weights: MpcWeights,
    bounds: BoxConstraints,
    mode: LmpcMode,
    x_hat: Vector,
    warm: Option<(Vector, Vector)>,
    ref_cache: Vec<(Vector, (Vector, Vector))>,
    pub qp_options: QpOptions,
    pub iterations_total: usize,
}

impl LmpcController {
    pub fn output_tracking(
        model: LinearModel,
        weights: MpcWeights,
        bounds: BoxConstraints,
        x0_hat: Vector,
        u_ref: Vector,
    ) -> Result<Self> {
        let pm = build_prediction_matrices(&model, weights.horizon);
        if x0_hat.len() != model.order() {
            return Err(Error::DimensionMismatch("observer initial state".into()));
        }
        Ok(LmpcController {
            model,
            pm,
            weights,
            bounds,
            mode: LmpcMode::Output { u_ref },
            x_hat: x0_hat,
            warm: None,
            ref_cache: Vec::new(),
            qp_options: QpOptions::default(),
            iterations_total: 0,
        })
    }

    pub fn state_tracking(
        model: LinearModel,
        weights: MpcWeights,
        bounds: BoxConstraints,
        x0_hat: Vector,
        target: StateTarget,
    ) -> Result<Self> {
        let pm = build_prediction_matrices(&model, weights.horizon);
        if x0_hat.len() != model.order() {
            return Err(Error::DimensionMismatch("observer initial state".into()));
        }
        Ok(LmpcController {
            model,
            pm,
            weights,
            bounds,
            mode: LmpcMode::State { target },
            x_hat: x0_hat,
            warm: None,
            ref_cache: Vec::new(),
            qp_options: QpOptions::default(),
            iterations_total: 0,
        })
    }

    pub fn observer_state(&self) -> &Vector {
        &self.x_hat
    }

    fn state_refs_for(&mut self, r: &Vector) -> Result<(Vector, Vector)> {
        if let Some((_, cached)) = self.ref_cache.iter().find(|(key, _)| key == r) {
            return Ok(cached.clone());
        }
        let refs = match &self.mode {
            LmpcMode::State {
                target: StateTarget::FromOutput(solve),
            } => solve(r)?,
            LmpcMode::State {
                target: StateTarget::Fixed { x_ref, u_ref },
            } => (x_ref.clone(), u_ref.clone()),
            LmpcMode::Output { .. } => unreachable!("output mode has no state refs"),
        };
        self.ref_cache.push((r.clone(), refs.clone()));
        Ok(refs)
    }
}

impl Controller for LmpcController {
    fn compute(&mut self, _k: usize, _x: &Vector, _y: &Vector, r: &Vector) -> Result<ControlStep> {
        let n_steps = self.weights.horizon;
        let qp = match &self.mode {
            LmpcMode::Output { u_ref } => {
                let y_ref = tile_vector(r, n_steps);
                let u_ref = tile_vector(u_ref, n_steps);
                assemble_output_lmpc_qp(
                    &self.pm,
                    &self.weights,
                    &self.bounds,
                    &self.x_hat,
                    &y_ref,
                    &u_ref,
                )?
            }
            LmpcMode::State { .. } => {
                let (x_r, u_r) = self.state_refs_for(r)?;
                let x_ref = tile_vector(&x_r, n_steps);
                let u_ref = tile_vector(&u_r, n_steps);
                assemble_state_lmpc_qp(
                    &self.pm,
                    &self.weights,
                    &self.bounds,
                    &self.x_hat,
                    &x_ref,
                    &u_ref,
                )?
            }
        };
        let warm = self.warm.as_ref().map(|(z, y)| (z, y));
        let sol = solve_qp_warm(&qp, &self.qp_options, warm)?;
        self.iterations_total += sol.iterations;
        let mut multipliers = Vector::zeros(sol.eq_multipliers.len() + sol.ineq_multipliers.len());
        multipliers
            .rows_mut(0, sol.eq_multipliers.len())
            .copy_from(&sol.eq_multipliers);
        multipliers
            .rows_mut(sol.eq_multipliers.len(), sol.ineq_multipliers.len())
            .copy_from(&sol.ineq_multipliers);
        self.warm = Some((
            shift_warm_start(&sol.z, self.model.n_inputs()),
            multipliers,
        ));
        Ok(ControlStep {
            sequence: sol.z,
            cost: sol.objective,
            status: StepStatus::Ok,
        })
    }

    fn input_dim(&self) -> usize {
        self.model.n_inputs()
    }

    fn applied(&mut self, u: &Vector, _y: &Vector) {
        let (xn, _) = self
            .model
            .step(&self.x_hat, u)
            .expect("observer dimensions fixed at construction");
        self.x_hat = xn;
    }
}

/// A nonlinear rollout model driving NMPC: maps the predictor state forward
/// and exposes the output map for observer correction.
pub trait Predictor {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Predicted output columns over the inputs, `None` on divergence.
    fn rollout_outputs(&self, x: &Vector, u: &Matrix) -> Option<Matrix>;
    /// Predicted state columns over the inputs.
    fn rollout_states(&self, x: &Vector, u: &Matrix) -> Option<Matrix>;
    fn advance(&self, x: &Vector, u: &Vector) -> Option<Vector>;
    fn output(&self, x: &Vector) -> Option<Vector>;
}

impl Predictor for LinearModel {
    fn state_dim(&self) -> usize {
        self.order()
    }
    fn input_dim(&self) -> usize {
        self.n_inputs()
    }
    fn output_dim(&self) -> usize {
        self.n_outputs()
    }
    fn rollout_outputs(&self, x: &Vector, u: &Matrix) -> Option<Matrix> {
        self.simulate(x, u).ok().map(|(y, _)| y)
    }
    fn rollout_states(&self, x: &Vector, u: &Matrix) -> Option<Matrix> {
        let mut xs = Matrix::zeros(self.order(), u.ncols());
        let mut xc = x.clone();
        for k in 0..u.ncols() {
            let (xn, _) = self.step(&xc, &Vector::from(u.column(k))).ok()?;
            xc = xn;
            xs.set_column(k, &xc);
        }
        Some(xs)
    }
    fn advance(&self, x: &Vector, u: &Vector) -> Option<Vector> {
        self.step(x, u).ok().map(|(xn, _)| xn)
    }
    fn output(&self, x: &Vector) -> Option<Vector> {
        Some(&self.c * x)
    }
}

/// Where the NMPC controller's current predictor state comes from.
pub enum NmpcStateSource {
    /// The measured output is the predictor state (output-feedback models).
    Measurement,
    /// Simulate the predictor alongside applied inputs; each instant, damp
    /// the state toward the measured output with Gauss-Newton steps on the
    /// output map.
    Observer {
        x: Vector,
        correction_steps: usize,
        damping: f64,
    },
}

/// Whether the tracking cost weighs predicted outputs or predicted states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmpcFlavor {
    OutputTracking,
    StateTracking,
}

/// References per output setpoint: the per-step tracking target (output or
/// state) and the steady input.
pub type NmpcRefFn = Box<dyn Fn(&Vector) -> Result<(Vector, Vector)>>;

pub struct NmpcController {
    predictor: Rc<dyn Predictor>,
    weights: MpcWeights,
    bounds: BoxConstraints,
    flavor: NmpcFlavor,
    references: NmpcRefFn,
    ref_cache: Vec<(Vector, (Vector, Vector))>,
    state_source: NmpcStateSource,
    warm: Option<Vector>,
    pub nlp_options: NlpOptions,
    pub iterations_total: usize,
}

impl NmpcController {
    pub fn new(
        predictor: Rc<dyn Predictor>,
        weights: MpcWeights,
        bounds: BoxConstraints,
        flavor: NmpcFlavor,
        references: NmpcRefFn,
        state_source: NmpcStateSource,
    ) -> Self {
        let mut nlp_options = NlpOptions::default();
        nlp_options.max_iters = 400;
        nlp_options.tol = 1e-7;
        NmpcController {
            predictor,
            weights,
            bounds,
            flavor,
            references,
            ref_cache: Vec::new(),
            state_source,
            warm: None,
            nlp_options,
            iterations_total: 0,
        }
    }

    fn refs_for(&mut self, r: &Vector) -> Result<(Vector, Vector)> {
        if let Some((_, cached)) = self.ref_cache.iter().find(|(key, _)| key == r) {
            return Ok(cached.clone());
        }
        let refs = (self.references)(r)?;
        self.ref_cache.push((r.clone(), refs.clone()));
        Ok(refs)
    }

    fn current_state(&mut self, y: &Vector) -> Vector {
        match &mut self.state_source {
            NmpcStateSource::Measurement => y.clone(),
            NmpcStateSource::Observer {
                x,
                correction_steps,
                damping,
            } => {
                let predictor = self.predictor.clone();
                let p = predictor.output_dim();
                for _ in 0..*correction_steps {
                    let Some(yhat) = predictor.output(x) else { break };
                    let innovation = y - &yhat;
                    if innovation.amax() < 1e-12 {
                        break;
                    }
                    // Jacobian of the output map by central differences.
                    let mut jac = Matrix::zeros(p, x.len());
                    for j in 0..x.len() {
                        let f = |z: &Vector| predictor.output(z).map(|v| v[0]).unwrap_or(f64::NAN);
                        // central differences per output row
                        let _ = f;
                        let h = 1e-6 * (1.0 + x[j].abs());
                        let mut xp = x.clone();
                        xp[j] += h;
                        let fp = predictor.output(&xp);
                        xp[j] = x[j] - h;
                        let fm = predictor.output(&xp);
                        if let (Some(fp), Some(fm)) = (fp, fm) {
                            for i in 0..p {
                                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
                            }
                        }
                    }
                    let jjt = &jac * jac.transpose() + Matrix::identity(p, p) * 1e-8;
                    if let Some(w) = jjt.lu().solve(&innovation) {
                        let dx = jac.transpose() * w;
                        *x += *damping * dx;
                    } else {
                        break;
                    }
                }
                x.clone()
            }
        }
    }
}

impl Controller for NmpcController {
    fn compute(&mut self, _k: usize, _x: &Vector, y: &Vector, r: &Vector) -> Result<ControlStep> {
        let n_steps = self.weights.horizon;
        let m = self.predictor.input_dim();
        let (target_step, u_r) = self.refs_for(r)?;
        let target = tile_vector(&target_step, n_steps);
        let u_ref = tile_vector(&u_r, n_steps);
        let x_now = self.current_state(y);

        let predictor = self.predictor.clone();
        let rollout: RolloutFn = match self.flavor {
            NmpcFlavor::OutputTracking => {
                Rc::new(move |x0: &Vector, u: &Matrix| predictor.rollout_outputs(x0, u))
            }
            NmpcFlavor::StateTracking => {
                Rc::new(move |x0: &Vector, u: &Matrix| predictor.rollout_states(x0, u))
            }
        };

        let u_init = self
            .warm
            .clone()
            .unwrap_or_else(|| tile_vector(&u_r, n_steps));
        let nlp = assemble_nmpc_nlp(
            rollout,
            &self.weights,
            &self.bounds,
            &x_now,
            &target,
            &u_ref,
            &u_init,
        );
        let sol = solve_nlp(&nlp, &self.nlp_options)?;
        self.iterations_total += sol.iterations;
        self.warm = Some(shift_warm_start(&sol.z, m));
        Ok(ControlStep {
            sequence: sol.z,
            cost: sol.cost,
            status: StepStatus::Ok,
        })
    }

    fn input_dim(&self) -> usize {
        self.predictor.input_dim()
    }

    fn applied(&mut self, u: &Vector, _y: &Vector) {
        if let NmpcStateSource::Observer { x, .. } = &mut self.state_source {
            if let Some(xn) = self.predictor.advance(x, u) {
                *x = xn;
            }
        }
    }
}

/// Validate an analytic gradient against central differences at a point;
/// used by the verification suites for the rollout losses.
pub fn gradient_check(
    f: &dyn Fn(&Vector) -> f64,
    analytic: &Vector,
    z: &Vector,
    step: f64,
) -> Result<f64> {
    let numeric = fd_gradient(f, z, step)?;
    let denom = analytic.amax().max(numeric.amax()).max(1e-12);
    Ok((analytic - numeric).amax() / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::run_receding_horizon;
    use crate::numerics::mat;
    use crate::plants::{LtiPlant, ReferenceSchedule};

    #[test]
    fn lmpc_regulates_stable_scalar_plant() {
        let model = LinearModel::new(mat(1, 1, &[0.9]), mat(1, 1, &[1.0]), mat(1, 1, &[1.0]))
            .unwrap();
        let weights = MpcWeights::new(mat(1, 1, &[1.0]), mat(1, 1, &[0.1]), 5).unwrap();
        let mut controller = LmpcController::state_tracking(
            model.clone(),
            weights,
            BoxConstraints::default(),
            Vector::from_row_slice(&[4.0]),
            StateTarget::Fixed {
                x_ref: Vector::zeros(1),
                u_ref: Vector::zeros(1),
            },
        )
        .unwrap();
        let mut plant = LtiPlant::new(model, Vector::from_row_slice(&[4.0]));
        let schedule = ReferenceSchedule::constant(Vector::zeros(1));
        let trace = run_receding_horizon(&mut plant, &mut controller, &schedule, 15).unwrap();
        assert!(trace.steps.last().unwrap().x.amax() < 1e-3);
    }

    #[test]
    fn nmpc_linear_predictor_tracks_setpoint() {
        let model = LinearModel::new(mat(1, 1, &[0.5]), mat(1, 1, &[1.0]), mat(1, 1, &[1.0]))
            .unwrap();
        let weights = MpcWeights::new(mat(1, 1, &[5.0]), mat(1, 1, &[0.01]), 4).unwrap();
        // steady state: x = 0.5 x + u -> u_r = 0.5 y_r, target = y_r
        let references: NmpcRefFn = Box::new(|y_r: &Vector| {
            Ok((y_r.clone(), Vector::from_row_slice(&[0.5 * y_r[0]])))
        });
        let mut controller = NmpcController::new(
            Rc::new(model.clone()),
            weights,
            BoxConstraints::default(),
            NmpcFlavor::OutputTracking,
            references,
            NmpcStateSource::Observer {
                x: Vector::zeros(1),
                correction_steps: 2,
                damping: 1.0,
            },
        );
        let mut plant = LtiPlant::new(model, Vector::zeros(1));
        let schedule = ReferenceSchedule::constant(Vector::from_row_slice(&[1.0]));
        let trace = run_receding_horizon(&mut plant, &mut controller, &schedule, 20).unwrap();
        let last = trace.steps.last().unwrap();
        assert!((last.y[0] - 1.0).abs() < 1e-3, "tracked to {}", last.y[0]);
    }
}
