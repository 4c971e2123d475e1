//! Ground-truth simulators and excitation signals: discrete LTI plants, a
//! nonlinear continuous stirred tank reactor, unit-pulse and multilevel
//! pseudorandom inputs, and piecewise-constant reference schedules.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{is_finite_matrix, Matrix, Vector};

/// Discrete-time LTI model x' = A x + B u, y = C x.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
}

impl LinearModel {
    pub fn new(a: Matrix, b: Matrix, c: Matrix) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch("A must be square".into()));
        }
        if b.nrows() != n {
            return Err(Error::DimensionMismatch("B rows must match A".into()));
        }
        if c.ncols() != n {
            return Err(Error::DimensionMismatch("C columns must match A".into()));
        }
        for (m, name) in [(&a, "A"), (&b, "B"), (&c, "C")] {
            if !is_finite_matrix(m) {
                return Err(Error::InvalidMatrix(format!("{name} has non-finite entries")));
            }
        }
        Ok(LinearModel { a, b, c })
    }

    /// State dimension n.
    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension m.
    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }

    /// Output dimension p.
    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    /// One simulation step: returns (x_{k+1}, y_k).
    pub fn step(&self, x: &Vector, u: &Vector) -> Result<(Vector, Vector)> {
        if x.len() != self.order() || u.len() != self.n_inputs() {
            return Err(Error::DimensionMismatch(format!(
                "lti_step: state {} / input {} vs model ({}, {})",
                x.len(),
                u.len(),
                self.order(),
                self.n_inputs()
            )));
        }
        Ok((&self.a * x + &self.b * u, &self.c * x))
    }

    /// Markov parameters y_k = C A^{k-1} B for k = 1..=len.
    pub fn impulse_response(&self, len: usize) -> Vec<Matrix> {
        let mut out = Vec::with_capacity(len);
        let mut apow_b = self.b.clone();
        for _ in 0..len {
            out.push(&self.c * &apow_b);
            apow_b = &self.a * apow_b;
        }
        out
    }

    /// Roll the model from `x0` over the input columns; returns the outputs
    /// y_1..y_D (one column per step, sampled after the state update) and the
    /// final state.
    pub fn simulate(&self, x0: &Vector, u: &Matrix) -> Result<(Matrix, Vector)> {
        let d = u.ncols();
        let mut y = Matrix::zeros(self.n_outputs(), d);
        let mut x = x0.clone();
        for k in 0..d {
            let uk = Vector::from(u.column(k));
            let (xn, _) = self.step(&x, &uk)?;
            x = xn;
            y.set_column(k, &(&self.c * &x));
        }
        Ok((y, x))
    }
}

/// Continuous stirred tank reactor in discrete time. The state holds the
/// reactant concentration and temperature; the measured output is the
/// temperature plus optional Gaussian noise.
#[derive(Debug, Clone)]
pub struct CstrConfig {
    pub b_const: f64,
    pub da: f64,
    pub db: f64,
    /// Sampling period in seconds.
    pub t: f64,
    pub noise_std: f64,
}

impl Default for CstrConfig {
    fn default() -> Self {
        CstrConfig {
            b_const: 22.0,
            da: 0.082,
            db: 3.0,
            t: 1.0,
            noise_std: 0.0,
        }
    }
}

/// One reactor step: returns (x_{k+1}, y_k). The measurement noise draw
/// consumes the RNG exactly once when `noise_std > 0`.
pub fn cstr_step(
    cfg: &CstrConfig,
    x: &Vector,
    u: &Vector,
    rng: &mut ChaCha8Rng,
) -> Result<(Vector, Vector)> {
    if x.len() != 2 || u.len() != 1 {
        return Err(Error::DimensionMismatch("cstr_step expects 2 states, 1 input".into()));
    }
    let (x1, x2) = (x[0], x[1]);
    let reaction = cfg.da * (1.0 - x1) * x2.exp();
    let x1_next = x1 + cfg.t * (-x1 + reaction);
    let x2_next = x2 + cfg.t * (x2 + cfg.b_const * reaction - cfg.db * (x2 - u[0]));
    if !x1_next.is_finite() || !x2_next.is_finite() {
        return Err(Error::NonFiniteState { instant: 0 });
    }
    let noise = if cfg.noise_std > 0.0 {
        Normal::new(0.0, cfg.noise_std)
            .expect("valid noise std")
            .sample(rng)
    } else {
        0.0
    };
    let y = Vector::from_row_slice(&[x2 + noise]);
    Ok((Vector::from_row_slice(&[x1_next, x2_next]), y))
}

/// Multilevel pseudorandom sequence: a piecewise-constant excitation that
/// holds each level for `dwell` samples, drawing levels uniformly from the
/// configured set.
#[derive(Debug, Clone)]
pub struct PrmsConfig {
    pub levels: Vec<f64>,
    pub dwell: usize,
    pub seed: u64,
}

impl PrmsConfig {
    /// `count` uniformly spaced levels spanning `[lo, hi]`.
    pub fn spanning(lo: f64, hi: f64, count: usize, dwell: usize, seed: u64) -> Self {
        assert!(count >= 2);
        let step = (hi - lo) / (count - 1) as f64;
        PrmsConfig {
            levels: (0..count).map(|i| lo + step * i as f64).collect(),
            dwell,
            seed,
        }
    }
}

/// Generate a 1 x len PRMS input.
pub fn prms(cfg: &PrmsConfig, len: usize) -> Matrix {
    assert!(cfg.dwell >= 1, "dwell must be at least 1");
    assert!(!cfg.levels.is_empty(), "need at least one level");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Matrix::zeros(1, len);
    let mut level = cfg.levels[0];
    for k in 0..len {
        if k % cfg.dwell == 0 {
            level = cfg.levels[rng.random_range(0..cfg.levels.len())];
        }
        out[(0, k)] = level;
    }
    out
}

/// Piecewise-constant reference: the value of the most recent breakpoint at
/// or before the queried instant.
#[derive(Debug, Clone)]
pub struct ReferenceSchedule {
    breakpoints: Vec<(usize, Vector)>,
}

impl ReferenceSchedule {
    pub fn new(breakpoints: Vec<(usize, Vector)>) -> Result<Self> {
        if breakpoints.is_empty() {
            return Err(Error::InvalidConfig("schedule needs at least one breakpoint".into()));
        }
        if breakpoints[0].0 != 0 {
            return Err(Error::InvalidConfig("schedule must start at instant 0".into()));
        }
        for w in breakpoints.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidConfig(
                    "schedule instants must be strictly increasing".into(),
                ));
            }
        }
        Ok(ReferenceSchedule { breakpoints })
    }

    pub fn constant(value: Vector) -> Self {
        ReferenceSchedule {
            breakpoints: vec![(0, value)],
        }
    }

    /// The reference-tracking quadrants used by the tracking experiments:
    /// values cycling over equal spans of `quadrant` instants.
    pub fn quadrants(values: &[f64], quadrant: usize) -> Self {
        ReferenceSchedule {
            breakpoints: values
                .iter()
                .enumerate()
                .map(|(i, &v)| (i * quadrant, Vector::from_row_slice(&[v])))
                .collect(),
        }
    }

    pub fn reference_at(&self, k: usize) -> &Vector {
        let mut current = &self.breakpoints[0].1;
        for (start, value) in &self.breakpoints {
            if *start <= k {
                current = value;
            } else {
                break;
            }
        }
        current
    }

    pub fn dim(&self) -> usize {
        self.breakpoints[0].1.len()
    }
}

/// A simulated plant driven by the closed-loop runner. `measure` is called
/// exactly once per instant, before the input for that instant is applied.
pub trait Plant {
    /// Current internal state (used for logging and state-based criteria).
    fn state(&self) -> Vector;
    /// Measured output at the current instant.
    fn measure(&mut self) -> Vector;
    /// Apply the input for this instant and advance one step.
    fn advance(&mut self, u: &Vector) -> Result<()>;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
}

/// LTI plant wrapper holding its own state.
pub struct LtiPlant {
    pub model: LinearModel,
    pub x: Vector,
}

impl LtiPlant {
    pub fn new(model: LinearModel, x0: Vector) -> Self {
        LtiPlant { model, x: x0 }
    }
}

impl Plant for LtiPlant {
    fn state(&self) -> Vector {
        self.x.clone()
    }
    fn measure(&mut self) -> Vector {
        &self.model.c * &self.x
    }
    fn advance(&mut self, u: &Vector) -> Result<()> {
        let (xn, _) = self.model.step(&self.x, u)?;
        self.x = xn;
        Ok(())
    }
    fn input_dim(&self) -> usize {
        self.model.n_inputs()
    }
    fn output_dim(&self) -> usize {
        self.model.n_outputs()
    }
}

/// Reactor plant wrapper with its own measurement-noise stream.
pub struct CstrPlant {
    pub cfg: CstrConfig,
    pub x: Vector,
    rng: ChaCha8Rng,
}

impl CstrPlant {
    pub fn new(cfg: CstrConfig, x0: Vector, seed: u64) -> Self {
        CstrPlant {
            cfg,
            x: x0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Plant for CstrPlant {
    fn state(&self) -> Vector {
        self.x.clone()
    }
    fn measure(&mut self) -> Vector {
        let noise = if self.cfg.noise_std > 0.0 {
            Normal::new(0.0, self.cfg.noise_std)
                .expect("valid noise std")
                .sample(&mut self.rng)
        } else {
            0.0
        };
        Vector::from_row_slice(&[self.x[1] + noise])
    }
    fn advance(&mut self, u: &Vector) -> Result<()> {
        // Noise is drawn in measure(); the state update itself is noiseless.
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let (xn, _) = cstr_step(&self.cfg, &self.x, u, &mut scratch)?;
        self.x = xn;
        Ok(())
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn output_dim(&self) -> usize {
        1
    }
}

/// Simulate the reactor open loop over the input columns; returns outputs
/// y_1..y_D sampled after each update, mirroring `LinearModel::simulate`.
pub fn cstr_simulate(
    cfg: &CstrConfig,
    x0: &Vector,
    u: &Matrix,
    seed: u64,
) -> Result<(Matrix, Vector)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = x0.clone();
    let mut y = Matrix::zeros(1, u.ncols());
    for k in 0..u.ncols() {
        let uk = Vector::from(u.column(k));
        let (xn, _) = cstr_step(cfg, &x, &uk, &mut rng).map_err(|e| match e {
            Error::NonFiniteState { .. } => Error::NonFiniteState { instant: k },
            other => other,
        })?;
        x = xn;
        let noise = if cfg.noise_std > 0.0 {
            Normal::new(0.0, cfg.noise_std).expect("valid std").sample(&mut rng)
        } else {
            0.0
        };
        y[(0, k)] = x[1] + noise;
    }
    Ok((y, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{mat, vec_from};
    use approx::assert_relative_eq;

    fn third_order() -> LinearModel {
        LinearModel::new(
            mat(3, 3, &[0.2, -0.4, 0.5, 0.7, 0.3, 0.6, -0.5, 0.1, 0.6]),
            mat(3, 1, &[0.1, 0.2, 0.1]),
            mat(1, 3, &[1.0, 0.0, 0.0]),
        )
        .unwrap()
    }

    #[test]
    fn lti_step_zero_state_zero_input() {
        let m = third_order();
        let (x, y) = m.step(&Vector::zeros(3), &Vector::zeros(1)).unwrap();
        assert_eq!(x.amax(), 0.0);
        assert_eq!(y.amax(), 0.0);
    }

    #[test]
    fn lti_step_pulse_from_rest_copies_b() {
        let m = third_order();
        let (x, _) = m.step(&Vector::zeros(3), &vec_from(&[1.0])).unwrap();
        assert_eq!(x, vec_from(&[0.1, 0.2, 0.1]));
    }

    #[test]
    fn identity_hold_keeps_state() {
        let m = LinearModel::new(Matrix::identity(2, 2), Matrix::zeros(2, 1), mat(1, 2, &[1.0, 0.0]))
            .unwrap();
        let x = vec_from(&[3.0, -1.0]);
        let (xn, _) = m.step(&x, &vec_from(&[9.0])).unwrap();
        assert_eq!(xn, x);
    }

    #[test]
    fn lti_step_rejects_bad_dims() {
        let m = third_order();
        assert!(m.step(&Vector::zeros(2), &Vector::zeros(1)).is_err());
    }

    #[test]
    fn impulse_response_first_markov_parameters() {
        let m = third_order();
        let h = m.impulse_response(3);
        // y1 = C B, y2 = C A B
        assert_relative_eq!(h[0][(0, 0)], 0.1, epsilon = 1e-15);
        assert_relative_eq!(h[1][(0, 0)], -0.01, epsilon = 1e-12);
    }

    #[test]
    fn impulse_response_of_zero_b_is_zero() {
        let m = LinearModel::new(
            mat(2, 2, &[0.5, 0.0, 0.0, 0.5]),
            Matrix::zeros(2, 1),
            mat(1, 2, &[1.0, 1.0]),
        )
        .unwrap();
        for y in m.impulse_response(5) {
            assert_eq!(y.amax(), 0.0);
        }
    }

    #[test]
    fn impulse_response_matches_pulse_rollout() {
        let m = third_order();
        let d = 12;
        let mut pulse = Matrix::zeros(1, d);
        pulse[(0, 0)] = 1.0;
        let (y, _) = m.simulate(&Vector::zeros(3), &pulse).unwrap();
        let markov = m.impulse_response(d);
        for k in 0..d {
            assert_relative_eq!(y[(0, k)], markov[k][(0, 0)], epsilon = 1e-12);
        }
    }

    #[test]
    fn cstr_single_step_from_origin() {
        let cfg = CstrConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, y) = cstr_step(&cfg, &Vector::zeros(2), &Vector::zeros(1), &mut rng).unwrap();
        assert_relative_eq!(x[0], 0.082, epsilon = 1e-15);
        assert_relative_eq!(x[1], 1.804, epsilon = 1e-12);
        assert_eq!(y[0], 0.0);
    }

    #[test]
    fn cstr_noiseless_output_is_temperature() {
        let cfg = CstrConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = vec_from(&[0.3, -0.7]);
        let (_, y) = cstr_step(&cfg, &x, &vec_from(&[-0.5]), &mut rng).unwrap();
        assert_eq!(y[0], -0.7);
    }

    #[test]
    fn cstr_decoupled_when_rates_vanish() {
        let cfg = CstrConfig {
            da: 0.0,
            db: 0.0,
            ..CstrConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = vec_from(&[0.4, 0.25]);
        let (xn, _) = cstr_step(&cfg, &x, &vec_from(&[1.0]), &mut rng).unwrap();
        // x1' = (1 - T) x1, x2' = (1 + T) x2
        assert_relative_eq!(xn[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(xn[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn cstr_matches_independent_evaluator() {
        // independently coded update, random states
        let cfg = CstrConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let x1: f64 = rng.random_range(-0.5..0.9);
            let x2: f64 = rng.random_range(-1.5..1.2);
            let u: f64 = rng.random_range(-1.0..0.0);
            let mut scratch = ChaCha8Rng::seed_from_u64(0);
            let (xn, _) = cstr_step(
                &cfg,
                &vec_from(&[x1, x2]),
                &vec_from(&[u]),
                &mut scratch,
            )
            .unwrap();
            let r = 0.082 * (1.0 - x1) * x2.exp();
            let e1 = x1 + 1.0 * (-x1 + r);
            let e2 = x2 + 1.0 * (x2 + 22.0 * r - 3.0 * (x2 - u));
            assert_relative_eq!(xn[0], e1, epsilon = 1e-12);
            assert_relative_eq!(xn[1], e2, epsilon = 1e-12);
        }
    }

    #[test]
    fn prms_single_level_is_constant() {
        let cfg = PrmsConfig {
            levels: vec![2.5],
            dwell: 3,
            seed: 1,
        };
        let u = prms(&cfg, 10);
        assert!(u.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn prms_is_reproducible() {
        let cfg = PrmsConfig {
            levels: vec![-1.0, 1.0],
            dwell: 1,
            seed: 1234,
        };
        assert_eq!(prms(&cfg, 50), prms(&cfg, 50));
    }

    #[test]
    fn prms_levels_and_dwell_structure() {
        let cfg = PrmsConfig::spanning(-5.0, 5.0, 11, 5, 42);
        let u = prms(&cfg, 500);
        for k in 0..500 {
            assert!(cfg.levels.iter().any(|&l| (l - u[(0, k)]).abs() < 1e-12));
            if k % 5 != 0 {
                assert_eq!(u[(0, k)], u[(0, k - 1)]);
            }
        }
    }

    #[test]
    fn prms_passes_pe_order_54() {
        let cfg = PrmsConfig::spanning(-5.0, 5.0, 11, 5, 42);
        let u = prms(&cfg, 500);
        let (ok, rank) = crate::hankel::is_persistently_exciting(&u, 54).unwrap();
        assert!(ok, "achieved rank {rank} of 54");
    }

    #[test]
    fn schedule_quadrants_match_tracking_example() {
        let s = ReferenceSchedule::quadrants(&[1.0, 0.7, 0.5, 1.0], 50);
        assert_eq!(s.reference_at(0)[0], 1.0);
        assert_eq!(s.reference_at(49)[0], 1.0);
        assert_eq!(s.reference_at(50)[0], 0.7);
        assert_eq!(s.reference_at(120)[0], 0.5);
        assert_eq!(s.reference_at(199)[0], 1.0);
    }

    #[test]
    fn schedule_single_breakpoint_is_constant() {
        let s = ReferenceSchedule::constant(vec_from(&[0.25]));
        assert_eq!(s.reference_at(0)[0], 0.25);
        assert_eq!(s.reference_at(10_000)[0], 0.25);
    }

    #[test]
    fn schedule_rejects_non_monotone() {
        assert!(ReferenceSchedule::new(vec![
            (0, vec_from(&[1.0])),
            (5, vec_from(&[2.0])),
            (5, vec_from(&[3.0])),
        ])
        .is_err());
    }
}
