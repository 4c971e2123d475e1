//! Smooth NLP solver: an augmented-Lagrangian outer loop around a projected
//! limited-memory quasi-Newton inner loop. Box bounds are handled by
//! projection; general equality and inequality constraints by multiplier
//! updates. Fully deterministic for fixed inputs.

use super::{is_finite_vector, Vector};
use crate::error::{Error, Result};

pub type CostFn = Box<dyn Fn(&Vector) -> f64>;
pub type GradFn = Box<dyn Fn(&Vector) -> Vector>;
pub type VecFn = Box<dyn Fn(&Vector) -> Vector>;

pub struct NlpProblem {
    pub cost: CostFn,
    pub grad: Option<GradFn>,
    /// Inequality constraints f_in(z) <= 0, stacked.
    pub ineq: Option<VecFn>,
    /// Equality constraints f_eq(z) = 0, stacked.
    pub eq: Option<VecFn>,
    pub z0: Vector,
    pub lower: Option<Vector>,
    pub upper: Option<Vector>,
}

impl NlpProblem {
    pub fn new(cost: impl Fn(&Vector) -> f64 + 'static, z0: Vector) -> Self {
        NlpProblem {
            cost: Box::new(cost),
            grad: None,
            ineq: None,
            eq: None,
            z0,
            lower: None,
            upper: None,
        }
    }

    pub fn with_gradient(mut self, grad: impl Fn(&Vector) -> Vector + 'static) -> Self {
        self.grad = Some(Box::new(grad));
        self
    }

    pub fn with_inequalities(mut self, f: impl Fn(&Vector) -> Vector + 'static) -> Self {
        self.ineq = Some(Box::new(f));
        self
    }

    pub fn with_equalities(mut self, f: impl Fn(&Vector) -> Vector + 'static) -> Self {
        self.eq = Some(Box::new(f));
        self
    }

    pub fn with_bounds(mut self, lower: Option<Vector>, upper: Option<Vector>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }
}

#[derive(Debug, Clone)]
pub struct NlpOptions {
    /// Projected-gradient tolerance for first-order stationarity.
    pub tol: f64,
    /// Relative cost-improvement threshold treated as a stall.
    pub stall_tol: f64,
    pub max_iters: usize,
    pub max_outer: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub fd_step: f64,
    pub memory: usize,
}

impl Default for NlpOptions {
    fn default() -> Self {
        NlpOptions {
            tol: 1e-6,
            stall_tol: 1e-10,
            max_iters: 2000,
            max_outer: 20,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            fd_step: 1e-6,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NlpSolution {
    pub z: Vector,
    pub cost: f64,
    pub iterations: usize,
    /// False when the iteration budget ran out before meeting tolerance;
    /// the best iterate is still returned.
    pub converged: bool,
    pub projected_gradient: f64,
    pub constraint_violation: f64,
}

/// Componentwise central-difference gradient of `f` at `z`.
pub fn fd_gradient(f: &dyn Fn(&Vector) -> f64, z: &Vector, h: f64) -> Result<Vector> {
    let mut g = Vector::zeros(z.len());
    let mut zp = z.clone();
    for i in 0..z.len() {
        let step = h * (1.0 + z[i].abs());
        zp[i] = z[i] + step;
        let fp = f(&zp);
        zp[i] = z[i] - step;
        let fm = f(&zp);
        zp[i] = z[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteEvaluation(format!(
                "finite-difference probe at coordinate {i}"
            )));
        }
        g[i] = (fp - fm) / (2.0 * step);
    }
    Ok(g)
}

pub fn solve_nlp(p: &NlpProblem, opts: &NlpOptions) -> Result<NlpSolution> {
    if !is_finite_vector(&p.z0) {
        return Err(Error::NonFiniteEvaluation("NLP initial guess".into()));
    }
    let f0 = (p.cost)(&p.z0);
    if !f0.is_finite() {
        return Err(Error::NonFiniteEvaluation("cost at initial guess".into()));
    }

    let has_constraints = p.ineq.is_some() || p.eq.is_some();
    if !has_constraints {
        let fd = opts.fd_step;
        let inner = match &p.grad {
            Some(gr) => projected_lbfgs(
                |z| (p.cost)(z),
                |z: &Vector| gr(z),
                &p.z0,
                p.lower.as_ref(),
                p.upper.as_ref(),
                opts,
                opts.max_iters,
            )?,
            None => projected_lbfgs(
                |z| (p.cost)(z),
                |z: &Vector| {
                    fd_gradient(p.cost.as_ref(), z, fd).unwrap_or_else(|_| Vector::zeros(z.len()))
                },
                &p.z0,
                p.lower.as_ref(),
                p.upper.as_ref(),
                opts,
                opts.max_iters,
            )?,
        };
        return Ok(NlpSolution {
            cost: inner.cost,
            z: inner.z,
            iterations: inner.iterations,
            converged: inner.converged,
            projected_gradient: inner.projected_gradient,
            constraint_violation: 0.0,
        });
    }

    // Augmented Lagrangian for general constraints. The merit function is
    // differentiated by central differences: constraint Jacobians are not
    // part of the problem interface.
    let n_eq = p.eq.as_ref().map(|f| f(&p.z0).len()).unwrap_or(0);
    let n_in = p.ineq.as_ref().map(|f| f(&p.z0).len()).unwrap_or(0);
    let mut lambda = Vector::zeros(n_eq);
    let mut mu = Vector::zeros(n_in);
    let mut rho = opts.penalty_init;
    let mut z = p.z0.clone();
    let mut total_iters = 0usize;
    let mut prev_viol = f64::INFINITY;
    let mut last_inner_converged = false;

    let eval_ceq = |z: &Vector| -> Vector {
        p.eq.as_ref().map(|f| f(z)).unwrap_or_else(|| Vector::zeros(0))
    };
    let eval_cin = |z: &Vector| -> Vector {
        p.ineq
            .as_ref()
            .map(|f| f(z))
            .unwrap_or_else(|| Vector::zeros(0))
    };

    for _outer in 0..opts.max_outer {
        let lam = lambda.clone();
        let mus = mu.clone();
        let merit = |zz: &Vector| -> f64 {
            let mut v = (p.cost)(zz);
            if n_eq > 0 {
                let c = eval_ceq(zz);
                for i in 0..n_eq {
                    v += lam[i] * c[i] + 0.5 * rho * c[i] * c[i];
                }
            }
            if n_in > 0 {
                let c = eval_cin(zz);
                for i in 0..n_in {
                    let t = (mus[i] + rho * c[i]).max(0.0);
                    v += (t * t - mus[i] * mus[i]) / (2.0 * rho);
                }
            }
            v
        };
        let fd = opts.fd_step;
        let merit_grad = |zz: &Vector| -> Vector {
            fd_gradient(&merit, zz, fd).unwrap_or_else(|_| Vector::zeros(zz.len()))
        };

        let budget = opts.max_iters.saturating_sub(total_iters).max(1);
        let inner = projected_lbfgs(
            &merit,
            merit_grad,
            &z,
            p.lower.as_ref(),
            p.upper.as_ref(),
            opts,
            budget,
        )?;
        z = inner.z;
        total_iters += inner.iterations;
        last_inner_converged = inner.converged;

        let ceq = eval_ceq(&z);
        let cin = eval_cin(&z);
        let viol = ceq
            .amax_or_zero()
            .max(cin.iter().fold(0.0f64, |a, &c| a.max(c.max(0.0))));

        for i in 0..n_eq {
            lambda[i] += rho * ceq[i];
        }
        for i in 0..n_in {
            mu[i] = (mu[i] + rho * cin[i]).max(0.0);
        }

        if viol <= 1e-8 && inner.converged {
            return Ok(NlpSolution {
                cost: (p.cost)(&z),
                z,
                iterations: total_iters,
                converged: true,
                projected_gradient: inner.projected_gradient,
                constraint_violation: viol,
            });
        }
        if viol > 0.25 * prev_viol {
            rho *= opts.penalty_growth;
        }
        prev_viol = viol;
        if total_iters >= opts.max_iters {
            break;
        }
    }

    let ceq = eval_ceq(&z);
    let cin = eval_cin(&z);
    let viol = ceq
        .amax_or_zero()
        .max(cin.iter().fold(0.0f64, |a, &c| a.max(c.max(0.0))));
    Ok(NlpSolution {
        cost: (p.cost)(&z),
        z,
        iterations: total_iters,
        converged: last_inner_converged && viol <= 1e-6,
        projected_gradient: f64::NAN,
        constraint_violation: viol,
    })
}

trait AmaxOrZero {
    fn amax_or_zero(&self) -> f64;
}
impl AmaxOrZero for Vector {
    fn amax_or_zero(&self) -> f64 {
        if self.len() == 0 {
            0.0
        } else {
            self.amax()
        }
    }
}

struct InnerResult {
    z: Vector,
    cost: f64,
    iterations: usize,
    converged: bool,
    projected_gradient: f64,
}

fn project(z: &Vector, lower: Option<&Vector>, upper: Option<&Vector>) -> Vector {
    let mut out = z.clone();
    if let Some(l) = lower {
        for i in 0..out.len() {
            out[i] = out[i].max(l[i]);
        }
    }
    if let Some(u) = upper {
        for i in 0..out.len() {
            out[i] = out[i].min(u[i]);
        }
    }
    out
}

/// Projected L-BFGS with Armijo backtracking along the projected path.
fn projected_lbfgs(
    f: impl Fn(&Vector) -> f64,
    grad: impl Fn(&Vector) -> Vector,
    z0: &Vector,
    lower: Option<&Vector>,
    upper: Option<&Vector>,
    opts: &NlpOptions,
    max_iters: usize,
) -> Result<InnerResult> {
    let mut z = project(z0, lower, upper);
    let mut fz = f(&z);
    if !fz.is_finite() {
        return Err(Error::NonFiniteEvaluation("cost at projected start".into()));
    }
    let mut g = grad(&z);
    let mut s_hist: Vec<Vector> = Vec::new();
    let mut y_hist: Vec<Vector> = Vec::new();
    let mut stall_count = 0usize;
    let mut iterations = 0usize;

    if max_iters == 0 {
        let pg = (&z - project(&(&z - &g), lower, upper)).amax_or_zero();
        return Ok(InnerResult {
            z,
            cost: fz,
            iterations: 0,
            converged: pg <= opts.tol,
            projected_gradient: pg,
        });
    }

    for iter in 0..max_iters {
        iterations = iter + 1;
        let pg = (&z - project(&(&z - &g), lower, upper)).amax_or_zero();
        if pg <= opts.tol {
            return Ok(InnerResult {
                z,
                cost: fz,
                iterations: iter,
                converged: true,
                projected_gradient: pg,
            });
        }

        // Two-loop recursion with gradient components at active bounds zeroed
        // so the direction does not push into the bounds.
        let mut geff = g.clone();
        if lower.is_some() || upper.is_some() {
            for i in 0..z.len() {
                let at_lower = lower.map(|l| z[i] <= l[i] + 1e-12).unwrap_or(false);
                let at_upper = upper.map(|u| z[i] >= u[i] - 1e-12).unwrap_or(false);
                if (at_lower && geff[i] > 0.0) || (at_upper && geff[i] < 0.0) {
                    geff[i] = 0.0;
                }
            }
        }
        let mut d = two_loop(&geff, &s_hist, &y_hist);
        if d.dot(&geff) >= 0.0 {
            d = -geff.clone();
        }

        // Backtracking along the projected path.
        let mut step = 1.0;
        let mut accepted = false;
        let mut z_new = z.clone();
        let mut f_new = fz;
        for _ in 0..60 {
            let cand = project(&(&z + step * &d), lower, upper);
            let fc = f(&cand);
            if fc.is_finite() {
                let decrease = g.dot(&(&cand - &z));
                if fc <= fz + 1e-4 * decrease.min(0.0) && fc < fz + 1e-16 {
                    z_new = cand;
                    f_new = fc;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            // No descent along this direction: treat as converged at floor.
            return Ok(InnerResult {
                z,
                cost: fz,
                iterations: iter + 1,
                converged: pg <= opts.tol * 10.0,
                projected_gradient: pg,
            });
        }

        let g_new = grad(&z_new);
        let s = &z_new - &z;
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            s_hist.push(s);
            y_hist.push(yv);
            if s_hist.len() > opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }

        let improvement = (fz - f_new).abs();
        if improvement <= opts.stall_tol * fz.abs().max(1.0) {
            stall_count += 1;
        } else {
            stall_count = 0;
        }
        z = z_new;
        fz = f_new;
        g = g_new;
        if stall_count >= 3 {
            let pg = (&z - project(&(&z - &g), lower, upper)).amax_or_zero();
            return Ok(InnerResult {
                z,
                cost: fz,
                iterations: iter + 1,
                converged: true,
                projected_gradient: pg,
            });
        }
    }

    let pg = (&z - project(&(&z - &g), lower, upper)).amax_or_zero();
    Ok(InnerResult {
        z,
        cost: fz,
        iterations,
        converged: pg <= opts.tol,
        projected_gradient: pg,
    })
}

fn two_loop(g: &Vector, s_hist: &[Vector], y_hist: &[Vector]) -> Vector {
    let k = s_hist.len();
    if k == 0 {
        return -g.clone();
    }
    let mut q = g.clone();
    let mut alphas = vec![0.0; k];
    for i in (0..k).rev() {
        let rho = 1.0 / y_hist[i].dot(&s_hist[i]);
        alphas[i] = rho * s_hist[i].dot(&q);
        q -= alphas[i] * &y_hist[i];
    }
    let gamma = s_hist[k - 1].dot(&y_hist[k - 1]) / y_hist[k - 1].dot(&y_hist[k - 1]);
    let mut r = gamma * q;
    for i in 0..k {
        let rho = 1.0 / y_hist[i].dot(&s_hist[i]);
        let beta = rho * y_hist[i].dot(&r);
        r += (alphas[i] - beta) * &s_hist[i];
    }
    -r
}
