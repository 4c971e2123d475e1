//! Dense convex QP solver: operator-splitting iterations with an exact
//! active-set polish step, so returned solutions carry tight KKT residuals.
//!
//! Cost convention follows the rest of the crate: minimize
//! `z' H z + z' q` subject to `F z <= g` and `Feq z = geq`.

use super::{is_finite_matrix, is_finite_vector, pinv, Matrix, Vector};
use crate::error::{Error, Result};

/// QP data. `f`/`g` and `f_eq`/`g_eq` may have zero rows.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: Matrix,
    pub q: Vector,
    pub f: Matrix,
    pub g: Vector,
    pub f_eq: Matrix,
    pub g_eq: Vector,
}

impl QpProblem {
    pub fn new(h: Matrix, q: Vector) -> Self {
        let n = q.len();
        QpProblem {
            h,
            q,
            f: Matrix::zeros(0, n),
            g: Vector::zeros(0),
            f_eq: Matrix::zeros(0, n),
            g_eq: Vector::zeros(0),
        }
    }

    pub fn with_inequalities(mut self, f: Matrix, g: Vector) -> Self {
        self.f = f;
        self.g = g;
        self
    }

    pub fn with_equalities(mut self, f_eq: Matrix, g_eq: Vector) -> Self {
        self.f_eq = f_eq;
        self.g_eq = g_eq;
        self
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, z: &Vector) -> f64 {
        (z.transpose() * &self.h * z)[(0, 0)] + z.dot(&self.q)
    }

    fn validate(&self) -> Result<()> {
        let n = self.q.len();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "QP: H is {}x{} but q has length {n}",
                self.h.nrows(),
                self.h.ncols()
            )));
        }
        if self.f.ncols() != n || self.f.nrows() != self.g.len() {
            return Err(Error::DimensionMismatch("QP: inequality block".into()));
        }
        if self.f_eq.ncols() != n || self.f_eq.nrows() != self.g_eq.len() {
            return Err(Error::DimensionMismatch("QP: equality block".into()));
        }
        if !is_finite_matrix(&self.h)
            || !is_finite_vector(&self.q)
            || (self.f.nrows() > 0 && !is_finite_matrix(&self.f))
            || (self.f_eq.nrows() > 0 && !is_finite_matrix(&self.f_eq))
            || !is_finite_vector(&self.g)
            || !is_finite_vector(&self.g_eq)
        {
            return Err(Error::InvalidMatrix("QP data has non-finite entries".into()));
        }
        let sym_err = (&self.h - self.h.transpose()).amax();
        let scale = self.h.amax().max(1.0);
        if sym_err > 1e-12 * scale {
            return Err(Error::InvalidMatrix(format!(
                "QP: H is not symmetric (asymmetry {sym_err:.3e})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QpOptions {
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Target residual for the combined KKT conditions of the returned point.
    pub kkt_tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub adaptive_rho: bool,
    pub polish: bool,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            eps_abs: 1e-10,
            eps_rel: 1e-10,
            kkt_tol: 1e-8,
            max_iter: 200_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            polish: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: Vector,
    /// Multipliers for `F z <= g`, nonnegative.
    pub ineq_multipliers: Vector,
    /// Multipliers for `Feq z = geq`, sign free.
    pub eq_multipliers: Vector,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub polished: bool,
}

/// Data magnitude used to turn the absolute KKT tolerance into a relative
/// one for large or badly scaled problems.
fn problem_scale(p: &QpProblem) -> f64 {
    let mut s = 1.0f64;
    s = s.max(p.h.amax()).max(p.q.amax());
    if p.g.len() > 0 {
        s = s.max(p.g.amax());
    }
    if p.g_eq.len() > 0 {
        s = s.max(p.g_eq.amax());
    }
    s
}

/// Combined KKT residual: stationarity, primal feasibility, dual feasibility,
/// and complementarity, each in the infinity norm.
pub fn kkt_residual(p: &QpProblem, z: &Vector, mu: &Vector, lambda: &Vector) -> f64 {
    let mut stat = 2.0 * (&p.h * z) + p.q.clone();
    if p.f.nrows() > 0 {
        stat += p.f.transpose() * mu;
    }
    if p.f_eq.nrows() > 0 {
        stat += p.f_eq.transpose() * lambda;
    }
    let mut res: f64 = stat.amax();
    if p.f.nrows() > 0 {
        let slack = &p.f * z - &p.g;
        for i in 0..slack.len() {
            res = res.max(slack[i]); // primal violation
            res = res.max(-mu[i]); // dual feasibility
            res = res.max((mu[i] * slack[i]).abs()); // complementarity
        }
    }
    if p.f_eq.nrows() > 0 {
        res = res.max((&p.f_eq * z - &p.g_eq).amax());
    }
    res
}

pub fn solve_qp(p: &QpProblem, opts: &QpOptions) -> Result<QpSolution> {
    solve_qp_warm(p, opts, None)
}

/// Solve with an optional warm start `(z, y)` where `y` stacks equality then
/// inequality multipliers in constraint order.
pub fn solve_qp_warm(
    p: &QpProblem,
    opts: &QpOptions,
    warm: Option<(&Vector, &Vector)>,
) -> Result<QpSolution> {
    p.validate()?;
    if p.f.nrows() == 0 {
        return solve_equality_qp(p, opts);
    }
    admm(p, opts, warm)
}

/// Unconstrained or equality-constrained QP via one KKT linear solve.
fn solve_equality_qp(p: &QpProblem, opts: &QpOptions) -> Result<QpSolution> {
    let n = p.num_vars();
    let me = p.f_eq.nrows();
    let mut kkt = Matrix::zeros(n + me, n + me);
    kkt.view_mut((0, 0), (n, n)).copy_from(&(2.0 * &p.h));
    if me > 0 {
        kkt.view_mut((0, n), (n, me)).copy_from(&p.f_eq.transpose());
        kkt.view_mut((n, 0), (me, n)).copy_from(&p.f_eq);
    }
    let mut rhs = Vector::zeros(n + me);
    rhs.rows_mut(0, n).copy_from(&(-&p.q));
    if me > 0 {
        rhs.rows_mut(n, me).copy_from(&p.g_eq);
    }

    let sol = solve_linear_or_least_squares(&kkt, &rhs)?;
    let z = Vector::from(sol.rows(0, n));
    let lambda = if me > 0 {
        Vector::from(sol.rows(n, me))
    } else {
        Vector::zeros(0)
    };

    // Inconsistent equalities mean an empty feasible set; a stationarity
    // residual that the least-squares solve could not close means the cost
    // is unbounded along some feasible direction.
    let scale = 1.0 + p.g_eq.amax().max(p.q.amax());
    if me > 0 && (&p.f_eq * &z - &p.g_eq).amax() > 1e-8 * scale {
        return Err(Error::QpInfeasible);
    }
    let stat = {
        let mut s = 2.0 * (&p.h * &z) + p.q.clone();
        if me > 0 {
            s += p.f_eq.transpose() * &lambda;
        }
        s.amax()
    };
    if stat > 1e-6 * scale.max(p.h.amax()) {
        return Err(Error::QpUnbounded);
    }
    let mu = Vector::zeros(0);
    let kkt_res = kkt_residual(p, &z, &mu, &lambda);
    if kkt_res > opts.kkt_tol * problem_scale(p) {
        return Err(Error::MaxIterations {
            iterations: 1,
            residual: kkt_res,
        });
    }
    Ok(QpSolution {
        objective: p.objective(&z),
        z,
        ineq_multipliers: mu,
        eq_multipliers: lambda,
        kkt_residual: kkt_res,
        iterations: 1,
        polished: true,
    })
}

fn solve_linear_or_least_squares(a: &Matrix, b: &Vector) -> Result<Vector> {
    if let Some(lu) = a.clone().lu().solve(b) {
        if lu.iter().all(|v| v.is_finite()) {
            let resid = (a * &lu - b).amax();
            let scale = 1.0 + b.amax();
            if resid <= 1e-9 * scale {
                return Ok(lu);
            }
        }
    }
    // Singular or ill-conditioned: minimum-norm solution with two rounds of
    // iterative refinement to recover digits lost in the pseudoinverse.
    let ainv = pinv(a)?;
    let mut x = &ainv * b;
    for _ in 0..2 {
        let r = b - a * &x;
        x += &ainv * r;
    }
    Ok(x)
}

/// Operator-splitting solve of
///   min 1/2 x'Px + c'x  s.t.  l <= Ax <= u
/// with P = 2H and c = q; equality rows have l = u.
fn admm(p: &QpProblem, opts: &QpOptions, warm: Option<(&Vector, &Vector)>) -> Result<QpSolution> {
    let n = p.num_vars();
    let me = p.f_eq.nrows();
    let mi = p.f.nrows();
    let m = me + mi;

    let a = super::stack_vertical(&[&p.f_eq, &p.f]);
    let mut lower = Vector::from_element(m, f64::NEG_INFINITY);
    let mut upper = Vector::zeros(m);
    for i in 0..me {
        lower[i] = p.g_eq[i];
        upper[i] = p.g_eq[i];
    }
    for i in 0..mi {
        upper[me + i] = p.g[i];
    }

    let pm = 2.0 * &p.h;
    let c = p.q.clone();

    let mut rho = opts.rho;
    let rho_vec = |rho: f64| -> Vector {
        let mut r = Vector::from_element(m, rho);
        for i in 0..me {
            r[i] = rho * 1e3;
        }
        r
    };

    let factorize = |rho_v: &Vector| -> Result<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
        let mut k = pm.clone();
        for i in 0..n {
            k[(i, i)] += opts.sigma;
        }
        // K = P + sigma I + A' R A
        let mut ra = a.clone();
        for i in 0..m {
            let scale = rho_v[i];
            for j in 0..n {
                ra[(i, j)] *= scale;
            }
        }
        k += a.transpose() * ra;
        Ok(k.lu())
    };

    let mut rv = rho_vec(rho);
    let mut kf = factorize(&rv)?;

    let mut x = warm.map(|(z, _)| z.clone()).unwrap_or_else(|| Vector::zeros(n));
    let mut y = warm
        .map(|(_, y)| y.clone())
        .unwrap_or_else(|| Vector::zeros(m));
    if y.len() != m {
        y = Vector::zeros(m);
    }
    let mut zc = {
        let ax = &a * &x;
        clamp(&ax, &lower, &upper)
    };

    let check_every = 25;
    let kkt_gate = opts.kkt_tol * problem_scale(p);
    let mut best: Option<QpSolution> = None;
    let mut last_x = x.clone();
    let mut last_y = y.clone();

    let mut iter = 0;
    while iter < opts.max_iter {
        iter += 1;

        // x-update
        let mut rhs = opts.sigma * &x - &c;
        let mut rz = Vector::zeros(m);
        for i in 0..m {
            rz[i] = rv[i] * zc[i] - y[i];
        }
        rhs += a.transpose() * &rz;
        let xt = kf
            .solve(&rhs)
            .ok_or_else(|| Error::InvalidMatrix("QP: singular splitting system".into()))?;

        let zt = &a * &xt;
        let x_next = opts.alpha * &xt + (1.0 - opts.alpha) * &x;

        let mut z_arg = Vector::zeros(m);
        for i in 0..m {
            z_arg[i] = opts.alpha * zt[i] + (1.0 - opts.alpha) * zc[i] + y[i] / rv[i];
        }
        let z_next = clamp(&z_arg, &lower, &upper);
        let mut y_next = y.clone();
        for i in 0..m {
            y_next[i] += rv[i] * (opts.alpha * zt[i] + (1.0 - opts.alpha) * zc[i] - z_next[i]);
        }

        x = x_next;
        zc = z_next;
        y = y_next;

        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteEvaluation("QP iterates diverged".into()));
        }

        if iter % check_every == 0 || iter == opts.max_iter {
            let ax = &a * &x;
            let r_prim = (&ax - &zc).amax();
            let px = &pm * &x;
            let aty = a.transpose() * &y;
            let r_dual = (&px + &c + &aty).amax();
            let eps_prim = opts.eps_abs + opts.eps_rel * ax.amax().max(zc.amax());
            let eps_dual = opts.eps_abs + opts.eps_rel * px.amax().max(c.amax()).max(aty.amax());

            // Infeasibility certificates from the iterate differences.
            let dy = &y - &last_y;
            let dx = &x - &last_x;
            if is_primal_infeasibility_certificate(&a, &lower, &upper, &dy) {
                return Err(Error::QpInfeasible);
            }
            if is_dual_infeasibility_certificate(&pm, &c, &a, &lower, &upper, &dx) {
                return Err(Error::QpUnbounded);
            }
            last_x = x.clone();
            last_y = y.clone();

            let loose = r_prim <= 1e-6 + 1e-6 * ax.amax().max(zc.amax())
                && r_dual <= 1e-6 + 1e-6 * px.amax().max(c.amax()).max(aty.amax());
            if loose || (r_prim <= eps_prim && r_dual <= eps_dual) {
                let candidate = extract_solution(p, me, mi, &x, &y, iter);
                if opts.polish {
                    if let Some(pol) = polish(p, &candidate) {
                        if pol.kkt_residual <= kkt_gate {
                            return Ok(pol);
                        }
                        if best
                            .as_ref()
                            .map(|b| pol.kkt_residual < b.kkt_residual)
                            .unwrap_or(true)
                        {
                            best = Some(pol);
                        }
                    }
                }
                if candidate.kkt_residual <= kkt_gate {
                    return Ok(candidate);
                }
                if best
                    .as_ref()
                    .map(|b| candidate.kkt_residual < b.kkt_residual)
                    .unwrap_or(true)
                {
                    best = Some(candidate);
                }
                if r_prim <= eps_prim && r_dual <= eps_dual {
                    // Converged to the hard tolerance; return the best point seen.
                    let b = best.unwrap();
                    if b.kkt_residual <= kkt_gate {
                        return Ok(b);
                    }
                    return Err(Error::MaxIterations {
                        iterations: iter,
                        residual: b.kkt_residual,
                    });
                }
            }

            if opts.adaptive_rho && iter % 200 == 0 && r_dual > 0.0 && r_prim > 0.0 {
                let scaled_p = r_prim / (ax.amax().max(zc.amax()) + 1e-12);
                let scaled_d = r_dual / (px.amax().max(c.amax()).max(aty.amax()) + 1e-12);
                let ratio = (scaled_p / (scaled_d + 1e-16)).sqrt();
                let new_rho = (rho * ratio).clamp(1e-6, 1e6);
                if new_rho > 5.0 * rho || new_rho < rho / 5.0 {
                    rho = new_rho;
                    rv = rho_vec(rho);
                    kf = factorize(&rv)?;
                }
            }
        }
    }

    if let Some(b) = best {
        if b.kkt_residual <= kkt_gate {
            return Ok(b);
        }
        return Err(Error::MaxIterations {
            iterations: opts.max_iter,
            residual: b.kkt_residual,
        });
    }
    Err(Error::MaxIterations {
        iterations: opts.max_iter,
        residual: f64::INFINITY,
    })
}

fn clamp(v: &Vector, lower: &Vector, upper: &Vector) -> Vector {
    Vector::from_fn(v.len(), |i, _| v[i].clamp(lower[i], upper[i]))
}

fn extract_solution(
    p: &QpProblem,
    me: usize,
    mi: usize,
    x: &Vector,
    y: &Vector,
    iterations: usize,
) -> QpSolution {
    let lambda = Vector::from_fn(me, |i, _| y[i]);
    // Inequality rows are one-sided (upper bounds), so multipliers are >= 0.
    let mu = Vector::from_fn(mi, |i, _| y[me + i].max(0.0));
    let kkt = kkt_residual(p, x, &mu, &lambda);
    QpSolution {
        z: x.clone(),
        objective: p.objective(x),
        ineq_multipliers: mu,
        eq_multipliers: lambda,
        kkt_residual: kkt,
        iterations,
        polished: false,
    }
}

/// Re-solve the KKT system on the active set guessed from the splitting
/// iterate. Exact when the guess is right; verified before acceptance.
fn polish(p: &QpProblem, candidate: &QpSolution) -> Option<QpSolution> {
    let n = p.num_vars();
    let mi = p.f.nrows();
    let slack = &p.f * &candidate.z - &p.g;
    let mut active: Vec<usize> = (0..mi)
        .filter(|&i| candidate.ineq_multipliers[i] > 1e-8 || slack[i].abs() <= 1e-7)
        .collect();

    for _attempt in 0..3 {
        let me = p.f_eq.nrows();
        let na = active.len();
        let mut kkt = Matrix::zeros(n + me + na, n + me + na);
        kkt.view_mut((0, 0), (n, n)).copy_from(&(2.0 * &p.h));
        if me > 0 {
            kkt.view_mut((0, n), (n, me)).copy_from(&p.f_eq.transpose());
            kkt.view_mut((n, 0), (me, n)).copy_from(&p.f_eq);
        }
        for (row, &ci) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + me + row, j)] = p.f[(ci, j)];
                kkt[(j, n + me + row)] = p.f[(ci, j)];
            }
        }
        let mut rhs = Vector::zeros(n + me + na);
        rhs.rows_mut(0, n).copy_from(&(-&p.q));
        if me > 0 {
            rhs.rows_mut(n, me).copy_from(&p.g_eq);
        }
        for (row, &ci) in active.iter().enumerate() {
            rhs[n + me + row] = p.g[ci];
        }

        let sol = solve_linear_or_least_squares(&kkt, &rhs).ok()?;
        let z = Vector::from(sol.rows(0, n));
        let lambda = Vector::from(sol.rows(n, me));
        let mut mu = Vector::zeros(mi);
        let mut negative: Vec<usize> = Vec::new();
        for (row, &ci) in active.iter().enumerate() {
            let v = sol[n + me + row];
            if v < -1e-9 {
                negative.push(ci);
            } else {
                mu[ci] = v.max(0.0);
            }
        }
        if !negative.is_empty() {
            active.retain(|ci| !negative.contains(ci));
            continue;
        }
        let kkt_res = kkt_residual(p, &z, &mu, &lambda);
        if !z.iter().all(|v| v.is_finite()) {
            return None;
        }
        return Some(QpSolution {
            objective: p.objective(&z),
            z,
            ineq_multipliers: mu,
            eq_multipliers: lambda,
            kkt_residual: kkt_res,
            iterations: candidate.iterations,
            polished: true,
        });
    }
    None
}

fn is_primal_infeasibility_certificate(
    a: &Matrix,
    lower: &Vector,
    upper: &Vector,
    dy: &Vector,
) -> bool {
    let norm = dy.amax();
    if norm <= 1e-12 {
        return false;
    }
    let eps = 1e-10 * norm;
    if (a.transpose() * dy).amax() > eps {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        let plus = dy[i].max(0.0);
        let minus = dy[i].min(0.0);
        if upper[i].is_finite() {
            support += upper[i] * plus;
        } else if plus > eps {
            return false;
        }
        if lower[i].is_finite() {
            support += lower[i] * minus;
        } else if minus < -eps {
            return false;
        }
    }
    support < -eps
}

fn is_dual_infeasibility_certificate(
    pm: &Matrix,
    c: &Vector,
    a: &Matrix,
    lower: &Vector,
    upper: &Vector,
    dx: &Vector,
) -> bool {
    let norm = dx.amax();
    if norm <= 1e-12 {
        return false;
    }
    let eps = 1e-10 * norm;
    if (pm * dx).amax() > eps {
        return false;
    }
    if c.dot(dx) > -eps {
        return false;
    }
    let adx = a * dx;
    for i in 0..adx.len() {
        if upper[i].is_finite() && adx[i] > eps {
            return false;
        }
        if lower[i].is_finite() && adx[i] < -eps {
            return false;
        }
    }
    true
}
