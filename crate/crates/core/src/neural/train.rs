//! Rollout losses and their reverse-mode gradients, quasi-Newton training
//! with seeded multi-start, the ordered-variance loss with state
//! truncation, and steady-state reference solving for trained models.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{net_backward, net_forward_cached, zero_grads, Layer, RnnModel, SsnnModel};
use crate::error::{Error, Result};
use crate::numerics::{solve_nlp, Matrix, NlpOptions, NlpProblem, Vector};

const GUARD_LOSS: f64 = 1e12;

fn concat(a: &Vector, b: &Vector) -> Vector {
    let mut v = Vector::zeros(a.len() + b.len());
    v.rows_mut(0, a.len()).copy_from(a);
    v.rows_mut(a.len(), b.len()).copy_from(b);
    v
}

/// Squared rollout error of the recurrent model anchored at the first
/// measured output: predictions are `yhat_1 = y_1`,
/// `yhat_{k+1} = net(yhat_k, u_k)` against `y_1..y_T` using `u_1..u_{T-1}`.
pub fn rnn_loss(model: &RnnModel, u: &Matrix, y: &Matrix) -> f64 {
    let t = y.ncols();
    let anchor = Vector::from(y.column(0));
    let u_used = u.columns(1, t - 1).clone_owned();
    match model.rollout(&anchor, &u_used) {
        Ok(pred) => (&pred - y).norm_squared(),
        Err(_) => GUARD_LOSS,
    }
}

/// Loss and gradient of [`rnn_loss`] in packed parameter order.
pub fn rnn_loss_grad(model: &RnnModel, theta: &Vector, u: &Matrix, y: &Matrix) -> (f64, Vector) {
    let net = match model.with_parameters(theta) {
        Ok(m) => m,
        Err(_) => return (GUARD_LOSS, Vector::zeros(theta.len())),
    };
    let p = net.n_outputs;
    let t = y.ncols();

    // forward with caches: step k maps yhat_k -> yhat_{k+1} using u_k
    let mut caches: Vec<Vec<Vector>> = Vec::with_capacity(t - 1);
    let mut preds: Vec<Vector> = Vec::with_capacity(t);
    preds.push(Vector::from(y.column(0)));
    let mut loss = 0.0;
    for k in 1..t {
        let input = concat(&preds[k - 1], &Vector::from(u.column(k)));
        let Some(acts) = net_forward_cached(&net.layers, &input) else {
            return (GUARD_LOSS, Vector::zeros(theta.len()));
        };
        let yhat = acts.last().unwrap().clone();
        if yhat.amax() > super::STATE_GUARD {
            return (GUARD_LOSS, Vector::zeros(theta.len()));
        }
        loss += (&yhat - &Vector::from(y.column(k))).norm_squared();
        caches.push(acts);
        preds.push(yhat);
    }

    // reverse sweep: running gradient with respect to yhat_{k}
    let mut grads = zero_grads(&net.layers);
    let mut g_next = Vector::zeros(p);
    for k in (1..t).rev() {
        let err = &preds[k] - &Vector::from(y.column(k));
        let delta = 2.0 * err + &g_next;
        let d_input = net_backward(&net.layers, &caches[k - 1], &delta, &mut grads);
        g_next = Vector::from(d_input.rows(0, p));
    }

    let mut packed = Vec::with_capacity(theta.len());
    super::grads_into(&grads, &mut packed);
    (loss, Vector::from_row_slice(&packed))
}

/// Squared rollout error of the state-space model from its trained initial
/// state over `u_0..u_{T-1}` against `y_1..y_T`.
pub fn ssnn_loss(model: &SsnnModel, u: &Matrix, y: &Matrix) -> f64 {
    match model.rollout(&model.x0, u) {
        Ok((_, pred)) => (&pred - y).norm_squared(),
        Err(_) => GUARD_LOSS,
    }
}

/// Weights of the ordered-variance training loss.
#[derive(Debug, Clone)]
pub struct SsnnoConfig {
    /// Output-error weight.
    pub alpha1: f64,
    /// State-variance weight.
    pub alpha2: f64,
    /// State-net parameter regularization.
    pub alpha3: f64,
    /// Output-net parameter regularization.
    pub alpha4: f64,
    /// Per-state variance weights, strictly increasing to push variance
    /// into the leading states.
    pub state_weights: Vector,
    /// Variance threshold for order selection.
    pub delta: f64,
}

impl SsnnoConfig {
    /// Linearly increasing state weights w_i = i.
    pub fn with_linear_weights(latent: usize, alpha: [f64; 4], delta: f64) -> Self {
        SsnnoConfig {
            alpha1: alpha[0],
            alpha2: alpha[1],
            alpha3: alpha[2],
            alpha4: alpha[3],
            state_weights: Vector::from_fn(latent, |i, _| (i + 1) as f64),
            delta,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SsnnoParts {
    pub output_error: f64,
    pub variance_term: f64,
    pub regularization: f64,
    /// Per-state variances of the predicted state sequence.
    pub variances: Vector,
}

/// Ordered-variance loss
/// `a1 ||Y - Yhat||^2 + a2 ||W^(1/2)(X - Xbar)||^2 + a3 ||th_f||^2 + a4 ||th_h||^2`;
/// the middle term equals `a2 (D - 1) sum_i w_i V_i` with per-state
/// variances V_i.
pub fn ssnno_loss(model: &SsnnModel, u: &Matrix, y: &Matrix, cfg: &SsnnoConfig) -> (f64, SsnnoParts) {
    let reg = |layers: &[Layer]| -> f64 {
        layers
            .iter()
            .map(|l| l.weight.norm_squared() + l.bias.norm_squared())
            .sum()
    };
    let regularization =
        cfg.alpha3 * reg(&model.state_net) + cfg.alpha4 * reg(&model.output_net);
    match model.rollout(&model.x0, u) {
        Ok((xs, pred)) => {
            let d = xs.ncols();
            let output_error = cfg.alpha1 * (&pred - y).norm_squared();
            let mut variances = Vector::zeros(model.latent);
            let mut variance_term = 0.0;
            for i in 0..model.latent {
                let mean = xs.row(i).sum() / d as f64;
                let ss: f64 = xs.row(i).iter().map(|&v| (v - mean) * (v - mean)).sum();
                variances[i] = if d > 1 { ss / (d as f64 - 1.0) } else { 0.0 };
                variance_term += cfg.alpha2 * cfg.state_weights[i] * ss;
            }
            (
                output_error + variance_term + regularization,
                SsnnoParts {
                    output_error,
                    variance_term,
                    regularization,
                    variances,
                },
            )
        }
        Err(_) => (
            GUARD_LOSS,
            SsnnoParts {
                output_error: GUARD_LOSS,
                variance_term: 0.0,
                regularization,
                variances: Vector::zeros(model.latent),
            },
        ),
    }
}

/// Shared reverse-mode pass for the state-space losses. `ssnno` adds the
/// variance and regularization terms; without it this is the plain
/// squared-error gradient.
fn ssnn_reverse(
    model: &SsnnModel,
    theta: &Vector,
    u: &Matrix,
    y: &Matrix,
    ssnno: Option<&SsnnoConfig>,
) -> (f64, Vector) {
    let net = match model.with_parameters(theta) {
        Ok(m) => m,
        Err(_) => return (GUARD_LOSS, Vector::zeros(theta.len())),
    };
    let t = u.ncols();
    let l = net.latent;
    let (a1, a2, a3, a4) = match ssnno {
        Some(c) => (c.alpha1, c.alpha2, c.alpha3, c.alpha4),
        None => (1.0, 0.0, 0.0, 0.0),
    };

    // forward, caching both nets per step
    let mut f_caches = Vec::with_capacity(t);
    let mut h_caches = Vec::with_capacity(t);
    let mut states = Vec::with_capacity(t + 1);
    states.push(net.x0.clone());
    let mut loss = 0.0;
    for k in 0..t {
        let input = concat(&states[k], &Vector::from(u.column(k)));
        let Some(facts) = net_forward_cached(&net.state_net, &input) else {
            return (GUARD_LOSS, Vector::zeros(theta.len()));
        };
        let x = facts.last().unwrap().clone();
        if x.amax() > super::STATE_GUARD {
            return (GUARD_LOSS, Vector::zeros(theta.len()));
        }
        let Some(hacts) = net_forward_cached(&net.output_net, &x) else {
            return (GUARD_LOSS, Vector::zeros(theta.len()));
        };
        let yhat = hacts.last().unwrap();
        loss += a1 * (yhat - &Vector::from(y.column(k))).norm_squared();
        f_caches.push(facts);
        h_caches.push(hacts);
        states.push(x);
    }

    // state means for the variance term (over x_1..x_T)
    let mut means = Vector::zeros(l);
    if a2 > 0.0 {
        for k in 1..=t {
            means += &states[k];
        }
        means /= t as f64;
        let weights = &ssnno.unwrap().state_weights;
        for k in 1..=t {
            for i in 0..l {
                let dev = states[k][i] - means[i];
                loss += a2 * weights[i] * dev * dev;
            }
        }
    }

    // parameter regularization
    let reg = |layers: &[Layer]| -> f64 {
        layers
            .iter()
            .map(|ly| ly.weight.norm_squared() + ly.bias.norm_squared())
            .sum()
    };
    loss += a3 * reg(&net.state_net) + a4 * reg(&net.output_net);

    // reverse sweep
    let mut f_grads = zero_grads(&net.state_net);
    let mut h_grads = zero_grads(&net.output_net);
    let mut g_next = Vector::zeros(l);
    for k in (0..t).rev() {
        // output branch at x_{k+1}
        let yhat = h_caches[k].last().unwrap();
        let dy = 2.0 * a1 * (yhat - &Vector::from(y.column(k)));
        let mut g = net_backward(&net.output_net, &h_caches[k], &dy, &mut h_grads);
        g += &g_next;
        if a2 > 0.0 {
            let weights = &ssnno.unwrap().state_weights;
            for i in 0..l {
                g[i] += 2.0 * a2 * weights[i] * (states[k + 1][i] - means[i]);
            }
        }
        // through the state net of step k
        let d_input = net_backward(&net.state_net, &f_caches[k], &g, &mut f_grads);
        g_next = Vector::from(d_input.rows(0, l));
    }

    // regularization gradients
    if a3 > 0.0 {
        for (gr, ly) in f_grads.iter_mut().zip(net.state_net.iter()) {
            gr.0 += 2.0 * a3 * &ly.weight;
            gr.1 += 2.0 * a3 * &ly.bias;
        }
    }
    if a4 > 0.0 {
        for (gr, ly) in h_grads.iter_mut().zip(net.output_net.iter()) {
            gr.0 += 2.0 * a4 * &ly.weight;
            gr.1 += 2.0 * a4 * &ly.bias;
        }
    }

    let mut packed = Vec::with_capacity(theta.len());
    super::grads_into(&f_grads, &mut packed);
    super::grads_into(&h_grads, &mut packed);
    packed.extend(g_next.iter()); // d loss / d x0
    (loss, Vector::from_row_slice(&packed))
}

/// Loss and gradient of [`ssnn_loss`] in packed parameter order.
pub fn ssnn_loss_grad(model: &SsnnModel, theta: &Vector, u: &Matrix, y: &Matrix) -> (f64, Vector) {
    ssnn_reverse(model, theta, u, y, None)
}

/// Loss and gradient of [`ssnno_loss`] in packed parameter order.
pub fn ssnno_loss_grad(
    model: &SsnnModel,
    theta: &Vector,
    u: &Matrix,
    y: &Matrix,
    cfg: &SsnnoConfig,
) -> (f64, Vector) {
    ssnn_reverse(model, theta, u, y, Some(cfg))
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub starts: usize,
    pub max_iters_per_start: usize,
    pub train_fraction: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            starts: 6,
            max_iters_per_start: 2500,
            train_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub train_loss: f64,
    pub validation_rmse: f64,
    pub output_range: f64,
    pub iterations: usize,
    pub starts: usize,
}

fn validation_rmse(pred: Option<&Matrix>, y: &Matrix, split: usize) -> f64 {
    let Some(pred) = pred else {
        return f64::INFINITY;
    };
    let d = y.ncols();
    let p = y.nrows();
    if split >= d {
        return 0.0;
    }
    let mut sum = 0.0;
    for k in split..d {
        sum += (Vector::from(pred.column(k)) - Vector::from(y.column(k))).norm_squared();
    }
    (sum / ((d - split) * p) as f64).sqrt()
}

/// Train the recurrent model on the leading fraction of the record; the
/// model with the best training loss across seeded starts wins. Validation
/// is the tail error of the continuous rollout anchored at the first sample.
pub fn train_rnn(
    template: &RnnModel,
    u: &Matrix,
    y: &Matrix,
    seed: u64,
    opts: &TrainOptions,
) -> Result<(RnnModel, TrainReport)> {
    let d = y.ncols();
    if u.ncols() != d || d < 2 {
        return Err(Error::InsufficientData("record too short for training".into()));
    }
    let split = (((d as f64) * opts.train_fraction).round() as usize).clamp(2, d);
    let u_train = u.columns(0, split).clone_owned();
    let y_train = y.columns(0, split).clone_owned();

    let mut best: Option<(f64, Vector, usize)> = None;
    for start in 0..opts.starts.max(1) {
        let init = RnnModel::seeded(
            template.n_inputs,
            template.n_outputs,
            &template
                .layers
                .iter()
                .take(template.layers.len() - 1)
                .map(|l| l.weight.nrows())
                .collect::<Vec<_>>(),
            template
                .layers
                .first()
                .map(|l| l.activation)
                .unwrap_or(super::Activation::Tanh),
            seed.wrapping_add(start as u64),
        );
        let theta0 = init.pack();
        let model_c = template.clone();
        let (ut, yt) = (u_train.clone(), y_train.clone());
        let cost = move |z: &Vector| rnn_loss_grad(&model_c, z, &ut, &yt).0;
        let model_g = template.clone();
        let (ut2, yt2) = (u_train.clone(), y_train.clone());
        let grad = move |z: &Vector| rnn_loss_grad(&model_g, z, &ut2, &yt2).1;
        let problem = NlpProblem::new(cost, theta0).with_gradient(grad);
        let mut nlp_opts = NlpOptions::default();
        nlp_opts.max_iters = opts.max_iters_per_start;
        nlp_opts.tol = 1e-9;
        nlp_opts.stall_tol = 1e-14;
        let sol = solve_nlp(&problem, &nlp_opts)?;
        if best.as_ref().map(|(l, _, _)| sol.cost < *l).unwrap_or(true) {
            best = Some((sol.cost, sol.z, sol.iterations));
        }
    }
    let (train_loss, theta, iterations) = best.expect("at least one start");
    let model = template.with_parameters(&theta)?;

    let anchor = Vector::from(y.column(0));
    let full_pred = model
        .rollout(&anchor, &u.columns(1, d - 1).clone_owned())
        .ok();
    Ok((
        model,
        TrainReport {
            train_loss,
            validation_rmse: validation_rmse(full_pred.as_ref(), y, split),
            output_range: y.max() - y.min(),
            iterations,
            starts: opts.starts,
        },
    ))
}

fn train_ssnn_inner(
    template: &SsnnModel,
    u: &Matrix,
    y: &Matrix,
    seed: u64,
    opts: &TrainOptions,
    ssnno: Option<&SsnnoConfig>,
) -> Result<(SsnnModel, TrainReport)> {
    let d = y.ncols();
    if u.ncols() != d || d < 2 {
        return Err(Error::InsufficientData("record too short for training".into()));
    }
    let split = (((d as f64) * opts.train_fraction).round() as usize).clamp(2, d);
    let u_train = u.columns(0, split).clone_owned();
    let y_train = y.columns(0, split).clone_owned();

    let f_hidden: Vec<usize> = template
        .state_net
        .iter()
        .take(template.state_net.len() - 1)
        .map(|l| l.weight.nrows())
        .collect();
    let h_hidden: Vec<usize> = template
        .output_net
        .iter()
        .take(template.output_net.len() - 1)
        .map(|l| l.weight.nrows())
        .collect();
    let activation = template
        .state_net
        .first()
        .map(|l| l.activation)
        .unwrap_or(super::Activation::Tanh);

    let mut best: Option<(f64, Vector, usize)> = None;
    for start in 0..opts.starts.max(1) {
        let init = SsnnModel::seeded(
            template.latent,
            template.n_inputs,
            template.n_outputs,
            &f_hidden,
            &h_hidden,
            activation,
            seed.wrapping_add(start as u64),
        );
        let theta0 = init.pack();
        let model_c = template.clone();
        let (ut, yt) = (u_train.clone(), y_train.clone());
        let cfg_c = ssnno.cloned();
        let cost = move |z: &Vector| ssnn_reverse(&model_c, z, &ut, &yt, cfg_c.as_ref()).0;
        let model_g = template.clone();
        let (ut2, yt2) = (u_train.clone(), y_train.clone());
        let cfg_g = ssnno.cloned();
        let grad = move |z: &Vector| ssnn_reverse(&model_g, z, &ut2, &yt2, cfg_g.as_ref()).1;
        let problem = NlpProblem::new(cost, theta0).with_gradient(grad);
        let mut nlp_opts = NlpOptions::default();
        nlp_opts.max_iters = opts.max_iters_per_start;
        nlp_opts.tol = 1e-9;
        nlp_opts.stall_tol = 1e-14;
        let sol = solve_nlp(&problem, &nlp_opts)?;
        if best.as_ref().map(|(l, _, _)| sol.cost < *l).unwrap_or(true) {
            best = Some((sol.cost, sol.z, sol.iterations));
        }
    }
    let (train_loss, theta, iterations) = best.expect("at least one start");
    let model = template.with_parameters(&theta)?;
    let full_pred = model.rollout(&model.x0, u).ok().map(|(_, ys)| ys);
    Ok((
        model,
        TrainReport {
            train_loss,
            validation_rmse: validation_rmse(full_pred.as_ref(), y, split),
            output_range: y.max() - y.min(),
            iterations,
            starts: opts.starts,
        },
    ))
}

/// Train the state-space model (including its initial state) on the leading
/// fraction of the record.
pub fn train_ssnn(
    template: &SsnnModel,
    u: &Matrix,
    y: &Matrix,
    seed: u64,
    opts: &TrainOptions,
) -> Result<(SsnnModel, TrainReport)> {
    train_ssnn_inner(template, u, y, seed, opts, None)
}

/// Train with the ordered-variance loss; returns the per-state variances of
/// the trained rollout along with the report.
pub fn train_ssnno(
    template: &SsnnModel,
    u: &Matrix,
    y: &Matrix,
    cfg: &SsnnoConfig,
    seed: u64,
    opts: &TrainOptions,
) -> Result<(SsnnModel, TrainReport, SsnnoParts)> {
    let (model, report) = train_ssnn_inner(template, u, y, seed, opts, Some(cfg))?;
    let split = (((y.ncols() as f64) * opts.train_fraction).round() as usize).clamp(2, y.ncols());
    let (_, parts) = ssnno_loss(
        &model,
        &u.columns(0, split).clone_owned(),
        &y.columns(0, split).clone_owned(),
        cfg,
    );
    Ok((model, report, parts))
}

#[derive(Debug, Clone)]
pub struct TruncationReport {
    /// Retained order: states with variance above the threshold.
    pub retained: usize,
    pub variances: Vector,
    /// Mean of the frozen trailing states over the training rollout.
    pub frozen_means: Vector,
    /// Reduced-order model with the frozen states folded into the biases,
    /// present when 0 < retained < latent.
    pub reduced: Option<SsnnModel>,
}

/// Partition the latent state by rollout variance at threshold `delta`;
/// freeze the low-variance tail at its mean and fold it into the first-layer
/// biases of both nets.
pub fn ssnno_truncate(
    model: &SsnnModel,
    u: &Matrix,
    delta: f64,
) -> Result<TruncationReport> {
    let (xs, _) = model.rollout(&model.x0, u)?;
    let d = xs.ncols();
    let l = model.latent;
    let mut variances = Vector::zeros(l);
    let mut means = Vector::zeros(l);
    for i in 0..l {
        let mean = xs.row(i).sum() / d as f64;
        means[i] = mean;
        let ss: f64 = xs.row(i).iter().map(|&v| (v - mean) * (v - mean)).sum();
        variances[i] = if d > 1 { ss / (d as f64 - 1.0) } else { 0.0 };
    }
    let keep: Vec<usize> = (0..l).filter(|&i| variances[i] > delta).collect();
    let drop: Vec<usize> = (0..l).filter(|&i| variances[i] <= delta).collect();
    let retained = keep.len();
    let frozen_means = Vector::from_fn(drop.len(), |i, _| means[drop[i]]);

    if retained == 0 || retained == l {
        return Ok(TruncationReport {
            retained,
            variances,
            frozen_means,
            reduced: None,
        });
    }

    // First layer of the state net reads (x, u): keep the columns of the
    // retained states, fold the frozen states into the bias. The last layer
    // writes x: keep only retained rows. Same column fold for the output net.
    let m = model.n_inputs;
    let mut state_net = model.state_net.clone();
    {
        let first = &model.state_net[0];
        let rows = first.weight.nrows();
        let mut weight = Matrix::zeros(rows, retained + m);
        let mut bias = first.bias.clone();
        for (new_c, &old_c) in keep.iter().enumerate() {
            weight.set_column(new_c, &first.weight.column(old_c));
        }
        for j in 0..m {
            weight.set_column(retained + j, &first.weight.column(l + j));
        }
        for (fi, &old_c) in drop.iter().enumerate() {
            bias += frozen_means[fi] * Vector::from(first.weight.column(old_c));
        }
        state_net[0] = Layer {
            weight,
            bias,
            activation: first.activation,
        };
    }
    {
        let last_idx = state_net.len() - 1;
        let last = &state_net[last_idx];
        let mut weight = Matrix::zeros(retained, last.weight.ncols());
        let mut bias = Vector::zeros(retained);
        for (new_r, &old_r) in keep.iter().enumerate() {
            weight.set_row(new_r, &last.weight.row(old_r));
            bias[new_r] = last.bias[old_r];
        }
        state_net[last_idx] = Layer {
            weight,
            bias,
            activation: last.activation,
        };
    }
    let mut output_net = model.output_net.clone();
    {
        let first = &model.output_net[0];
        let rows = first.weight.nrows();
        let mut weight = Matrix::zeros(rows, retained);
        let mut bias = first.bias.clone();
        for (new_c, &old_c) in keep.iter().enumerate() {
            weight.set_column(new_c, &first.weight.column(old_c));
        }
        for (fi, &old_c) in drop.iter().enumerate() {
            bias += frozen_means[fi] * Vector::from(first.weight.column(old_c));
        }
        output_net[0] = Layer {
            weight,
            bias,
            activation: first.activation,
        };
    }
    let x0 = Vector::from_fn(retained, |i, _| model.x0[keep[i]]);
    let reduced = SsnnModel {
        state_net,
        output_net,
        x0,
        latent: retained,
        n_inputs: m,
        n_outputs: model.n_outputs,
    };
    Ok(TruncationReport {
        retained,
        variances,
        frozen_means,
        reduced: Some(reduced),
    })
}

/// Steady input for a recurrent model: solve `y_r = net(y_r, u_r)` for u_r
/// in the least-squares sense, from a zero initial guess with seeded
/// fallback starts.
pub fn rnn_steady_state(model: &RnnModel, y_r: &Vector) -> Result<Vector> {
    let m = model.n_inputs;
    let target = y_r.clone();
    let model_c = model.clone();
    let residual = move |u: &Vector| -> f64 {
        match model_c.step(&target, u) {
            Ok(next) => (&next - &target).norm_squared(),
            Err(_) => GUARD_LOSS,
        }
    };
    let z = solve_root(residual, m, 1e-6)?;
    Ok(z)
}

/// Steady state and input for a state-space model: solve
/// `h(x_r) = y_r`, `f(x_r, u_r) = x_r` in the least-squares sense.
pub fn ssnn_steady_state(model: &SsnnModel, y_r: &Vector) -> Result<(Vector, Vector)> {
    let l = model.latent;
    let m = model.n_inputs;
    let target = y_r.clone();
    let model_c = model.clone();
    let residual = move |z: &Vector| -> f64 {
        let x = Vector::from(z.rows(0, l));
        let u = Vector::from(z.rows(l, m));
        let out = match model_c.output_map(&x) {
            Ok(v) => v,
            Err(_) => return GUARD_LOSS,
        };
        let next = match model_c.state_step(&x, &u) {
            Ok(v) => v,
            Err(_) => return GUARD_LOSS,
        };
        (&out - &target).norm_squared() + (&next - &x).norm_squared()
    };
    let z = solve_root(residual, l + m, 1e-6)?;
    Ok((Vector::from(z.rows(0, l)), Vector::from(z.rows(l, m))))
}

/// Minimize a nonnegative residual function from deterministic seeded
/// starts; succeeds when its square root drops below `tol`.
fn solve_root(
    residual: impl Fn(&Vector) -> f64 + Clone + 'static,
    dim: usize,
    tol: f64,
) -> Result<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(2718);
    let mut best: Option<(f64, Vector)> = None;
    for attempt in 0..8 {
        let z0 = if attempt == 0 {
            Vector::zeros(dim)
        } else {
            Vector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0))
        };
        let r = residual.clone();
        let problem = NlpProblem::new(move |z: &Vector| r(z), z0);
        let mut opts = NlpOptions::default();
        opts.max_iters = 600;
        opts.tol = 1e-12;
        opts.stall_tol = 1e-16;
        let sol = solve_nlp(&problem, &opts)?;
        if best.as_ref().map(|(c, _)| sol.cost < *c).unwrap_or(true) {
            best = Some((sol.cost, sol.z));
        }
        if best.as_ref().unwrap().0.sqrt() <= tol {
            break;
        }
    }
    let (cost, z) = best.expect("at least one attempt");
    if cost.sqrt() > tol {
        return Err(Error::NoSteadyStateFound {
            residual: cost.sqrt(),
        });
    }
    Ok(z)
}
