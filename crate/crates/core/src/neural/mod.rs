//! Recurrent and state-space neural network models: layered forward passes,
//! rollout predictors, parameter packing, and the reverse-mode machinery the
//! training losses in [`train`] are built on.

mod train;

pub use train::{
    rnn_loss, rnn_loss_grad, rnn_steady_state, ssnn_loss, ssnn_loss_grad, ssnn_steady_state,
    ssnno_loss, ssnno_loss_grad, ssnno_truncate, train_rnn, train_ssnn, train_ssnno, SsnnoConfig,
    SsnnoParts, TrainOptions, TrainReport, TruncationReport,
};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mpc::Predictor;
use crate::numerics::{Matrix, Vector};

/// Rollout states beyond this magnitude count as divergence.
pub(crate) const STATE_GUARD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }
}

/// One affine-plus-activation layer.
#[derive(Debug, Clone)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vector,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vector, activation: Activation) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::DimensionMismatch("layer weight rows vs bias".into()));
        }
        Ok(Layer {
            weight,
            bias,
            activation,
        })
    }

    pub fn forward(&self, v: &Vector) -> Result<Vector> {
        if v.len() != self.weight.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "layer expects input of width {}, got {}",
                self.weight.ncols(),
                v.len()
            )));
        }
        let mut out = &self.weight * v + &self.bias;
        for x in out.iter_mut() {
            *x = self.activation.apply(*x);
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Evaluate a layer stack, keeping per-layer outputs for reverse mode.
pub(crate) fn net_forward_cached(layers: &[Layer], v: &Vector) -> Option<Vec<Vector>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(v.clone());
    for layer in layers {
        let out = layer.forward(acts.last().unwrap()).ok()?;
        if !out.iter().all(|x| x.is_finite()) {
            return None;
        }
        acts.push(out);
    }
    Some(acts)
}

pub fn net_forward(layers: &[Layer], v: &Vector) -> Result<Vector> {
    let mut cur = v.clone();
    for layer in layers {
        cur = layer.forward(&cur)?;
    }
    Ok(cur)
}

/// Reverse pass through a cached forward evaluation: accumulates parameter
/// gradients into `grads` (same shapes as the layers) and returns the
/// gradient with respect to the net input.
pub(crate) fn net_backward(
    layers: &[Layer],
    acts: &[Vector],
    delta_out: &Vector,
    grads: &mut [(Matrix, Vector)],
) -> Vector {
    let mut delta = delta_out.clone();
    for (idx, layer) in layers.iter().enumerate().rev() {
        let out = &acts[idx + 1];
        let mut dz = delta.clone();
        for i in 0..dz.len() {
            dz[i] *= layer.activation.derivative_from_output(out[i]);
        }
        grads[idx].0 += &dz * acts[idx].transpose();
        grads[idx].1 += &dz;
        delta = layer.weight.transpose() * dz;
    }
    delta
}

pub(crate) fn zero_grads(layers: &[Layer]) -> Vec<(Matrix, Vector)> {
    layers
        .iter()
        .map(|l| {
            (
                Matrix::zeros(l.weight.nrows(), l.weight.ncols()),
                Vector::zeros(l.bias.len()),
            )
        })
        .collect()
}

fn pack_into(layers: &[Layer], out: &mut Vec<f64>) {
    for l in layers {
        for i in 0..l.weight.nrows() {
            for j in 0..l.weight.ncols() {
                out.push(l.weight[(i, j)]);
            }
        }
        out.extend(l.bias.iter());
    }
}

fn unpack_layers(template: &[Layer], theta: &[f64], mut at: usize) -> (Vec<Layer>, usize) {
    let mut layers = Vec::with_capacity(template.len());
    for l in template {
        let (r, c) = (l.weight.nrows(), l.weight.ncols());
        let weight = Matrix::from_fn(r, c, |i, j| theta[at + i * c + j]);
        at += r * c;
        let bias = Vector::from_fn(r, |i, _| theta[at + i]);
        at += r;
        layers.push(Layer {
            weight,
            bias,
            activation: l.activation,
        });
    }
    (layers, at)
}

fn grads_into(grads: &[(Matrix, Vector)], out: &mut Vec<f64>) {
    for (w, b) in grads {
        for i in 0..w.nrows() {
            for j in 0..w.ncols() {
                out.push(w[(i, j)]);
            }
        }
        out.extend(b.iter());
    }
}

fn seeded_layers(
    widths: &[usize],
    hidden_activation: Activation,
    rng: &mut ChaCha8Rng,
) -> Vec<Layer> {
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for w in 0..widths.len() - 1 {
        let fan_in = widths[w] as f64;
        let scale = 0.5 / fan_in.sqrt();
        let weight = Matrix::from_fn(widths[w + 1], widths[w], |_, _| {
            rng.random_range(-1.0..1.0) * scale
        });
        let bias = Vector::from_fn(widths[w + 1], |_, _| rng.random_range(-1.0..1.0) * scale);
        let activation = if w + 2 == widths.len() {
            Activation::Identity
        } else {
            hidden_activation
        };
        layers.push(Layer {
            weight,
            bias,
            activation,
        });
    }
    layers
}

/// Output-feedback recurrent model: the next output is a net of the current
/// output and input, `(p + m) -> p`, with an identity output layer.
#[derive(Debug, Clone)]
pub struct RnnModel {
    pub layers: Vec<Layer>,
    pub n_inputs: usize,
    pub n_outputs: usize,
}

impl RnnModel {
    /// Widths of the hidden layers; the full stack is
    /// `(p + m) -> hidden... -> p`.
    pub fn seeded(
        n_inputs: usize,
        n_outputs: usize,
        hidden: &[usize],
        hidden_activation: Activation,
        seed: u64,
    ) -> Self {
        let mut widths = vec![n_outputs + n_inputs];
        widths.extend_from_slice(hidden);
        widths.push(n_outputs);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RnnModel {
            layers: seeded_layers(&widths, hidden_activation, &mut rng),
            n_inputs,
            n_outputs,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn pack(&self) -> Vector {
        let mut out = Vec::with_capacity(self.param_count());
        pack_into(&self.layers, &mut out);
        Vector::from_row_slice(&out)
    }

    pub fn with_parameters(&self, theta: &Vector) -> Result<Self> {
        if theta.len() != self.param_count() {
            return Err(Error::DimensionMismatch("packed parameter length".into()));
        }
        let (layers, _) = unpack_layers(&self.layers, theta.as_slice(), 0);
        Ok(RnnModel {
            layers,
            n_inputs: self.n_inputs,
            n_outputs: self.n_outputs,
        })
    }

    /// One recurrence step: next output from (current output, input).
    pub fn step(&self, y: &Vector, u: &Vector) -> Result<Vector> {
        let mut v = Vector::zeros(y.len() + u.len());
        v.rows_mut(0, y.len()).copy_from(y);
        v.rows_mut(y.len(), u.len()).copy_from(u);
        net_forward(&self.layers, &v)
    }

    /// Roll from an anchor output over the input columns; returns the
    /// predicted outputs including the anchor as the first column
    /// (`p x (len + 1)`).
    pub fn rollout(&self, y_init: &Vector, u: &Matrix) -> Result<Matrix> {
        let steps = u.ncols();
        let mut out = Matrix::zeros(self.n_outputs, steps + 1);
        out.set_column(0, y_init);
        let mut y = y_init.clone();
        for k in 0..steps {
            y = self.step(&y, &Vector::from(u.column(k)))?;
            if y.amax() > STATE_GUARD || !y.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteState { instant: k });
            }
            out.set_column(k + 1, &y);
        }
        Ok(out)
    }
}

impl Predictor for RnnModel {
    fn state_dim(&self) -> usize {
        self.n_outputs
    }
    fn input_dim(&self) -> usize {
        self.n_inputs
    }
    fn output_dim(&self) -> usize {
        self.n_outputs
    }
    fn rollout_outputs(&self, x: &Vector, u: &Matrix) -> Option<Matrix> {
        self.rollout(x, u)
            .ok()
            .map(|m| m.columns(1, u.ncols()).clone_owned())
    }
    fn rollout_states(&self, x: &Vector, u: &Matrix) -> Option<Matrix> {
        self.rollout_outputs(x, u)
    }
    fn advance(&self, x: &Vector, u: &Vector) -> Option<Vector> {
        self.step(x, u).ok()
    }
    fn output(&self, x: &Vector) -> Option<Vector> {
        Some(x.clone())
    }
}

/// State-space neural model: a state net `(l + m) -> l`, an output net
/// `l -> p`, and a trained initial state.
#[derive(Debug, Clone)]
pub struct SsnnModel {
    pub state_net: Vec<Layer>,
    pub output_net: Vec<Layer>,
    pub x0: Vector,
    pub latent: usize,
    pub n_inputs: usize,
    pub n_outputs: usize,
}

impl SsnnModel {
    pub fn seeded(
        latent: usize,
        n_inputs: usize,
        n_outputs: usize,
        f_hidden: &[usize],
        h_hidden: &[usize],
        hidden_activation: Activation,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f_widths = vec![latent + n_inputs];
        f_widths.extend_from_slice(f_hidden);
        f_widths.push(latent);
        let state_net = seeded_layers(&f_widths, hidden_activation, &mut rng);
        let mut h_widths = vec![latent];
        h_widths.extend_from_slice(h_hidden);
        h_widths.push(n_outputs);
        let output_net = seeded_layers(&h_widths, hidden_activation, &mut rng);
        let x0 = Vector::from_fn(latent, |_, _| rng.random_range(-0.1..0.1));
        SsnnModel {
            state_net,
            output_net,
            x0,
            latent,
            n_inputs,
            n_outputs,
        }
    }

    pub fn state_param_count(&self) -> usize {
        self.state_net.iter().map(Layer::param_count).sum()
    }

    pub fn output_param_count(&self) -> usize {
        self.output_net.iter().map(Layer::param_count).sum()
    }

    /// Total parameter count including the trained initial state.
    pub fn param_count(&self) -> usize {
        self.state_param_count() + self.output_param_count() + self.latent
    }

    /// Pack as [state net, output net, x0].
    pub fn pack(&self) -> Vector {
        let mut out = Vec::with_capacity(self.param_count());
        pack_into(&self.state_net, &mut out);
        pack_into(&self.output_net, &mut out);
        out.extend(self.x0.iter());
        Vector::from_row_slice(&out)
    }

    pub fn with_parameters(&self, theta: &Vector) -> Result<Self> {
        if theta.len() != self.param_count() {
            return Err(Error::DimensionMismatch("packed parameter length".into()));
        }
        let (state_net, at) = unpack_layers(&self.state_net, theta.as_slice(), 0);
        let (output_net, at) = unpack_layers(&self.output_net, theta.as_slice(), at);
        let x0 = Vector::from_fn(self.latent, |i, _| theta[at + i]);
        Ok(SsnnModel {
            state_net,
            output_net,
            x0,
            latent: self.latent,
            n_inputs: self.n_inputs,
            n_outputs: self.n_outputs,
        })
    }

    pub fn state_step(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        let mut v = Vector::zeros(x.len() + u.len());
        v.rows_mut(0, x.len()).copy_from(x);
        v.rows_mut(x.len(), u.len()).copy_from(u);
        net_forward(&self.state_net, &v)
    }

    pub fn output_map(&self, x: &Vector) -> Result<Vector> {
        net_forward(&self.output_net, x)
    }

    /// Roll from `x0` over the input columns; returns the state sequence
    /// x_1..x_D and the output sequence yhat_1..yhat_D.
    pub fn rollout(&self, x0: &Vector, u: &Matrix) -> Result<(Matrix, Matrix)> {
        let steps = u.ncols();
        let mut xs = Matrix::zeros(self.latent, steps);
        let mut ys = Matrix::zeros(self.n_outputs, steps);
        let mut x = x0.clone();
        for k in 0..steps {
            x = self.state_step(&x, &Vector::from(u.column(k)))?;
            if x.amax() > STATE_GUARD || !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteState { instant: k });
            }
            xs.set_column(k, &x);
            ys.set_column(k, &self.output_map(&x)?);
        }
        Ok((xs, ys))
    }
}

impl Predictor for SsnnModel {
    fn state_dim(&self) -> usize {
        self.latent
    }
    fn input_dim(&self) -> usize {
        self.n_inputs
    }
    fn output_dim(&self) -> usize {
        self.n_outputs
    }
    fn rollout_outputs(&self, x: &Vector, u: &Matrix) -> Option<Matrix> {
        self.rollout(x, u).ok().map(|(_, y)| y)
    }
    fn rollout_states(&self, x: &Vector, u: &Matrix) -> Option<Matrix> {
        self.rollout(x, u).ok().map(|(xs, _)| xs)
    }
    fn advance(&self, x: &Vector, u: &Vector) -> Option<Vector> {
        self.state_step(x, u).ok()
    }
    fn output(&self, x: &Vector) -> Option<Vector> {
        self.output_map(x).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{mat, vec_from};
    use approx::assert_relative_eq;

    #[test]
    fn identity_layer_passes_through() {
        let layer = Layer::new(Matrix::identity(3, 3), Vector::zeros(3), Activation::Identity)
            .unwrap();
        let v = vec_from(&[1.0, -2.0, 0.5]);
        assert_eq!(layer.forward(&v).unwrap(), v);
    }

    #[test]
    fn tanh_layer_at_zero_is_zero() {
        let layer = Layer::new(
            mat(2, 2, &[0.5, -0.3, 0.1, 0.9]),
            Vector::zeros(2),
            Activation::Tanh,
        )
        .unwrap();
        let out = layer.forward(&Vector::zeros(2)).unwrap();
        assert_eq!(out.amax(), 0.0);
    }

    #[test]
    fn layer_matches_scalar_loop_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let b = Vector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let layer = Layer::new(w.clone(), b.clone(), Activation::Tanh).unwrap();
        let v = Vector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let out = layer.forward(&v).unwrap();
        for i in 0..4 {
            let mut z = b[i];
            for j in 0..3 {
                z += w[(i, j)] * v[j];
            }
            assert_relative_eq!(out[i], z.tanh(), epsilon = 1e-12);
        }
    }

    #[test]
    fn layer_rejects_width_mismatch() {
        let layer = Layer::new(Matrix::identity(2, 2), Vector::zeros(2), Activation::Tanh)
            .unwrap();
        assert!(layer.forward(&Vector::zeros(3)).is_err());
    }

    #[test]
    fn linear_rnn_matches_difference_equation() {
        // single identity-activation layer: yhat' = a yhat + b u
        let (a, b) = (0.7, 0.4);
        let model = RnnModel {
            layers: vec![Layer::new(
                mat(1, 2, &[a, b]),
                Vector::zeros(1),
                Activation::Identity,
            )
            .unwrap()],
            n_inputs: 1,
            n_outputs: 1,
        };
        let u = mat(1, 6, &[1.0, 0.5, -0.5, 0.0, 1.0, -1.0]);
        let roll = model.rollout(&vec_from(&[0.2]), &u).unwrap();
        let mut y = 0.2;
        for k in 0..6 {
            y = a * y + b * u[(0, k)];
            assert_relative_eq!(roll[(0, k + 1)], y, epsilon = 1e-13);
        }
    }

    #[test]
    fn zero_weight_rnn_propagates_bias() {
        let model = RnnModel {
            layers: vec![Layer::new(
                Matrix::zeros(1, 2),
                vec_from(&[0.3]),
                Activation::Identity,
            )
            .unwrap()],
            n_inputs: 1,
            n_outputs: 1,
        };
        let u = Matrix::zeros(1, 4);
        let roll = model.rollout(&vec_from(&[5.0]), &u).unwrap();
        assert_eq!(roll[(0, 0)], 5.0);
        for k in 1..5 {
            assert_eq!(roll[(0, k)], 0.3);
        }
    }

    #[test]
    fn linear_ssnn_equals_lti_rollout() {
        use crate::plants::LinearModel;
        let truth = LinearModel::new(
            mat(2, 2, &[0.6, 0.1, -0.2, 0.5]),
            mat(2, 1, &[1.0, 0.5]),
            mat(1, 2, &[1.0, -1.0]),
        )
        .unwrap();
        // encode as identity-activation nets
        let mut f_w = Matrix::zeros(2, 3);
        f_w.view_mut((0, 0), (2, 2)).copy_from(&truth.a);
        f_w.view_mut((0, 2), (2, 1)).copy_from(&truth.b);
        let model = SsnnModel {
            state_net: vec![Layer::new(f_w, Vector::zeros(2), Activation::Identity).unwrap()],
            output_net: vec![
                Layer::new(truth.c.clone(), Vector::zeros(1), Activation::Identity).unwrap(),
            ],
            x0: Vector::zeros(2),
            latent: 2,
            n_inputs: 1,
            n_outputs: 1,
        };
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = Matrix::from_fn(1, 20, |_, _| rng.random_range(-1.0..1.0));
        let (_, ys) = model.rollout(&Vector::zeros(2), &u).unwrap();
        let (truth_y, _) = truth.simulate(&Vector::zeros(2), &u).unwrap();
        assert!((ys - truth_y).amax() < 1e-12);
    }

    #[test]
    fn zero_nets_stay_at_zero() {
        let model = SsnnModel {
            state_net: vec![
                Layer::new(Matrix::zeros(2, 3), Vector::zeros(2), Activation::Identity).unwrap(),
            ],
            output_net: vec![
                Layer::new(Matrix::zeros(1, 2), Vector::zeros(1), Activation::Identity).unwrap(),
            ],
            x0: Vector::zeros(2),
            latent: 2,
            n_inputs: 1,
            n_outputs: 1,
        };
        let (xs, ys) = model.rollout(&Vector::zeros(2), &Matrix::zeros(1, 5)).unwrap();
        assert_eq!(xs.amax(), 0.0);
        assert_eq!(ys.amax(), 0.0);
    }

    #[test]
    fn pack_round_trips() {
        let model = SsnnModel::seeded(2, 1, 1, &[5], &[5], Activation::Tanh, 9);
        let theta = model.pack();
        let back = model.with_parameters(&theta).unwrap();
        assert_eq!(back.pack(), theta);
        let rnn = RnnModel::seeded(1, 1, &[5], Activation::Tanh, 9);
        let theta = rnn.pack();
        assert_eq!(rnn.with_parameters(&theta).unwrap().pack(), theta);
    }

    #[test]
    fn diverging_rollout_reports_instant() {
        let model = RnnModel {
            layers: vec![Layer::new(
                mat(1, 2, &[3.0, 0.0]),
                Vector::zeros(1),
                Activation::Identity,
            )
            .unwrap()],
            n_inputs: 1,
            n_outputs: 1,
        };
        let u = Matrix::zeros(1, 40);
        assert!(matches!(
            model.rollout(&vec_from(&[1.0]), &u),
            Err(Error::NonFiniteState { .. })
        ));
    }
}
