//! Dense feed-forward networks with hand-written backpropagation and Adam.
//!
//! Parameters live in one flat `Vec<f64>`. Each layer stores its weight
//! matrix (`out x in`, row-major) followed by its bias vector, so the
//! parameter count is `sum((dims[i] + 1) * dims[i + 1])`.
//!
//! Batched inputs are row-major `batch x dim` slices. A forward pass that
//! will be differentiated returns a [`Tape`] holding every layer's
//! activations; [`Mlp::backward`] consumes that tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    None,
    Tanh,
}

/// A multi-layer perceptron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    activation: Activation,
    output_activation: OutputActivation,
    seed: u64,
    params: Vec<f64>,
}

/// Activations cached by [`Mlp::forward_tape`].
#[derive(Debug, Clone)]
pub struct Tape {
    layer_dims: Vec<usize>,
    batch: usize,
    // acts[0] is the input, acts[l + 1] the post-activation output of layer l.
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Gradients returned by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Backward {
    /// d loss / d parameters, same layout as [`Mlp::params`].
    pub params: Vec<f64>,
    /// d loss / d input, `batch x input_dim`.
    pub input: Vec<f64>,
}

pub fn param_count(layer_dims: &[usize]) -> usize {
    layer_dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl Mlp {
    /// Builds a network with uniform fan-in scaled weights, `U(-1/sqrt(in), 1/sqrt(in))`,
    /// and zero biases.
    pub fn new(
        layer_dims: &[usize],
        activation: Activation,
        output_activation: OutputActivation,
        seed: u64,
    ) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(layer_dims));
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            output_activation,
            seed,
            params,
        })
    }

    pub fn from_params(
        layer_dims: &[usize],
        activation: Activation,
        output_activation: OutputActivation,
        params: Vec<f64>,
    ) -> Result<Self> {
        validate_dims(layer_dims)?;
        check_len("mlp parameters", param_count(layer_dims), params.len())?;
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            output_activation,
            seed: 0,
            params,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Evaluates a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward_batch(input, 1)
    }

    /// Evaluates a batch without keeping intermediate activations.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        let mut tape = self.forward_tape(inputs, batch)?;
        Ok(tape.acts.pop().unwrap_or_default())
    }

    /// Evaluates a batch and records the activations needed by [`Mlp::backward`].
    pub fn forward_tape(&self, inputs: &[f64], batch: usize) -> Result<Tape> {
        check_len("mlp input", batch * self.input_dim(), inputs.len())?;
        let n_layers = self.layer_dims.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(inputs.to_vec());
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            offset += (fan_in + 1) * fan_out;

            let x = &acts[l];
            let mut z = vec![0.0; batch * fan_out];
            for row in z.chunks_exact_mut(fan_out) {
                row.copy_from_slice(b);
            }
            // Z += X * W^T
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    fan_in,
                    fan_out,
                    1.0,
                    x.as_ptr(),
                    fan_in as isize,
                    1,
                    w.as_ptr(),
                    1,
                    fan_in as isize,
                    1.0,
                    z.as_mut_ptr(),
                    fan_out as isize,
                    1,
                );
            }
            let last = l + 1 == n_layers;
            match (last, self.activation, self.output_activation) {
                (false, Activation::Relu, _) => z.iter_mut().for_each(|v| *v = v.max(0.0)),
                (false, Activation::Tanh, _) | (true, _, OutputActivation::Tanh) => {
                    z.iter_mut().for_each(|v| *v = v.tanh())
                }
                (true, _, OutputActivation::None) => {}
            }
            acts.push(z);
        }
        Ok(Tape {
            layer_dims: self.layer_dims.clone(),
            batch,
            acts,
        })
    }

    /// Backpropagates `grad_output` (d loss / d output, `batch x output_dim`)
    /// through the activations recorded in `tape`.
    pub fn backward(&self, tape: &Tape, grad_output: &[f64]) -> Result<Backward> {
        if tape.layer_dims != self.layer_dims || tape.acts.len() != self.layer_dims.len() {
            return Err(Error::InvalidInput(
                "backward called with a tape from a different network".into(),
            ));
        }
        let batch = tape.batch;
        check_len("mlp output gradient", batch * self.output_dim(), grad_output.len())?;
        let n_layers = self.layer_dims.len() - 1;
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = grad_output.to_vec();

        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += (self.layer_dims[l] + 1) * self.layer_dims[l + 1];
        }

        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let out = &tape.acts[l + 1];
            let last = l + 1 == n_layers;
            match (last, self.activation, self.output_activation) {
                (false, Activation::Relu, _) => {
                    for (d, a) in delta.iter_mut().zip(out) {
                        if *a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                (false, Activation::Tanh, _) | (true, _, OutputActivation::Tanh) => {
                    for (d, a) in delta.iter_mut().zip(out) {
                        *d *= 1.0 - a * a;
                    }
                }
                (true, _, OutputActivation::None) => {}
            }

            let x = &tape.acts[l];
            let o = offsets[l];
            let (gw, gb) = grads[o..o + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
            // dW = delta^T * X
            unsafe {
                matrixmultiply::dgemm(
                    fan_out,
                    batch,
                    fan_in,
                    1.0,
                    delta.as_ptr(),
                    1,
                    fan_out as isize,
                    x.as_ptr(),
                    fan_in as isize,
                    1,
                    0.0,
                    gw.as_mut_ptr(),
                    fan_in as isize,
                    1,
                );
            }
            for row in delta.chunks_exact(fan_out) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            // dX = delta * W
            let w = &self.params[o..o + fan_in * fan_out];
            let mut dx = vec![0.0; batch * fan_in];
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    fan_out,
                    fan_in,
                    1.0,
                    delta.as_ptr(),
                    fan_out as isize,
                    1,
                    w.as_ptr(),
                    fan_in as isize,
                    1,
                    0.0,
                    dx.as_mut_ptr(),
                    fan_in as isize,
                    1,
                );
            }
            delta = dx;
        }
        Ok(Backward {
            params: grads,
            input: delta,
        })
    }

    /// Exponential moving average toward `source`: `p <- (1 - tau) p + tau q`.
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) -> Result<()> {
        check_len("soft update parameters", self.params.len(), source.params.len())?;
        for (p, q) in self.params.iter_mut().zip(&source.params) {
            *p = (1.0 - tau) * *p + tau * q;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Loads a checkpoint, validating the parameter count against the header.
    pub fn from_json(s: &str) -> Result<Self> {
        let net: Mlp = serde_json::from_str(s)?;
        validate_dims(&net.layer_dims)?;
        check_len("mlp parameters", param_count(&net.layer_dims), net.params.len())?;
        Ok(net)
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 || layer_dims.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "layer dims must list at least two positive sizes, got {layer_dims:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Adam moments for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
        }
    }

    pub fn for_net(net: &Mlp, config: AdamConfig) -> Self {
        Self::new(net.num_params(), config)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_len("adam parameters", self.first_moment.len(), params.len())?;
        check_len("adam gradient", params.len(), grad.len())?;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient component {i} = {}", grad[i])));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

impl Mlp {
    pub fn adam_step(&mut self, opt: &mut AdamState, grad: &[f64]) -> Result<()> {
        opt.step(&mut self.params, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let dims = net.layer_dims();
        let p = net.params();
        let mut off = 0;
        let mut cur = x.to_vec();
        for l in 0..dims.len() - 1 {
            let (n_in, n_out) = (dims[l], dims[l + 1]);
            let mut next = vec![0.0; n_out];
            for o in 0..n_out {
                let mut s = p[off + n_in * n_out + o];
                for i in 0..n_in {
                    s += p[off + o * n_in + i] * cur[i];
                }
                let last = l + 2 == dims.len();
                next[o] = if last {
                    match net.output_activation() {
                        OutputActivation::None => s,
                        OutputActivation::Tanh => s.tanh(),
                    }
                } else {
                    match net.activation() {
                        Activation::Relu => s.max(0.0),
                        Activation::Tanh => s.tanh(),
                    }
                };
            }
            off += (n_in + 1) * n_out;
            cur = next;
        }
        cur
    }

    fn fd_grad(net: &Mlp, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; net.num_params()];
        for i in 0..net.num_params() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            g[i] = (plus.forward(x).unwrap()[0] - minus.forward(x).unwrap()[0]) / (2.0 * h);
        }
        g
    }

    #[test]
    fn parameter_count_matches_layout() {
        let net = Mlp::new(&[3, 5, 4, 2], Activation::Relu, OutputActivation::None, 1).unwrap();
        assert_eq!(net.num_params(), 4 * 5 + 6 * 4 + 5 * 2);
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let net = Mlp::from_params(
            &[2, 3, 1],
            Activation::Tanh,
            OutputActivation::Tanh,
            vec![0.0; param_count(&[2, 3, 1])],
        )
        .unwrap();
        assert_eq!(net.forward(&[0.7, -3.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let params = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let net = Mlp::from_params(&[2, 2], Activation::Relu, OutputActivation::None, params).unwrap();
        assert_eq!(net.forward(&[0.25, -4.0]).unwrap(), vec![0.25, -4.0]);
    }

    #[test]
    fn forward_matches_explicit_loops() {
        for act in [Activation::Relu, Activation::Tanh] {
            let net = Mlp::new(&[2, 3, 1], act, OutputActivation::Tanh, 17).unwrap();
            let got = net.forward(&[1.0, 1.0]).unwrap();
            let want = naive_forward(&net, &[1.0, 1.0]);
            assert!((got[0] - want[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn batched_forward_matches_rows() {
        let net = Mlp::new(&[3, 8, 8, 2], Activation::Relu, OutputActivation::None, 5).unwrap();
        let xs: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let batched = net.forward_batch(&xs, 4).unwrap();
        for r in 0..4 {
            let single = naive_forward(&net, &xs[r * 3..r * 3 + 3]);
            for k in 0..2 {
                assert!((batched[r * 2 + k] - single[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_input_length_rejected() {
        let net = Mlp::new(&[3, 4, 1], Activation::Relu, OutputActivation::None, 0).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn tanh_output_is_bounded() {
        let mut net = Mlp::new(&[2, 4, 1], Activation::Tanh, OutputActivation::Tanh, 3).unwrap();
        net.params_mut().iter_mut().for_each(|p| *p *= 3.0);
        for x in [[2.0, -2.0], [0.0, 0.0], [-1.5, 0.7]] {
            let y = net.forward(&x).unwrap()[0];
            assert!(y > -1.0 && y < 1.0);
        }
    }

    proptest::proptest! {
        #[test]
        fn forward_is_finite(xs in proptest::collection::vec(-1e3f64..1e3, 3), seed in 0u64..50) {
            let net = Mlp::new(&[3, 6, 2], Activation::Relu, OutputActivation::None, seed).unwrap();
            proptest::prop_assert!(net.forward(&xs).unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let net = Mlp::new(&[2, 4, 1], Activation::Tanh, OutputActivation::None, 2).unwrap();
        let tape = net.forward_tape(&[0.3, 0.1], 1).unwrap();
        let g = net.backward(&tape, &[0.0]).unwrap();
        assert!(g.params.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (act, out) in [
            (Activation::Tanh, OutputActivation::Tanh),
            (Activation::Tanh, OutputActivation::None),
            (Activation::Relu, OutputActivation::None),
        ] {
            let net = Mlp::new(&[3, 6, 5, 1], act, out, 11).unwrap();
            assert!(net.num_params() <= 200);
            let x = [0.4, -0.2, 0.9];
            let tape = net.forward_tape(&x, 1).unwrap();
            let g = net.backward(&tape, &[1.0]).unwrap();
            let fd = fd_grad(&net, &x, 1e-5);
            let num: f64 = g.params.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum();
            let den: f64 = fd.iter().map(|b| b * b).sum();
            assert!((num / den).sqrt() < 1e-4, "{act:?} rel err {}", (num / den).sqrt());
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = Mlp::new(&[3, 7, 1], Activation::Tanh, OutputActivation::None, 4).unwrap();
        let x = [0.1, 0.5, -0.3];
        let tape = net.forward_tape(&x, 1).unwrap();
        let g = net.backward(&tape, &[1.0]).unwrap();
        for i in 0..3 {
            let mut xp = x;
            xp[i] += 1e-6;
            let mut xm = x;
            xm[i] -= 1e-6;
            let fd = (net.forward(&xp).unwrap()[0] - net.forward(&xm).unwrap()[0]) / 2e-6;
            assert!((fd - g.input[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn identical_nets_give_identical_gradients() {
        let a = Mlp::new(&[2, 4, 1], Activation::Relu, OutputActivation::Tanh, 9).unwrap();
        let b = Mlp::new(&[2, 4, 1], Activation::Relu, OutputActivation::Tanh, 9).unwrap();
        let ga = a.backward(&a.forward_tape(&[1.0, 2.0], 1).unwrap(), &[1.0]).unwrap();
        let gb = b.backward(&b.forward_tape(&[1.0, 2.0], 1).unwrap(), &[1.0]).unwrap();
        assert_eq!(ga.params, gb.params);
    }

    #[test]
    fn foreign_tape_rejected() {
        let a = Mlp::new(&[2, 4, 1], Activation::Relu, OutputActivation::Tanh, 9).unwrap();
        let b = Mlp::new(&[2, 3, 1], Activation::Relu, OutputActivation::Tanh, 9).unwrap();
        let tape = b.forward_tape(&[1.0, 2.0], 1).unwrap();
        assert!(a.backward(&tape, &[1.0]).is_err());
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut net = Mlp::new(&[2, 3, 1], Activation::Relu, OutputActivation::None, 1).unwrap();
        let before = net.params().to_vec();
        let mut opt = AdamState::for_net(&net, AdamConfig::default());
        net.adam_step(&mut opt, &vec![0.0; before.len()]).unwrap();
        assert_eq!(net.params(), &before[..]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut params = vec![1.0, -2.0, 0.5];
        let grad = [0.3, -7.0, 1e-3];
        let mut opt = AdamState::new(3, AdamConfig::with_lr(0.01));
        opt.step(&mut params, &grad).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let want = [
            1.0 - 0.01 * 0.3 / (0.3 + 1e-8),
            -2.0 + 0.01 * 7.0 / (7.0 + 1e-8),
            0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8),
        ];
        for (p, w) in params.iter().zip(want) {
            assert!((p - w).abs() < 1e-14);
        }
        // Up to eps this is a step of exactly lr against the sign of g.
        assert!((params[1] - (-2.0 + 0.01)).abs() < 1e-10);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut x = vec![3.0];
        let mut opt = AdamState::new(1, AdamConfig::with_lr(0.05));
        let mut losses = Vec::new();
        for _ in 0..200 {
            losses.push(0.5 * x[0] * x[0]);
            let g = [x[0]];
            opt.step(&mut x, &g).unwrap();
        }
        assert!(losses.windows(2).skip(1).take(40).all(|w| w[1] < w[0]));
        assert!(losses.last().unwrap() < &1e-2);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut params = vec![0.0; 2];
        let mut opt = AdamState::new(2, AdamConfig::default());
        let err = opt.step(&mut params, &[0.0, f64::NAN]).unwrap_err();
        assert!(err.to_string().contains("component 1"));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let net = Mlp::new(&[4, 8, 2], Activation::Tanh, OutputActivation::Tanh, 77).unwrap();
        let back = Mlp::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn same_seed_same_training_bits() {
        let run = || {
            let mut net = Mlp::new(&[2, 5, 1], Activation::Relu, OutputActivation::None, 3).unwrap();
            let mut opt = AdamState::for_net(&net, AdamConfig::default());
            for i in 0..20 {
                let x = [i as f64 * 0.1, 1.0];
                let tape = net.forward_tape(&x, 1).unwrap();
                let g = net.backward(&tape, &[tape.output()[0] - 1.0]).unwrap();
                net.adam_step(&mut opt, &g.params).unwrap();
            }
            net.params().to_vec()
        };
        assert_eq!(run(), run());
    }
}
