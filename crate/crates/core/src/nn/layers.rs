//! Building blocks for the generator, critic and autoencoder networks.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::ParamSet;

/// Train/eval switch for batch normalization and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully connected layer `x·W + b` with `W` stored as `in×out`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = params.add_uniform(format!("{name}.weight"), (fan_in, fan_out), fan_in, rng);
        let bias = params.add_uniform(format!("{name}.bias"), (1, fan_out), fan_in, rng);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let h = g.matmul(x, p[self.weight]);
        g.add(h, p[self.bias])
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// Batch normalization over the rows of a minibatch.
///
/// Running statistics follow `running = decay·running + (1 − decay)·batch`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub decay: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(params: &mut ParamSet, name: &str, width: usize, decay: f64) -> Self {
        let gamma = params.add(format!("{name}.gamma"), Array2::ones((1, width)));
        let beta = params.add(format!("{name}.beta"), Array2::zeros((1, width)));
        Self {
            gamma,
            beta,
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            decay,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, g: &mut Graph, p: &[Var], x: Var, mode: Mode) -> Var {
        let normalized = match mode {
            Mode::Train => {
                let mean = g.mean_rows(x);
                let centered = g.sub(x, mean);
                let sq = g.square(centered);
                let var = g.mean_rows(sq);
                let var_eps = g.offset(var, self.eps);
                let std = g.sqrt(var_eps);
                let out = g.div(centered, std);

                let batch_mean = g.value(mean).row(0).to_owned();
                let batch_var = g.value(var).row(0).to_owned();
                self.running_mean = &self.running_mean * self.decay + &batch_mean * (1.0 - self.decay);
                self.running_var = &self.running_var * self.decay + &batch_var * (1.0 - self.decay);
                out
            }
            Mode::Eval => {
                let mean = g.leaf(self.running_mean.clone().insert_axis(Axis(0)));
                let std = g.leaf(self.running_var.mapv(|v| (v + self.eps).sqrt()).insert_axis(Axis(0)));
                let centered = g.sub(x, mean);
                g.div(centered, std)
            }
        };
        let scaled = g.mul(normalized, p[self.gamma]);
        g.add(scaled, p[self.beta])
    }
}

/// Layer normalization over the columns of each row.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, width: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), Array2::ones((1, width)));
        let beta = params.add(format!("{name}.beta"), Array2::zeros((1, width)));
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let mean = g.mean_cols(x);
        let centered = g.sub(x, mean);
        let sq = g.square(centered);
        let var = g.mean_cols(sq);
        let var_eps = g.offset(var, self.eps);
        let std = g.sqrt(var_eps);
        let normalized = g.div(centered, std);
        let scaled = g.mul(normalized, p[self.gamma]);
        g.add(scaled, p[self.beta])
    }
}

/// Inverted dropout: active in training mode only.
pub fn dropout<R: Rng + ?Sized>(g: &mut Graph, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Var {
    if mode == Mode::Eval || rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let shape = g.shape(x);
    let mask = Array2::from_shape_fn(shape, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
    let m = g.leaf(mask);
    g.mul(x, m)
}

/// Gumbel-softmax relaxation of a categorical draw from `logits`.
pub fn gumbel_softmax<R: Rng + ?Sized>(g: &mut Graph, logits: Var, temperature: f64, rng: &mut R) -> Var {
    let shape = g.shape(logits);
    let gumbel = Gumbel::new(0.0, 1.0).expect("standard gumbel");
    let noise = Array2::from_shape_fn(shape, |_| gumbel.sample(rng));
    let n = g.leaf(noise);
    let perturbed = g.add(logits, n);
    let scaled = g.scale(perturbed, 1.0 / temperature);
    g.softmax(scaled)
}

/// Plain multilayer perceptron with leaky-ReLU hidden activations and a
/// linear output layer.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub slope: f64,
}

/// Intermediate nodes of an [`Mlp`] forward pass.
///
/// `inputs[l]` feeds layer `l`, and `preacts[l]` is that layer's affine
/// output. Because rows never interact, the gradient of a sum of per-row
/// losses with respect to `preacts[l]` holds every per-row gradient at once.
pub struct MlpTrace {
    pub output: Var,
    pub inputs: Vec<Var>,
    pub preacts: Vec<Var>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, widths: &[usize], slope: f64, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, slope }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        self.forward_traced(g, p, x).output
    }

    pub fn forward_traced(&self, g: &mut Graph, p: &[Var], x: Var) -> MlpTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(h);
            let z = layer.forward(g, p, h);
            preacts.push(z);
            h = if i + 1 < self.layers.len() {
                g.leaky_relu(z, self.slope)
            } else {
                z
            };
        }
        MlpTrace {
            output: h,
            inputs,
            preacts,
        }
    }
}
