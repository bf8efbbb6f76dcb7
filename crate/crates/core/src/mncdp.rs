//! Autoencoder plus latent-space Wasserstein GAN with optional DP-SGD.
//!
//! An autoencoder maps encoded rows in `[0,1]^n` to a `d`-dimensional latent
//! space. A generator produces latent vectors, the decoder maps them back to
//! `[0,1]^n`, and a weight-clipped critic compares decoded fakes with real
//! rows. With differential privacy enabled, decoder and critic updates use
//! per-example clipped gradients plus Gaussian noise, and every such update
//! is recorded in a [`PrivacyLedger`].

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::accountant::{solve_sigma_phases, PrivacyLedger, PrivacyPhase, SigmaSolution, DEFAULT_DELTA};
use crate::codec::{decode, EncodedMatrix, EncodingLayout};
use crate::error::{Error, Result};
use crate::nn::{
    l2_term, Adam, Graph, LayerNorm, Linear, Mlp, MlpTrace, Optimizer, ParamSet, PlateauScheduler, SynthRng, Var,
};
use crate::schema::{Configuration, DatasetSchema};
use crate::table::RawTable;
use crate::wgan::{
    exact_gradients, sample_noise, train, Checkpoint, NoiseSpec, Objective, OptimizerKind, TrainHooks, TrainerState,
    WganGpConfig, WganTask,
};

pub const MODEL_KIND: &str = "mncdp";

/// Ledger phase names.
pub const AUTOENCODER_PHASE: &str = "autoencoder";
pub const LATENT_GAN_PHASE: &str = "latent_gan";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    /// Latent width `d`; must be below the encoded width `n`.
    pub compression_dim: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub l2_penalty: f64,
    pub iterations: usize,
    /// Per-example gradient norm bound for private decoder updates.
    pub l2_norm_clip: f64,
    pub plateau_factor: f64,
    /// Iterations without validation improvement before the rate drops.
    pub plateau_patience: usize,
    pub plateau_tolerance: f64,
    /// The validation loss is evaluated every this many iterations.
    pub validation_every: usize,
    /// Cap on the validation rows used for the loss (a fixed subset).
    pub validation_rows: usize,
    pub leaky_relu_slope: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            compression_dim: 25,
            minibatch_size: 64,
            learning_rate: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            l2_penalty: 0.0,
            iterations: 20_000,
            l2_norm_clip: 0.022,
            plateau_factor: 0.2,
            plateau_patience: 1000,
            plateau_tolerance: 1e-4,
            validation_every: 10,
            validation_rows: 4096,
            leaky_relu_slope: 0.2,
        }
    }
}

impl AutoencoderConfig {
    /// Smallest rate the plateau schedule may reach.
    pub fn lr_floor(&self) -> f64 {
        self.learning_rate / 100.0
    }

    /// Scheduler that observes the validation loss every
    /// `validation_every` iterations.
    pub fn scheduler(&self) -> PlateauScheduler {
        let patience = self.plateau_patience.div_ceil(self.validation_every.max(1)).max(1);
        PlateauScheduler::new(
            self.learning_rate,
            self.plateau_factor,
            patience,
            self.plateau_tolerance,
            self.lr_floor(),
        )
    }
}

/// Network shapes and clipping of the latent GAN. Optimizer settings live in
/// the engine configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentGanConfig {
    /// Width of the generator's Gaussian input.
    pub noise_dim: usize,
    pub generator_dims: Vec<usize>,
    pub critic_dims: Vec<usize>,
    /// Critic weights are clipped to `[-clip_value, clip_value]` after every
    /// update.
    pub clip_value: f64,
    pub l2_penalty: f64,
    /// Per-example gradient norm bound for private critic updates.
    pub l2_norm_clip: f64,
    pub leaky_relu_slope: f64,
}

impl Default for LatentGanConfig {
    fn default() -> Self {
        Self {
            noise_dim: 25,
            generator_dims: vec![128, 128],
            critic_dims: vec![128, 64],
            clip_value: 0.01,
            l2_penalty: 0.0,
            l2_norm_clip: 0.027,
            leaky_relu_slope: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpConfig {
    pub enabled: bool,
    /// Noise multiplier `σ`, overwritten when `target_epsilon` is set.
    pub noise_multiplier: f64,
    pub target_delta: f64,
    /// When set, `σ` is solved so that the whole run spends this `ε`.
    pub target_epsilon: Option<f64>,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            noise_multiplier: 1.0,
            target_delta: DEFAULT_DELTA,
            target_epsilon: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MncdpConfig {
    pub autoencoder: AutoencoderConfig,
    /// Latent GAN training loop. `lambda_gp` must stay 0: this model uses
    /// weight clipping instead of a gradient penalty.
    pub engine: WganGpConfig,
    pub gan: LatentGanConfig,
    pub dp: DpConfig,
}

impl Default for MncdpConfig {
    fn default() -> Self {
        Self::for_configuration(Configuration::Baseline)
    }
}

impl MncdpConfig {
    /// Default settings for each variable configuration.
    pub fn for_configuration(configuration: Configuration) -> Self {
        let bin = configuration == Configuration::Bin;
        Self {
            autoencoder: AutoencoderConfig {
                compression_dim: if bin { 50 } else { 25 },
                minibatch_size: if bin { 128 } else { 64 },
                ..AutoencoderConfig::default()
            },
            engine: WganGpConfig {
                lambda_gp: 0.0,
                minibatch_size: 128,
                critic_steps_per_gen_step: if bin { 5 } else { 10 },
                learning_rate: if bin { 3.9e-5 } else { 4.5e-5 },
                optimizer: OptimizerKind::Rmsprop,
                rmsprop_alpha: 0.99,
                total_iterations: 2_000_000,
                ..WganGpConfig::default()
            },
            gan: LatentGanConfig {
                noise_dim: if bin { 30 } else { 25 },
                ..LatentGanConfig::default()
            },
            dp: DpConfig::default(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        self.engine.validate()?;
        let ae = &self.autoencoder;
        if self.engine.lambda_gp != 0.0 {
            return Err(Error::Config(
                "the latent GAN uses weight clipping; engine.lambda_gp must be 0".into(),
            ));
        }
        if ae.compression_dim == 0 || ae.compression_dim >= n {
            return Err(Error::Config(format!(
                "compression_dim {} must lie in 1..{n} (the encoded width)",
                ae.compression_dim
            )));
        }
        if ae.minibatch_size < 1 || ae.validation_every < 1 {
            return Err(Error::Config(
                "autoencoder minibatch_size and validation_every must be >= 1".into(),
            ));
        }
        if !(ae.learning_rate > 0.0) || !(ae.plateau_factor > 0.0 && ae.plateau_factor < 1.0) {
            return Err(Error::Config(
                "autoencoder learning_rate must be > 0 and plateau_factor in (0, 1)".into(),
            ));
        }
        if !(self.gan.clip_value > 0.0) {
            return Err(Error::Config("clip_value must be > 0".into()));
        }
        if self.gan.noise_dim == 0 {
            return Err(Error::Config("noise_dim must be >= 1".into()));
        }
        if self.dp.enabled {
            if !(self.dp.target_delta > 0.0 && self.dp.target_delta < 1.0) {
                return Err(Error::Config("target_delta must lie in (0, 1)".into()));
            }
            if self.dp.target_epsilon.is_none() && !(self.dp.noise_multiplier > 0.0) {
                return Err(Error::Config("noise_multiplier must be > 0".into()));
            }
            if !(ae.l2_norm_clip > 0.0 && self.gan.l2_norm_clip > 0.0) {
                return Err(Error::Config("l2_norm_clip values must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Rows used to fit the autoencoder out of `n_rows`; the rest validate.
pub fn autoencoder_train_rows(n_rows: usize) -> usize {
    (2 * n_rows) / 3
}

/// The privacy phases a full run will record, with `σ` left at 1.
pub fn planned_phases(config: &MncdpConfig, n_rows: usize) -> Vec<PrivacyPhase> {
    let ae = &config.autoencoder;
    let eng = &config.engine;
    vec![
        PrivacyPhase {
            name: AUTOENCODER_PHASE.into(),
            steps: ae.iterations as u64,
            sampling_rate: (ae.minibatch_size as f64 / autoencoder_train_rows(n_rows) as f64).min(1.0),
            noise_multiplier: 1.0,
            clip_norm: ae.l2_norm_clip,
        },
        PrivacyPhase {
            name: LATENT_GAN_PHASE.into(),
            steps: (eng.total_iterations * eng.critic_steps_per_gen_step) as u64,
            sampling_rate: (eng.minibatch_size as f64 / n_rows as f64).min(1.0),
            noise_multiplier: 1.0,
            clip_norm: config.gan.l2_norm_clip,
        },
    ]
}

/// Solves the shared noise multiplier for `dp.target_epsilon` and writes it
/// into a copy of the configuration. Returns the configuration unchanged
/// when DP is off or no target is set.
pub fn calibrate_noise(config: &MncdpConfig, n_rows: usize) -> Result<(MncdpConfig, Option<SigmaSolution>)> {
    let mut out = config.clone();
    match (config.dp.enabled, config.dp.target_epsilon) {
        (true, Some(eps)) => {
            let phases = planned_phases(config, n_rows);
            let sol = solve_sigma_phases(
                eps,
                &phases,
                config.dp.target_delta,
                &crate::accountant::default_orders(),
            )?;
            out.dp.noise_multiplier = sol.sigma;
            Ok((out, Some(sol)))
        }
        _ => Ok((out, None)),
    }
}

/// Encoder `n → (n+d)/2 → d` and mirrored decoder `d → (n+d)/2 → n`. The
/// decoder's last layer produces logits; [`Autoencoder::decode`] applies
/// the sigmoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub params: ParamSet,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub layout: EncodingLayout,
}

pub fn build_autoencoder(
    config: &AutoencoderConfig,
    layout: &EncodingLayout,
    rng: &mut SynthRng,
) -> Result<Autoencoder> {
    let n = layout.total_dim;
    let d = config.compression_dim;
    if d == 0 || d >= n {
        return Err(Error::Config(format!(
            "compression_dim {d} must lie in 1..{n} (the encoded width)"
        )));
    }
    let hidden = (n + d) / 2;
    let mut params = ParamSet::new();
    let encoder = Mlp::new(&mut params, "encoder", &[n, hidden, d], config.leaky_relu_slope, rng);
    let decoder = Mlp::new(&mut params, "decoder", &[d, hidden, n], config.leaky_relu_slope, rng);
    Ok(Autoencoder {
        params,
        encoder,
        decoder,
        layout: layout.clone(),
    })
}

impl Autoencoder {
    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encode(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let xv = g.leaf(x.clone());
        let z = self.encoder.forward(&mut g, &p, xv);
        g.value(z).clone()
    }

    /// Decoded rows, strictly inside `(0,1)`. Saturated sigmoid outputs
    /// are pulled in by one rounding step from each end.
    pub fn decode(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let zv = g.leaf(z.clone());
        let logits = self.decoder.forward(&mut g, &p, zv);
        let out = g.sigmoid(logits);
        g.value(out)
            .mapv(|v| v.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
    }

    pub fn reconstruct(&self, x: &Array2<f64>) -> Array2<f64> {
        self.decode(&self.encode(x))
    }
}

/// Mean binary cross entropy of probabilities `decoded` against targets in
/// `[0,1]`. Probabilities are clamped to `[1e-12, 1 − 1e-12]`.
pub fn autoencoder_loss(decoded: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if decoded.dim() != target.dim() || target.is_empty() {
        return Err(Error::Contract(format!(
            "decoded shape {:?} and target shape {:?} must match and be non-empty",
            decoded.dim(),
            target.dim()
        )));
    }
    if target.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Contract(
            "binary cross entropy targets must lie in [0, 1]".into(),
        ));
    }
    let total: f64 = decoded
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / target.len() as f64)
}

/// Per-row sums of `softplus(l) − t·l`, the binary cross entropy of
/// `sigmoid(l)` against `t`, divided by the row width.
fn bce_rows(g: &mut Graph, logits: Var, target: &Array2<f64>) -> Var {
    let t = g.leaf(target.clone());
    let sp = g.softplus(logits);
    let tl = g.mul(t, logits);
    let e = g.sub(sp, tl);
    g.mean_cols(e)
}

/// Clips each row of `per_example` (one flattened gradient per example) to
/// L2 norm `clip`, sums the rows, adds `N(0, σ²·clip²)` to every coordinate
/// and divides by the number of rows.
pub fn dp_clip_and_noise(per_example: &Array2<f64>, clip: f64, sigma: f64, rng: &mut SynthRng) -> Array1<f64> {
    let m = per_example.nrows().max(1) as f64;
    let mut total = Array1::<f64>::zeros(per_example.ncols());
    for row in per_example.axis_iter(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        let scale = if norm > clip { clip / norm } else { 1.0 };
        total.scaled_add(scale, &row);
    }
    if sigma > 0.0 {
        for v in total.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += sigma * clip * n;
        }
    }
    total / m
}

/// [`dp_clip_and_noise`] applied to the parameters of `mlp` without forming
/// per-example gradients explicitly.
///
/// `per_row_sum` must be a sum of per-row losses computed through the traced
/// forward pass. Row `i` of the gradient with respect to layer `l`'s
/// pre-activation is that row's own gradient `δ_i`, so its weight gradient is
/// the outer product `x_i δ_iᵀ` with squared norm `‖x_i‖²·‖δ_i‖²`. Noise is
/// drawn in the order `W_0, b_0, W_1, b_1, …`, row-major, which is the
/// flattening order of the explicit form. Returns `(param index, gradient)`
/// pairs.
pub fn private_mlp_gradients(
    g: &mut Graph,
    mlp: &Mlp,
    trace: &MlpTrace,
    per_row_sum: Var,
    clip: f64,
    sigma: f64,
    rng: &mut SynthRng,
) -> Vec<(usize, Array2<f64>)> {
    let deltas_v = g.grad(per_row_sum, &trace.preacts);
    let deltas: Vec<Array2<f64>> = deltas_v.iter().map(|v| g.value(*v).clone()).collect();
    let inputs: Vec<Array2<f64>> = trace.inputs.iter().map(|v| g.value(*v).clone()).collect();
    let m = inputs[0].nrows();
    let mut sq = Array1::<f64>::zeros(m);
    for (x, d) in inputs.iter().zip(&deltas) {
        for i in 0..m {
            let xr = x.row(i);
            let dr = d.row(i);
            sq[i] += (xr.dot(&xr) + 1.0) * dr.dot(&dr);
        }
    }
    let scale = sq.mapv(|s| {
        let norm = s.sqrt();
        if norm > clip {
            clip / norm
        } else {
            1.0
        }
    });
    let mut out = Vec::with_capacity(2 * mlp.layers.len());
    for ((layer, x), d) in mlp.layers.iter().zip(&inputs).zip(&deltas) {
        let scaled = d * &scale.view().insert_axis(Axis(1));
        let mut w = x.t().dot(&scaled);
        let mut b = scaled.sum_axis(Axis(0)).insert_axis(Axis(0));
        for t in [&mut w, &mut b] {
            if sigma > 0.0 {
                for v in t.iter_mut() {
                    let n: f64 = StandardNormal.sample(rng);
                    *v += sigma * clip * n;
                }
            }
            t.mapv_inplace(|v| v / m as f64);
        }
        out.push((layer.weight, w));
        out.push((layer.bias, b));
    }
    out
}

/// A validation checkpoint of autoencoder training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub learning_rate: f64,
}

/// Fits the autoencoder on the first two thirds of a seeded permutation of
/// `data` and uses the remaining third for the validation loss that drives
/// the plateau schedule. With `ledger = Some`, decoder updates are private
/// and each one is recorded.
pub fn train_autoencoder(
    autoencoder: &mut Autoencoder,
    config: &AutoencoderConfig,
    dp: &DpConfig,
    data: &Array2<f64>,
    mut ledger: Option<&mut PrivacyLedger>,
    rng: &mut SynthRng,
) -> Result<Vec<AutoencoderRecord>> {
    if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract("autoencoder inputs must lie in [0, 1]".into()));
    }
    let n_rows = data.nrows();
    let n_train = autoencoder_train_rows(n_rows);
    if n_train < config.minibatch_size || n_train == n_rows {
        return Err(Error::Config(format!(
            "{n_rows} rows are too few for a 2/3 split with minibatch_size {}",
            config.minibatch_size
        )));
    }
    let mut order: Vec<usize> = (0..n_rows).collect();
    order.shuffle(rng);
    let train_rows: Vec<usize> = order[..n_train].to_vec();
    let val_rows: Vec<usize> = order[n_train..]
        .iter()
        .copied()
        .take(config.validation_rows.max(1))
        .collect();
    let validation = data.select(Axis(0), &val_rows);

    let mut optimizer = Optimizer::Adam(Adam::new(config.learning_rate, config.adam_beta1, config.adam_beta2));
    let mut scheduler = config.scheduler();
    let q = (config.minibatch_size as f64 / n_train as f64).min(1.0);
    let mut history = Vec::new();
    let decoder_params: Vec<usize> = autoencoder
        .decoder
        .layers
        .iter()
        .flat_map(|l| [l.weight, l.bias])
        .collect();

    for it in 0..config.iterations {
        let idx: Vec<usize> = sample_indices(rng, n_train, config.minibatch_size)
            .into_iter()
            .map(|i| train_rows[i])
            .collect();
        let batch = data.select(Axis(0), &idx);
        let mut g = Graph::new();
        let p = autoencoder.params.bind(&mut g);
        let x = g.leaf(batch.clone());
        let z = autoencoder.encoder.forward(&mut g, &p, x);
        let trace = autoencoder.decoder.forward_traced(&mut g, &p, z);
        let rows = bce_rows(&mut g, trace.output, &batch);
        let mut loss = g.mean(rows);
        if config.l2_penalty > 0.0 {
            let l2 = l2_term(&mut g, &p);
            let l2 = g.scale(l2, config.l2_penalty);
            loss = g.add(loss, l2);
        }
        let train_loss = g.scalar(loss);
        if !train_loss.is_finite() {
            return Err(Error::TrainingFault {
                iteration: it,
                message: format!("non-finite autoencoder loss ({train_loss})"),
            });
        }
        let mut grads = exact_gradients(
            &mut g,
            &Objective {
                loss,
                params: p.clone(),
            },
        );
        if let Some(ledger) = ledger.as_deref_mut() {
            let row_sum = g.sum(rows);
            let private = private_mlp_gradients(
                &mut g,
                &autoencoder.decoder,
                &trace,
                row_sum,
                config.l2_norm_clip,
                dp.noise_multiplier,
                rng,
            );
            for &i in &decoder_params {
                grads[i].fill(0.0);
            }
            if config.l2_penalty > 0.0 {
                for &i in &decoder_params {
                    grads[i] = autoencoder.params.get(i).mapv(|w| 2.0 * config.l2_penalty * w);
                }
            }
            for (i, gr) in private {
                grads[i] += &gr;
            }
            ledger.record(AUTOENCODER_PHASE, 1, q, dp.noise_multiplier, config.l2_norm_clip)?;
        }
        if grads.iter().any(|a| a.iter().any(|v| !v.is_finite())) {
            return Err(Error::TrainingFault {
                iteration: it,
                message: "non-finite autoencoder gradient".into(),
            });
        }
        optimizer.step(&mut autoencoder.params, &grads);

        if (it + 1) % config.validation_every == 0 || it + 1 == config.iterations {
            let validation_loss = autoencoder_loss(&autoencoder.reconstruct(&validation), &validation)?;
            if !validation_loss.is_finite() {
                return Err(Error::TrainingFault {
                    iteration: it,
                    message: "non-finite validation loss".into(),
                });
            }
            let lr = scheduler.observe(validation_loss);
            optimizer.set_lr(lr);
            history.push(AutoencoderRecord {
                iteration: it + 1,
                train_loss,
                validation_loss,
                learning_rate: lr,
            });
        }
    }
    Ok(history)
}

/// Fraction of categorical blocks whose argmax survives reconstruction.
pub fn reconstruction_accuracy(autoencoder: &Autoencoder, data: &Array2<f64>) -> f64 {
    let rec = autoencoder.reconstruct(data);
    let mut hits = 0usize;
    let mut total = 0usize;
    for block in autoencoder.layout.onehot_blocks() {
        let range = block.offset..block.offset + block.width;
        for (a, b) in data.axis_iter(Axis(0)).zip(rec.axis_iter(Axis(0))) {
            total += 1;
            if crate::codec::argmax(a.slice(ndarray::s![range.clone()]))
                == crate::codec::argmax(b.slice(ndarray::s![range.clone()]))
            {
                hits += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        hits as f64 / total as f64
    }
}

/// Noise → latent map: hidden layers of linear, layer norm and leaky ReLU,
/// then a linear output of width `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGenerator {
    pub params: ParamSet,
    pub noise_dim: usize,
    pub hidden: Vec<(Linear, LayerNorm)>,
    pub output: Linear,
    pub slope: f64,
}

impl LatentGenerator {
    pub fn new(config: &LatentGanConfig, latent_dim: usize, rng: &mut SynthRng) -> Self {
        let mut params = ParamSet::new();
        let mut width = config.noise_dim;
        let mut hidden = Vec::new();
        for (i, &h) in config.generator_dims.iter().enumerate() {
            let lin = Linear::new(&mut params, &format!("generator.{i}"), width, h, rng);
            let ln = LayerNorm::new(&mut params, &format!("generator.{i}.ln"), h);
            hidden.push((lin, ln));
            width = h;
        }
        let output = Linear::new(&mut params, "generator.out", width, latent_dim, rng);
        Self {
            params,
            noise_dim: config.noise_dim,
            hidden,
            output,
            slope: config.leaky_relu_slope,
        }
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec { dim: self.noise_dim }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], z: Var) -> Var {
        let mut h = z;
        for (lin, ln) in &self.hidden {
            let a = lin.forward(g, p, h);
            let a = ln.forward(g, p, a);
            h = g.leaky_relu(a, self.slope);
        }
        self.output.forward(g, p, h)
    }
}

/// Critic on decoded rows: a leaky-ReLU MLP `n → … → 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCritic {
    pub params: ParamSet,
    pub mlp: Mlp,
}

impl LatentCritic {
    pub fn new(config: &LatentGanConfig, input_dim: usize, rng: &mut SynthRng) -> Self {
        let mut params = ParamSet::new();
        let mut widths = vec![input_dim];
        widths.extend(&config.critic_dims);
        widths.push(1);
        let mlp = Mlp::new(&mut params, "critic", &widths, config.leaky_relu_slope, rng);
        Self { params, mlp }
    }

    pub fn score(&self, x: &Array2<f64>) -> Array1<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let xv = g.leaf(x.clone());
        let out = self.mlp.forward(&mut g, &p, xv);
        g.value(out).column(0).to_owned()
    }
}

/// Everything a trained MNCDP model consists of. `ledger` is `None` when
/// training was not private (`ε = ∞`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MncdpModels {
    pub autoencoder: Autoencoder,
    pub generator: LatentGenerator,
    pub critic: LatentCritic,
    pub ledger: Option<PrivacyLedger>,
    pub autoencoder_history: Vec<AutoencoderRecord>,
}

impl MncdpModels {
    /// Spent `ε`, or `None` for non-private training.
    pub fn epsilon(&self) -> Option<f64> {
        self.ledger.as_ref().map(|l| l.computed_epsilon)
    }
}

/// Builds every network and trains the autoencoder; the latent GAN is left
/// untrained.
pub fn prepare_models(data: &EncodedMatrix, config: &MncdpConfig) -> Result<MncdpModels> {
    config.validate(data.layout.total_dim)?;
    let mut rng = SynthRng::seed_from_u64(config.engine.seed ^ 0x6d6e_6364_705f_6165);
    let mut autoencoder = build_autoencoder(&config.autoencoder, &data.layout, &mut rng)?;
    let mut ledger = config.dp.enabled.then(|| PrivacyLedger::new(config.dp.target_delta));
    let history = train_autoencoder(
        &mut autoencoder,
        &config.autoencoder,
        &config.dp,
        &data.values,
        ledger.as_mut(),
        &mut rng,
    )?;
    let generator = LatentGenerator::new(&config.gan, autoencoder.latent_dim(), &mut rng);
    let critic = LatentCritic::new(&config.gan, data.layout.total_dim, &mut rng);
    Ok(MncdpModels {
        autoencoder,
        generator,
        critic,
        ledger,
        autoencoder_history: history,
    })
}

/// Decoded fakes for `m` noise rows, built on `g` with the generator
/// parameters bound as `gp` and the autoencoder as constants.
fn decoded_fakes(g: &mut Graph, models: &MncdpModels, gp: &[Var], m: usize, rng: &mut SynthRng) -> Var {
    let noise = sample_noise(models.generator.noise(), m, rng);
    let z = g.leaf(noise);
    let latent = models.generator.forward(g, gp, z);
    let ap: Vec<Var> = models
        .autoencoder
        .params
        .iter()
        .map(|(_, t)| g.leaf(t.clone()))
        .collect();
    let logits = models.autoencoder.decoder.forward(g, &ap, latent);
    g.sigmoid(logits)
}

/// Critic loss pieces kept between building the objective and turning it
/// into (possibly private) gradients.
struct PendingCritic {
    fake_part: Var,
    real_sum: Var,
    trace: MlpTrace,
    params: Vec<Var>,
}

/// The latent GAN as a [`WganTask`]. The critic minimises
/// `mean D(fake) − mean D(real)` and the generator `−mean D(fake)`; there is
/// no gradient penalty. Critic weights are clipped after every update.
pub struct MncdpTask<'a> {
    pub models: MncdpModels,
    config: &'a MncdpConfig,
    data: &'a Array2<f64>,
    pending: Option<PendingCritic>,
}

impl<'a> MncdpTask<'a> {
    pub fn new(models: MncdpModels, config: &'a MncdpConfig, data: &'a Array2<f64>) -> Self {
        Self {
            models,
            config,
            data,
            pending: None,
        }
    }

    pub fn into_models(self) -> MncdpModels {
        self.models
    }

    fn sampling_rate(&self) -> f64 {
        (self.config.engine.minibatch_size as f64 / self.data.nrows() as f64).min(1.0)
    }
}

impl WganTask for MncdpTask<'_> {
    type Models = MncdpModels;

    fn models(&self) -> &MncdpModels {
        &self.models
    }
    fn models_mut(&mut self) -> &mut MncdpModels {
        &mut self.models
    }
    fn critic_params_mut(&mut self) -> &mut ParamSet {
        &mut self.models.critic.params
    }
    fn generator_params_mut(&mut self) -> &mut ParamSet {
        &mut self.models.generator.params
    }

    fn critic_objective(&mut self, g: &mut Graph, rng: &mut SynthRng) -> Result<Objective> {
        let m = self.config.engine.minibatch_size;
        let idx = sample_indices(rng, self.data.nrows(), m).into_vec();
        let real = self.data.select(Axis(0), &idx);
        let gp: Vec<Var> = self
            .models
            .generator
            .params
            .iter()
            .map(|(_, t)| g.leaf(t.clone()))
            .collect();
        let fake = decoded_fakes(g, &self.models, &gp, m, rng);
        let cp = self.models.critic.params.bind(g);
        let d_fake = self.models.critic.mlp.forward(g, &cp, fake);
        let mut fake_part = g.mean(d_fake);
        if self.config.gan.l2_penalty > 0.0 {
            let l2 = l2_term(g, &cp);
            let l2 = g.scale(l2, self.config.gan.l2_penalty);
            fake_part = g.add(fake_part, l2);
        }
        let rv = g.leaf(real);
        let trace = self.models.critic.mlp.forward_traced(g, &cp, rv);
        // Sum over rows of the per-row loss −D(x_i).
        let total = g.sum(trace.output);
        let real_sum = g.neg(total);
        let real_mean = g.scale(real_sum, 1.0 / m as f64);
        let loss = g.add(fake_part, real_mean);
        self.pending = Some(PendingCritic {
            fake_part,
            real_sum,
            trace,
            params: cp.clone(),
        });
        Ok(Objective { loss, params: cp })
    }

    fn critic_gradients(&mut self, g: &mut Graph, obj: &Objective, rng: &mut SynthRng) -> Result<Vec<Array2<f64>>> {
        let pending = self.pending.take();
        let (true, Some(pending)) = (self.config.dp.enabled, pending) else {
            return Ok(exact_gradients(g, obj));
        };
        let mut grads = exact_gradients(
            g,
            &Objective {
                loss: pending.fake_part,
                params: pending.params,
            },
        );
        let clip = self.config.gan.l2_norm_clip;
        let sigma = self.config.dp.noise_multiplier;
        let private = private_mlp_gradients(
            g,
            &self.models.critic.mlp,
            &pending.trace,
            pending.real_sum,
            clip,
            sigma,
            rng,
        );
        for (i, gr) in private {
            grads[i] += &gr;
        }
        let q = self.sampling_rate();
        if let Some(ledger) = self.models.ledger.as_mut() {
            ledger.record(LATENT_GAN_PHASE, 1, q, sigma, clip)?;
        }
        Ok(grads)
    }

    fn after_critic_update(&mut self) {
        self.models.critic.params.clamp(self.config.gan.clip_value);
    }

    fn generator_objective(&mut self, g: &mut Graph, rng: &mut SynthRng) -> Result<Objective> {
        let m = self.config.engine.minibatch_size;
        let gp = self.models.generator.params.bind(g);
        let fake = decoded_fakes(g, &self.models, &gp, m, rng);
        let cp: Vec<Var> = self
            .models
            .critic
            .params
            .iter()
            .map(|(_, t)| g.leaf(t.clone()))
            .collect();
        let d_fake = self.models.critic.mlp.forward(g, &cp, fake);
        let mean = g.mean(d_fake);
        let mut loss = g.neg(mean);
        if self.config.gan.l2_penalty > 0.0 {
            let l2 = l2_term(g, &gp);
            let l2 = g.scale(l2, self.config.gan.l2_penalty);
            loss = g.add(loss, l2);
        }
        Ok(Objective { loss, params: gp })
    }
}

/// Trains from scratch (`resume = None`: autoencoder, then latent GAN) or
/// continues the latent GAN of a checkpoint. A `dp.target_epsilon` is
/// turned into a noise multiplier first (see [`calibrate_noise`]); the
/// resolved configuration is what checkpoints record.
pub fn train_mncdp(
    data: &EncodedMatrix,
    config: &MncdpConfig,
    resume: Option<Checkpoint<MncdpModels>>,
    hooks: &mut dyn TrainHooks<MncdpModels>,
) -> Result<(MncdpModels, TrainerState)> {
    let (config, _) = calibrate_noise(config, data.n_rows())?;
    config.validate(data.layout.total_dim)?;
    if data.n_rows() < config.engine.minibatch_size {
        return Err(Error::Config(format!(
            "minibatch_size {} exceeds the {} training rows",
            config.engine.minibatch_size,
            data.n_rows()
        )));
    }
    let (models, mut state) = match resume {
        Some(ckpt) => (ckpt.models, ckpt.state),
        None => (prepare_models(data, &config)?, TrainerState::new(&config.engine)),
    };
    if models.autoencoder.layout != data.layout {
        return Err(Error::Config("checkpoint layout does not match the data".into()));
    }
    let mut task = MncdpTask::new(models, &config, &data.values);
    let run_config = serde_json::to_value(&config)?;
    train(MODEL_KIND, &config.engine, &run_config, &mut task, &mut state, hooks)?;
    Ok((task.into_models(), state))
}

const SYNTH_CHUNK: usize = 8192;

/// Decoded generator output for `count` rows, in `(0,1)^n`.
pub fn generate_encoded_mncdp(models: &MncdpModels, count: usize, rng: &mut SynthRng) -> Array2<f64> {
    let n = models.autoencoder.layout.total_dim;
    let mut out = Array2::zeros((count, n));
    let mut start = 0;
    while start < count {
        let m = SYNTH_CHUNK.min(count - start);
        let mut g = Graph::new();
        let gp = models.generator.params.bind(&mut g);
        let fake = decoded_fakes(&mut g, models, &gp, m, rng);
        out.slice_mut(ndarray::s![start..start + m, ..]).assign(g.value(fake));
        start += m;
    }
    out
}

/// Noise → latent → decoded rows → schema values. Post-processing costs no
/// privacy, so the ledger is not touched.
pub fn synthesize_mncdp(
    models: &MncdpModels,
    schema: &DatasetSchema,
    count: usize,
    rng: &mut SynthRng,
) -> Result<RawTable> {
    let values = generate_encoded_mncdp(models, count, rng);
    decode(
        &EncodedMatrix {
            values,
            layout: models.autoencoder.layout.clone(),
        },
        schema,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode, BlockKind};
    use crate::toy::{toy_schema, toy_table};
    use crate::wgan::CollectCheckpoints;
    use ndarray::array;
    use proptest::prelude::*;

    fn rng(seed: u64) -> SynthRng {
        SynthRng::seed_from_u64(seed)
    }

    fn toy_config(ae_iterations: usize, gan_iterations: usize) -> MncdpConfig {
        let mut c = MncdpConfig::default();
        c.autoencoder.compression_dim = 4;
        c.autoencoder.iterations = ae_iterations;
        c.autoencoder.validation_rows = 512;
        c.gan.noise_dim = 4;
        c.gan.generator_dims = vec![16];
        c.gan.critic_dims = vec![16];
        c.engine.minibatch_size = 32;
        c.engine.total_iterations = gan_iterations;
        c.engine.checkpoint_every = 5;
        c.engine.critic_steps_per_gen_step = 2;
        c
    }

    #[test]
    fn autoencoder_shapes_and_range() {
        let layout = EncodingLayout::from_blocks(&[("a", BlockKind::OneHot, 6), ("x", BlockKind::MinMax, 1)]);
        let cfg = AutoencoderConfig {
            compression_dim: 3,
            ..Default::default()
        };
        let ae = build_autoencoder(&cfg, &layout, &mut rng(1)).unwrap();
        assert_eq!(ae.encoder.input_dim(), 7);
        assert_eq!(ae.latent_dim(), 3);
        assert_eq!(ae.encoder.layers[0].fan_out, 5);
        let x = Array2::from_elem((4, 7), 0.5);
        let z = ae.encode(&x);
        assert_eq!(z.dim(), (4, 3));
        let big = z.mapv(|v| v * 1e3);
        let y = ae.decode(&big);
        assert_eq!(y.dim(), (4, 7));
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
        let bad = AutoencoderConfig {
            compression_dim: 7,
            ..Default::default()
        };
        assert!(matches!(
            build_autoencoder(&bad, &layout, &mut rng(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn compression_dims_per_configuration() {
        assert_eq!(
            MncdpConfig::for_configuration(Configuration::Baseline)
                .autoencoder
                .compression_dim,
            25
        );
        assert_eq!(
            MncdpConfig::for_configuration(Configuration::AllCat)
                .autoencoder
                .compression_dim,
            25
        );
        let bin = MncdpConfig::for_configuration(Configuration::Bin);
        assert_eq!(bin.autoencoder.compression_dim, 50);
        assert_eq!(bin.gan.noise_dim, 30);
        assert_eq!(bin.engine.critic_steps_per_gen_step, 5);
    }

    #[test]
    fn bce_examples() {
        let half = Array2::from_elem((3, 2), 0.5);
        assert!((autoencoder_loss(&half, &half).unwrap() - 2f64.ln()).abs() < 1e-15);
        let p = array![[0.9, 0.2], [0.3, 0.6]];
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        let hand = -((0.9f64).ln() + (0.8f64).ln() + (0.7f64).ln() + (0.6f64).ln()) / 4.0;
        assert!((autoencoder_loss(&p, &t).unwrap() - hand).abs() < 1e-10);
        let near = array![[1.0 - 1e-9, 1e-9]];
        assert!(autoencoder_loss(&near, &array![[1.0, 0.0]]).unwrap() < 1e-8);
        assert!(matches!(
            autoencoder_loss(&p, &array![[1.5, 0.0], [0.0, 1.0]]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn graph_bce_matches_probability_form() {
        let logits = array![[0.3, -1.2, 2.0], [-0.1, 0.7, -3.0]];
        let t = array![[1.0, 0.0, 1.0], [0.0, 1.0, 0.25]];
        let mut g = Graph::new();
        let l = g.leaf(logits.clone());
        let rows = bce_rows(&mut g, l, &t);
        let mean = g.mean(rows);
        let p = logits.mapv(crate::nn::graph::sigmoid);
        assert!((g.scalar(mean) - autoencoder_loss(&p, &t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn clip_scales_to_bound() {
        let grads = array![[2.0, 0.0]];
        let out = dp_clip_and_noise(&grads, 0.022, 0.0, &mut rng(0));
        assert!((out.dot(&out).sqrt() - 0.022).abs() < 1e-15);
    }

    #[test]
    fn small_gradients_average_exactly() {
        let grads = array![[0.001, -0.002], [0.003, 0.0], [-0.001, 0.004]];
        let out = dp_clip_and_noise(&grads, 0.022, 0.0, &mut rng(0));
        let mean = grads.mean_axis(Axis(0)).unwrap();
        for (a, b) in out.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-18);
        }
    }

    #[test]
    fn noise_variance_matches_sigma() {
        let m = 8;
        let grads = Array2::<f64>::zeros((m, 3));
        let (c, sigma) = (0.5, 4.0);
        let mut r = rng(5);
        let draws: Vec<f64> = (0..20_000)
            .map(|_| dp_clip_and_noise(&grads, c, sigma, &mut r)[1])
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        let expected = sigma * sigma * c * c / (m * m) as f64;
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    }

    /// Per-example gradients of `−D(x_i)` through an explicit loop.
    fn explicit_per_example(mlp: &Mlp, params: &ParamSet, x: &Array2<f64>) -> Array2<f64> {
        let order: Vec<usize> = mlp.layers.iter().flat_map(|l| [l.weight, l.bias]).collect();
        let width: usize = order.iter().map(|&i| params.get(i).len()).sum();
        let mut out = Array2::zeros((x.nrows(), width));
        for (r, row) in x.axis_iter(Axis(0)).enumerate() {
            let mut g = Graph::new();
            let p = params.bind(&mut g);
            let xv = g.leaf(row.to_owned().insert_axis(Axis(0)));
            let d = mlp.forward(&mut g, &p, xv);
            let loss = g.neg(d);
            let sel: Vec<Var> = order.iter().map(|&i| p[i]).collect();
            let grads = g.grad(loss, &sel);
            let flat: Vec<f64> = grads
                .iter()
                .flat_map(|v| g.value(*v).iter().copied().collect::<Vec<_>>())
                .collect();
            out.row_mut(r).assign(&Array1::from(flat));
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn fast_private_gradients_match_explicit_loop(seed in 0u64..1000, clip in 0.01f64..2.0, sigma in 0.0f64..3.0) {
            let mut r = rng(seed);
            let mut params = ParamSet::new();
            let mlp = Mlp::new(&mut params, "c", &[5, 4, 3, 1], 0.2, &mut r);
            let x = Array2::from_shape_fn((6, 5), |(i, j)| ((i * 5 + j) as f64 * 0.37 + seed as f64).sin());
            let explicit = dp_clip_and_noise(&explicit_per_example(&mlp, &params, &x), clip, sigma, &mut rng(seed + 1));

            let mut g = Graph::new();
            let p = params.bind(&mut g);
            let xv = g.leaf(x.clone());
            let trace = mlp.forward_traced(&mut g, &p, xv);
            let s = g.sum(trace.output);
            let s = g.neg(s);
            let fast = private_mlp_gradients(&mut g, &mlp, &trace, s, clip, sigma, &mut rng(seed + 1));
            let flat: Vec<f64> = fast.iter().flat_map(|(_, a)| a.iter().copied().collect::<Vec<_>>()).collect();
            prop_assert_eq!(flat.len(), explicit.len());
            for (a, b) in flat.iter().zip(explicit.iter()) {
                prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
            }
        }

        #[test]
        fn clipped_contributions_respect_bound(seed in 0u64..1000, clip in 0.01f64..1.0) {
            let grads = Array2::from_shape_fn((1, 6), |(_, j)| ((j as f64 + 1.0) * seed as f64).cos() * 10.0);
            let out = dp_clip_and_noise(&grads, clip, 0.0, &mut rng(0));
            prop_assert!(out.dot(&out).sqrt() <= clip * (1.0 + 1e-12));
        }
    }

    #[test]
    fn critic_loss_is_zero_sum_without_penalty() {
        let schema = toy_schema();
        let data = encode(&toy_table(300, &mut rng(1)), &schema).unwrap();
        let config = toy_config(30, 0);
        let models = prepare_models(&data, &config).unwrap();
        let mut task = MncdpTask::new(models.clone(), &config, &data.values);
        let mut r = rng(9);
        let mut g = Graph::new();
        let obj = task.critic_objective(&mut g, &mut r).unwrap();

        let mut r2 = rng(9);
        let idx = sample_indices(&mut r2, data.n_rows(), 32).into_vec();
        let real = data.values.select(Axis(0), &idx);
        let mut g2 = Graph::new();
        let gp = models.generator.params.bind(&mut g2);
        let fake = decoded_fakes(&mut g2, &models, &gp, 32, &mut r2);
        let fake = g2.value(fake).clone();
        let expected = models.critic.score(&fake).mean().unwrap() - models.critic.score(&real).mean().unwrap();
        assert!((g.scalar(obj.loss) - expected).abs() < 1e-14);
    }

    #[test]
    fn clipping_and_ledger_in_short_private_run() {
        let schema = toy_schema();
        let data = encode(&toy_table(300, &mut rng(2)), &schema).unwrap();
        let mut config = toy_config(20, 10);
        config.dp.enabled = true;
        config.dp.noise_multiplier = 1.5;
        let mut hooks = CollectCheckpoints(Vec::new());
        let (models, state) = train_mncdp(&data, &config, None, &mut hooks).unwrap();
        assert!(models.critic.params.max_abs() <= 0.01 + 1e-12);
        let ledger = models.ledger.as_ref().unwrap();
        assert_eq!(ledger.phases.len(), 2);
        assert_eq!(ledger.phases[0].steps, 20);
        assert_eq!(ledger.phases[1].steps, 20);
        assert_eq!(state.critic_updates, 20);
        let eps = ledger.computed_epsilon;
        assert!(eps > 0.0 && eps.is_finite());
        let direct =
            crate::accountant::compose_and_convert(&ledger.phases, ledger.target_delta, &ledger.orders).unwrap();
        assert_eq!(eps, direct);
        let json = serde_json::to_string(&hooks.0.last().unwrap()).unwrap();
        let back: Checkpoint<MncdpModels> = serde_json::from_str(&json).unwrap();
        assert_eq!(back.models, models);
    }

    #[test]
    fn non_private_run_has_no_ledger_and_resumes_exactly() {
        let schema = toy_schema();
        let data = encode(&toy_table(300, &mut rng(3)), &schema).unwrap();
        let config = toy_config(20, 10);
        let mut all = CollectCheckpoints(Vec::new());
        let (full, _) = train_mncdp(&data, &config, None, &mut all).unwrap();
        assert!(full.ledger.is_none());
        let mid = all.0.iter().find(|c| c.iteration == 5).unwrap().clone();
        let mid: Checkpoint<MncdpModels> = serde_json::from_str(&serde_json::to_string(&mid).unwrap()).unwrap();
        let (resumed, _) = train_mncdp(&data, &config, Some(mid), &mut CollectCheckpoints(Vec::new())).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn target_epsilon_sets_sigma() {
        let mut config = toy_config(100, 50);
        config.dp.enabled = true;
        config.dp.target_epsilon = Some(5.0);
        let (resolved, sol) = calibrate_noise(&config, 3000).unwrap();
        let sol = sol.unwrap();
        assert_eq!(resolved.dp.noise_multiplier, sol.sigma);
        assert!((sol.epsilon - 5.0).abs() / 5.0 < 1e-3);
        let (_, none) = calibrate_noise(&toy_config(100, 50), 3000).unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn synthesis_contract() {
        let schema = toy_schema();
        let data = encode(&toy_table(300, &mut rng(4)), &schema).unwrap();
        let models = prepare_models(&data, &toy_config(20, 0)).unwrap();
        let a = synthesize_mncdp(&models, &schema, 1000, &mut rng(7)).unwrap();
        let b = synthesize_mncdp(&models, &schema, 1000, &mut rng(7)).unwrap();
        assert_eq!(a.n_rows(), 1000);
        assert_eq!(a, b);
    }

    #[test]
    fn autoencoder_scheduler_floor() {
        let cfg = AutoencoderConfig::default();
        let mut s = cfg.scheduler();
        s.observe(1.0);
        let mut seen = vec![s.lr()];
        for _ in 0..2000 {
            let lr = s.observe(1.0);
            if lr != *seen.last().unwrap() {
                seen.push(lr);
            }
        }
        assert!((seen[1] - 0.002).abs() < 1e-15);
        assert!(seen.iter().all(|&lr| lr >= 1e-4));
        assert_eq!(*seen.last().unwrap(), 1e-4);
    }
}
