//! Wasserstein GAN training with a gradient penalty.
//!
//! The engine is model-agnostic: a [`WganTask`] builds the critic and
//! generator objectives on a fresh [`Graph`] each step, and [`train`]
//! alternates optimizer updates, records losses, and emits checkpoints.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, Graph, Mode, Optimizer, ParamSet, RmsProp, SynthRng, Var};

/// Shared state passed to forward passes.
pub struct Ctx<'a> {
    pub mode: Mode,
    pub rng: &'a mut SynthRng,
}

impl<'a> Ctx<'a> {
    pub fn new(mode: Mode, rng: &'a mut SynthRng) -> Self {
        Self { mode, rng }
    }
}

/// A parameterized map whose parameters and inputs can be differentiated,
/// including through gradients (the graph supports higher-order terms).
pub trait Differentiable {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn forward(&mut self, g: &mut Graph, p: &[Var], x: Var, ctx: &mut Ctx<'_>) -> Var;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Rmsprop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WganGpConfig {
    pub lambda_gp: f64,
    pub minibatch_size: usize,
    pub critic_steps_per_gen_step: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub rmsprop_alpha: f64,
    pub total_iterations: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for WganGpConfig {
    fn default() -> Self {
        Self {
            lambda_gp: 10.0,
            minibatch_size: 256,
            critic_steps_per_gen_step: 1,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            rmsprop_alpha: 0.99,
            total_iterations: 300_000,
            checkpoint_every: 1_000,
            seed: 0,
        }
    }
}

impl WganGpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gp >= 0.0) {
            return Err(Error::Config("lambda_gp must be >= 0".into()));
        }
        if self.minibatch_size < 2 {
            return Err(Error::Config("minibatch_size must be >= 2".into()));
        }
        if self.critic_steps_per_gen_step < 1 {
            return Err(Error::Config("critic_steps_per_gen_step must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn make_optimizer(&self) -> Optimizer {
        match self.optimizer {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(self.learning_rate, self.adam_beta1, self.adam_beta2)),
            OptimizerKind::Rmsprop => Optimizer::RmsProp(RmsProp::new(self.learning_rate, self.rmsprop_alpha)),
        }
    }
}

/// Independent standard normal noise of dimension `dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub dim: usize,
}

pub fn sample_noise(spec: NoiseSpec, m: usize, rng: &mut SynthRng) -> Array2<f64> {
    Array2::from_shape_fn((m, spec.dim), |_| StandardNormal.sample(rng))
}

/// `u_i·real_i + (1 − u_i)·fake_i` with a fresh `u_i ~ U(0,1)` per row.
pub fn interpolate(real: &Array2<f64>, fake: &Array2<f64>, rng: &mut SynthRng) -> Result<Array2<f64>> {
    let u: Vec<f64> = (0..real.nrows()).map(|_| rng.random::<f64>()).collect();
    interpolate_with(real, fake, &u)
}

/// [`interpolate`] with explicit mixing weights.
pub fn interpolate_with(real: &Array2<f64>, fake: &Array2<f64>, u: &[f64]) -> Result<Array2<f64>> {
    if real.dim() != fake.dim() {
        return Err(Error::Contract(format!(
            "interpolation shape mismatch: {:?} vs {:?}",
            real.dim(),
            fake.dim()
        )));
    }
    if u.len() != real.nrows() {
        return Err(Error::Contract("one mixing weight per row required".into()));
    }
    let mut out = fake.clone();
    for ((mut o, r), &w) in out.axis_iter_mut(Axis(0)).zip(real.axis_iter(Axis(0))).zip(u) {
        o.zip_mut_with(&r, |f, &x| *f = w * x + (1.0 - w) * *f);
    }
    Ok(out)
}

/// Scalar nodes of a critic loss.
#[derive(Clone, Copy, Debug)]
pub struct CriticLoss {
    pub total: Var,
    /// `mean D(fake) − mean D(real)`.
    pub wasserstein: Var,
    /// `λ · mean (‖∇D(x̂)‖ − 1)²`.
    pub penalty: Var,
}

/// `λ · mean_i (‖∇_{x̂_i} Σ_j D(x̂_j)‖₂ − 1)²`, differentiable in the critic
/// parameters. `xhat` must be a leaf so the input gradient can be taken.
pub fn gradient_penalty(
    g: &mut Graph,
    critic: &mut dyn Differentiable,
    p: &[Var],
    xhat: Var,
    lambda: f64,
    ctx: &mut Ctx<'_>,
) -> Var {
    let scores = critic.forward(g, p, xhat, ctx);
    let total = g.sum(scores);
    let grad = g.grad(total, &[xhat])[0];
    let sq = g.square(grad);
    let row_sq = g.sum_cols(sq);
    let norms = g.sqrt(row_sq);
    let dev = g.offset(norms, -1.0);
    let dev_sq = g.square(dev);
    let mean = g.mean(dev_sq);
    g.scale(mean, lambda)
}

/// The critic loss `mean[−D(x) + D(G(z))] + λ·mean(‖∇D(x̂)‖ − 1)²`.
///
/// `real` and `fake` are batches of equal shape; `fake` should already be
/// detached from the generator.
pub fn critic_loss(
    g: &mut Graph,
    critic: &mut dyn Differentiable,
    p: &[Var],
    real: Var,
    fake: Var,
    lambda: f64,
    ctx: &mut Ctx<'_>,
) -> Result<CriticLoss> {
    let xhat_values = interpolate(g.value(real), g.value(fake), ctx.rng)?;
    let d_real = critic.forward(g, p, real, ctx);
    let d_fake = critic.forward(g, p, fake, ctx);
    let mr = g.mean(d_real);
    let mf = g.mean(d_fake);
    let wasserstein = g.sub(mf, mr);
    let penalty = if lambda > 0.0 {
        let xhat = g.leaf(xhat_values);
        gradient_penalty(g, critic, p, xhat, lambda, ctx)
    } else {
        g.scalar_leaf(0.0)
    };
    let total = g.add(wasserstein, penalty);
    Ok(CriticLoss {
        total,
        wasserstein,
        penalty,
    })
}

/// `mean −D(G(z))` for an already generated (non-detached) fake batch.
pub fn generator_loss(g: &mut Graph, critic: &mut dyn Differentiable, p: &[Var], fake: Var, ctx: &mut Ctx<'_>) -> Var {
    let d = critic.forward(g, p, fake, ctx);
    let m = g.mean(d);
    g.neg(m)
}

/// One objective to minimize: a scalar loss and the parameter leaves it is
/// minimized over (in the order of the owning [`ParamSet`]).
pub struct Objective {
    pub loss: Var,
    pub params: Vec<Var>,
}

/// A model pair trained adversarially by [`train`].
pub trait WganTask {
    type Models: Clone + Serialize + DeserializeOwned;

    fn models(&self) -> &Self::Models;
    fn models_mut(&mut self) -> &mut Self::Models;
    fn critic_params_mut(&mut self) -> &mut ParamSet;
    fn generator_params_mut(&mut self) -> &mut ParamSet;
    fn critic_objective(&mut self, g: &mut Graph, rng: &mut SynthRng) -> Result<Objective>;
    fn generator_objective(&mut self, g: &mut Graph, rng: &mut SynthRng) -> Result<Objective>;
    /// Turns a critic objective into parameter gradients. The default is the
    /// exact gradient of `obj.loss`; private training overrides it to clip
    /// and noise per-example contributions.
    fn critic_gradients(&mut self, g: &mut Graph, obj: &Objective, _rng: &mut SynthRng) -> Result<Vec<Array2<f64>>> {
        Ok(exact_gradients(g, obj))
    }
    /// Called after every critic parameter update.
    fn after_critic_update(&mut self) {}
}

/// Gradient of `obj.loss` with respect to each of `obj.params`.
pub fn exact_gradients(g: &mut Graph, obj: &Objective) -> Vec<Array2<f64>> {
    let grads = g.grad(obj.loss, &obj.params);
    grads.iter().map(|v| g.value(*v).clone()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub critic_loss: f64,
    pub generator_loss: f64,
}

/// Everything besides the models needed to resume training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub iteration: usize,
    pub critic_updates: usize,
    pub generator_updates: usize,
    pub history: Vec<LossRecord>,
    pub critic_optimizer: Optimizer,
    pub generator_optimizer: Optimizer,
    pub rng: SynthRng,
}

impl TrainerState {
    pub fn new(config: &WganGpConfig) -> Self {
        Self {
            iteration: 0,
            critic_updates: 0,
            generator_updates: 0,
            history: Vec::new(),
            critic_optimizer: config.make_optimizer(),
            generator_optimizer: config.make_optimizer(),
            rng: SynthRng::seed_from_u64(config.seed),
        }
    }
}

/// Self-describing snapshot of a training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint<M> {
    pub format: String,
    pub model_kind: String,
    pub config: serde_json::Value,
    pub iteration: usize,
    pub models: M,
    pub state: TrainerState,
}

pub const CHECKPOINT_FORMAT: &str = "ratesynth-checkpoint/1";

impl<M: Serialize + DeserializeOwned> Checkpoint<M> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ckpt: Self = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "unsupported checkpoint format `{}`",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }
}

/// Receives checkpoints as training progresses.
pub trait TrainHooks<M> {
    fn on_checkpoint(&mut self, checkpoint: &Checkpoint<M>) -> Result<()>;
    fn on_iteration(&mut self, _record: &LossRecord) {}
}

/// Hooks that ignore everything.
pub struct NoHooks;

impl<M> TrainHooks<M> for NoHooks {
    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint<M>) -> Result<()> {
        Ok(())
    }
}

/// Hooks that keep every checkpoint in memory.
pub struct CollectCheckpoints<M>(pub Vec<Checkpoint<M>>);

impl<M: Clone> TrainHooks<M> for CollectCheckpoints<M> {
    fn on_checkpoint(&mut self, checkpoint: &Checkpoint<M>) -> Result<()> {
        self.0.push(checkpoint.clone());
        Ok(())
    }
}

fn check_finite(value: f64, iteration: usize, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::TrainingFault {
            iteration,
            message: format!("non-finite {what} ({value})"),
        })
    }
}

fn check_gradients(values: Vec<Array2<f64>>, iteration: usize) -> Result<Vec<Array2<f64>>> {
    if values.iter().any(|a| a.iter().any(|x| !x.is_finite())) {
        return Err(Error::TrainingFault {
            iteration,
            message: "non-finite gradient".into(),
        });
    }
    Ok(values)
}

fn snapshot<T: WganTask>(
    kind: &str,
    config: &serde_json::Value,
    task: &T,
    state: &TrainerState,
) -> Checkpoint<T::Models> {
    Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        model_kind: kind.to_string(),
        config: config.clone(),
        iteration: state.iteration,
        models: task.models().clone(),
        state: state.clone(),
    }
}

/// Runs alternating updates until `config.total_iterations` is reached.
///
/// Each iteration performs `critic_steps_per_gen_step` critic updates and
/// one generator update. A checkpoint is emitted at iteration 0 (fresh
/// runs only), every `checkpoint_every` iterations, and at the end. A
/// non-finite loss or gradient aborts before any parameter is touched, so
/// the models stay at their last good values.
pub fn train<T: WganTask>(
    kind: &str,
    config: &WganGpConfig,
    run_config: &serde_json::Value,
    task: &mut T,
    state: &mut TrainerState,
    hooks: &mut dyn TrainHooks<T::Models>,
) -> Result<()> {
    config.validate()?;
    if state.iteration == 0 {
        hooks.on_checkpoint(&snapshot(kind, run_config, task, state))?;
    }
    while state.iteration < config.total_iterations {
        let it = state.iteration;
        let mut critic_value = 0.0;
        for _ in 0..config.critic_steps_per_gen_step {
            let mut g = Graph::new();
            let obj = task.critic_objective(&mut g, &mut state.rng)?;
            critic_value = g.scalar(obj.loss);
            check_finite(critic_value, it, "critic loss")?;
            let grads = task.critic_gradients(&mut g, &obj, &mut state.rng)?;
            let grads = check_gradients(grads, it)?;
            state.critic_optimizer.step(task.critic_params_mut(), &grads);
            task.after_critic_update();
            state.critic_updates += 1;
        }

        let mut g = Graph::new();
        let obj = task.generator_objective(&mut g, &mut state.rng)?;
        let gen_value = g.scalar(obj.loss);
        check_finite(gen_value, it, "generator loss")?;
        let grads = check_gradients(exact_gradients(&mut g, &obj), it)?;
        state.generator_optimizer.step(task.generator_params_mut(), &grads);
        state.generator_updates += 1;

        let record = LossRecord {
            iteration: it,
            critic_loss: critic_value,
            generator_loss: gen_value,
        };
        state.history.push(record);
        hooks.on_iteration(&record);
        state.iteration += 1;

        if state.iteration % config.checkpoint_every == 0 || state.iteration == config.total_iterations {
            hooks.on_checkpoint(&snapshot(kind, run_config, task, state))?;
        }
    }
    Ok(())
}

/// Writes `iteration,critic_loss,generator_loss` rows.
pub fn write_loss_history(path: impl AsRef<Path>, history: &[LossRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "iteration,critic_loss,generator_loss")?;
    for r in history {
        writeln!(out, "{},{},{}", r.iteration, r.critic_loss, r.generator_loss)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use ndarray::array;

    /// `D(x) = x·w + b` with no hidden layers.
    struct LinearCritic {
        params: ParamSet,
        layer: Linear,
    }

    impl LinearCritic {
        fn ones(n: usize) -> Self {
            let mut params = ParamSet::new();
            let weight = params.add("w", Array2::ones((n, 1)));
            let bias = params.add("b", Array2::zeros((1, 1)));
            Self {
                params,
                layer: Linear {
                    weight,
                    bias,
                    fan_in: n,
                    fan_out: 1,
                },
            }
        }
    }

    impl Differentiable for LinearCritic {
        fn params(&self) -> &ParamSet {
            &self.params
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.params
        }
        fn forward(&mut self, g: &mut Graph, p: &[Var], x: Var, _ctx: &mut Ctx<'_>) -> Var {
            self.layer.forward(g, p, x)
        }
    }

    /// Constant critic `D ≡ c`.
    struct ConstCritic(ParamSet, f64);

    impl Differentiable for ConstCritic {
        fn params(&self) -> &ParamSet {
            &self.0
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.0
        }
        fn forward(&mut self, g: &mut Graph, _p: &[Var], x: Var, _ctx: &mut Ctx<'_>) -> Var {
            let m = g.shape(x).0;
            let zero = g.scale(x, 0.0);
            let s = g.sum_cols(zero);
            let c = g.leaf(Array2::from_elem((m, 1), self.1));
            g.add(s, c)
        }
    }

    fn rng() -> SynthRng {
        SynthRng::seed_from_u64(11)
    }

    #[test]
    fn noise_shape_and_determinism() {
        let a = sample_noise(NoiseSpec { dim: 10 }, 3, &mut rng());
        let b = sample_noise(NoiseSpec { dim: 10 }, 3, &mut rng());
        assert_eq!(a.dim(), (3, 10));
        assert_eq!(a, b);
    }

    #[test]
    fn noise_moments() {
        let z = sample_noise(NoiseSpec { dim: 4 }, 100_000, &mut rng());
        for col in z.columns() {
            let mean = col.mean().unwrap();
            let var = col.var(0.0);
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
    }

    #[test]
    fn interpolation_endpoints_and_linearity() {
        let real = Array2::ones((3, 2));
        let fake = Array2::zeros((3, 2));
        assert_eq!(interpolate_with(&real, &fake, &[1.0; 3]).unwrap(), real);
        assert_eq!(interpolate_with(&real, &fake, &[0.0; 3]).unwrap(), fake);
        assert_eq!(
            interpolate_with(&real, &fake, &[0.25; 3]).unwrap(),
            Array2::from_elem((3, 2), 0.25)
        );
        assert!(interpolate_with(&real, &Array2::zeros((2, 2)), &[0.5; 3]).is_err());
    }

    #[test]
    fn linear_critic_penalty_is_analytic() {
        let mut critic = LinearCritic::ones(4);
        let mut r = rng();
        let mut g = Graph::new();
        let p = critic.params.bind(&mut g);
        let real = g.leaf(array![[0.1, 0.2, 0.3, 0.4], [1.0, 0.0, 1.0, 0.0]]);
        let fake = g.leaf(array![[0.5, 0.5, 0.5, 0.5], [0.0, 0.9, 0.2, 0.3]]);
        let mut ctx = Ctx::new(Mode::Train, &mut r);
        let loss = critic_loss(&mut g, &mut critic, &p, real, fake, 10.0, &mut ctx).unwrap();
        assert_eq!(g.scalar(loss.penalty), 10.0);
    }

    #[test]
    fn constant_critic_without_penalty_has_zero_loss() {
        let mut critic = ConstCritic(ParamSet::new(), 3.5);
        let mut r = rng();
        let mut g = Graph::new();
        let real = g.leaf(Array2::ones((4, 3)));
        let fake = g.leaf(Array2::zeros((4, 3)));
        let mut ctx = Ctx::new(Mode::Train, &mut r);
        let loss = critic_loss(&mut g, &mut critic, &[], real, fake, 0.0, &mut ctx).unwrap();
        assert_eq!(g.scalar(loss.total), 0.0);
        let gl = generator_loss(&mut g, &mut ConstCritic(ParamSet::new(), 5.0), &[], fake, &mut ctx);
        assert_eq!(g.scalar(gl), -5.0);
    }

    #[test]
    fn single_element_generator_loss() {
        let mut critic = LinearCritic::ones(2);
        let mut r = rng();
        let mut g = Graph::new();
        let p = critic.params.bind(&mut g);
        let fake = g.leaf(array![[1.0, 1.5]]);
        let mut ctx = Ctx::new(Mode::Train, &mut r);
        let gl = generator_loss(&mut g, &mut critic, &p, fake, &mut ctx);
        assert_eq!(g.scalar(gl), -2.5);
    }

    struct MlpCritic {
        params: ParamSet,
        mlp: crate::nn::Mlp,
    }

    impl MlpCritic {
        fn new(n: usize, seed: u64) -> Self {
            let mut params = ParamSet::new();
            let mut r = SynthRng::seed_from_u64(seed);
            let mlp = crate::nn::Mlp::new(&mut params, "d", &[n, 5, 4, 1], 0.2, &mut r);
            Self { params, mlp }
        }

        fn eval(&self, x: &Array2<f64>) -> Array2<f64> {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let xv = g.leaf(x.clone());
            let out = self.mlp.forward(&mut g, &p, xv);
            g.value(out).clone()
        }
    }

    impl Differentiable for MlpCritic {
        fn params(&self) -> &ParamSet {
            &self.params
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.params
        }
        fn forward(&mut self, g: &mut Graph, p: &[Var], x: Var, _ctx: &mut Ctx<'_>) -> Var {
            self.mlp.forward(g, p, x)
        }
    }

    fn autodiff_penalty(critic: &mut MlpCritic, xhat: &Array2<f64>, lambda: f64) -> (f64, Vec<Array2<f64>>) {
        let mut r = rng();
        let mut g = Graph::new();
        let p = critic.params.bind(&mut g);
        let x = g.leaf(xhat.clone());
        let mut ctx = Ctx::new(Mode::Train, &mut r);
        let gp = gradient_penalty(&mut g, critic, &p, x, lambda, &mut ctx);
        let grads = g.grad(gp, &p);
        (g.scalar(gp), grads.iter().map(|v| g.value(*v).clone()).collect())
    }

    /// Penalty computed with input gradients from central differences.
    fn fd_penalty(critic: &MlpCritic, xhat: &Array2<f64>, lambda: f64) -> f64 {
        let h = 1e-6;
        let mut total = 0.0;
        for i in 0..xhat.nrows() {
            let mut sq = 0.0;
            for j in 0..xhat.ncols() {
                let mut plus = xhat.clone();
                let mut minus = xhat.clone();
                plus[[i, j]] += h;
                minus[[i, j]] -= h;
                let d = (critic.eval(&plus)[[i, 0]] - critic.eval(&minus)[[i, 0]]) / (2.0 * h);
                sq += d * d;
            }
            total += (sq.sqrt() - 1.0).powi(2);
        }
        lambda * total / xhat.nrows() as f64
    }

    #[test]
    fn penalty_matches_finite_difference_oracle() {
        let mut critic = MlpCritic::new(3, 5);
        let xhat = array![[0.2, -0.4, 0.9], [1.1, 0.3, -0.2], [-0.7, 0.8, 0.05]];
        let (value, grads) = autodiff_penalty(&mut critic, &xhat, 10.0);
        let oracle = fd_penalty(&critic, &xhat, 10.0);
        assert!((value - oracle).abs() < 1e-5 * oracle.max(1.0), "{value} vs {oracle}");

        // Parameter gradients of the penalty against differences of its value.
        let h = 1e-6;
        for k in 0..critic.params.len() {
            let shape = critic.params.get(k).dim();
            for (a, b) in [(0, 0), (shape.0 - 1, shape.1 - 1)] {
                critic.params.get_mut(k)[[a, b]] += h;
                let up = autodiff_penalty(&mut critic, &xhat, 10.0).0;
                critic.params.get_mut(k)[[a, b]] -= 2.0 * h;
                let down = autodiff_penalty(&mut critic, &xhat, 10.0).0;
                critic.params.get_mut(k)[[a, b]] += h;
                let fd = (up - down) / (2.0 * h);
                let ad = grads[k][[a, b]];
                assert!(
                    (fd - ad).abs() < 1e-5 * fd.abs().max(1.0),
                    "param {k} [{a},{b}]: {ad} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn zero_lambda_reduces_to_wasserstein_term() {
        let mut critic = MlpCritic::new(2, 9);
        let real_v = array![[0.1, 0.2], [0.3, 0.9], [1.0, -1.0]];
        let fake_v = array![[0.5, 0.5], [0.0, 0.0], [0.2, 0.7]];
        let mut r = rng();
        let mut g = Graph::new();
        let p = critic.params.bind(&mut g);
        let real = g.leaf(real_v.clone());
        let fake = g.leaf(fake_v.clone());
        let mut ctx = Ctx::new(Mode::Train, &mut r);
        let loss = critic_loss(&mut g, &mut critic, &p, real, fake, 0.0, &mut ctx).unwrap();
        let expected = critic.eval(&fake_v).mean().unwrap() - critic.eval(&real_v).mean().unwrap();
        assert!((g.scalar(loss.total) - expected).abs() < 1e-12);
    }

    #[test]
    fn critic_loss_is_invariant_to_constant_shift() {
        let real_v = array![[0.1, 0.2], [0.3, 0.9], [1.0, -1.0]];
        let fake_v = array![[0.5, 0.5], [0.0, 0.0], [0.2, 0.7]];
        let eval = |shift: f64| {
            let mut critic = MlpCritic::new(2, 21);
            let last = critic.params.len() - 1;
            critic.params.get_mut(last)[[0, 0]] += shift;
            let mut r = rng();
            let mut g = Graph::new();
            let p = critic.params.bind(&mut g);
            let real = g.leaf(real_v.clone());
            let fake = g.leaf(fake_v.clone());
            let mut ctx = Ctx::new(Mode::Train, &mut r);
            let loss = critic_loss(&mut g, &mut critic, &p, real, fake, 10.0, &mut ctx).unwrap();
            g.scalar(loss.total)
        };
        assert!((eval(0.0) - eval(37.5)).abs() < 1e-9);
    }

    /// Generator `G(z) = zW + b` against an MLP critic on a 2-d Gaussian.
    #[derive(Clone, Serialize, Deserialize)]
    struct ToyModels {
        gen: ParamSet,
        gen_layer: Linear,
        critic: ParamSet,
        critic_mlp: crate::nn::Mlp,
    }

    struct ToyTask {
        models: ToyModels,
        data: Array2<f64>,
        m: usize,
        poison_at: Option<usize>,
        steps: usize,
    }

    struct CriticView<'a>(&'a mut ParamSet, &'a crate::nn::Mlp);

    impl Differentiable for CriticView<'_> {
        fn params(&self) -> &ParamSet {
            self.0
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            self.0
        }
        fn forward(&mut self, g: &mut Graph, p: &[Var], x: Var, _ctx: &mut Ctx<'_>) -> Var {
            self.1.forward(g, p, x)
        }
    }

    impl ToyTask {
        fn new(seed: u64) -> Self {
            let mut r = SynthRng::seed_from_u64(seed);
            let mut gen = ParamSet::new();
            let gen_layer = Linear::new(&mut gen, "g", 2, 2, &mut r);
            let mut critic = ParamSet::new();
            let critic_mlp = crate::nn::Mlp::new(&mut critic, "d", &[2, 8, 1], 0.2, &mut r);
            let data = sample_noise(NoiseSpec { dim: 2 }, 500, &mut r).mapv(|v| 0.5 * v + 2.0);
            Self {
                models: ToyModels {
                    gen,
                    gen_layer,
                    critic,
                    critic_mlp,
                },
                data,
                m: 32,
                poison_at: None,
                steps: 0,
            }
        }
    }

    impl WganTask for ToyTask {
        type Models = ToyModels;

        fn models(&self) -> &ToyModels {
            &self.models
        }
        fn models_mut(&mut self) -> &mut ToyModels {
            &mut self.models
        }
        fn critic_params_mut(&mut self) -> &mut ParamSet {
            &mut self.models.critic
        }
        fn generator_params_mut(&mut self) -> &mut ParamSet {
            &mut self.models.gen
        }
        fn critic_objective(&mut self, g: &mut Graph, rng: &mut SynthRng) -> Result<Objective> {
            let idx = rand::seq::index::sample(rng, self.data.nrows(), self.m).into_vec();
            let real_v = self.data.select(Axis(0), &idx);
            let gp = self.models.gen.bind(g);
            let z = g.leaf(sample_noise(NoiseSpec { dim: 2 }, self.m, rng));
            let fake = self.models.gen_layer.forward(g, &gp, z);
            let fake = g.detach(fake);
            let mut real = g.leaf(real_v);
            self.steps += 1;
            if self.poison_at == Some(self.steps) {
                real = g.leaf(Array2::from_elem((self.m, 2), f64::NAN));
            }
            let cp = self.models.critic.bind(g);
            let mlp = self.models.critic_mlp.clone();
            let mut view = CriticView(&mut self.models.critic, &mlp);
            let mut ctx = Ctx::new(Mode::Train, rng);
            let loss = critic_loss(g, &mut view, &cp, real, fake, 10.0, &mut ctx)?;
            Ok(Objective {
                loss: loss.total,
                params: cp,
            })
        }
        fn generator_objective(&mut self, g: &mut Graph, rng: &mut SynthRng) -> Result<Objective> {
            let gp = self.models.gen.bind(g);
            let z = g.leaf(sample_noise(NoiseSpec { dim: 2 }, self.m, rng));
            let fake = self.models.gen_layer.forward(g, &gp, z);
            let cp = self.models.critic.bind(g);
            let mlp = self.models.critic_mlp.clone();
            let mut view = CriticView(&mut self.models.critic, &mlp);
            let mut ctx = Ctx::new(Mode::Train, rng);
            let loss = generator_loss(g, &mut view, &cp, fake, &mut ctx);
            Ok(Objective { loss, params: gp })
        }
    }

    fn toy_config(iterations: usize) -> WganGpConfig {
        WganGpConfig {
            minibatch_size: 32,
            critic_steps_per_gen_step: 3,
            learning_rate: 1e-2,
            total_iterations: iterations,
            checkpoint_every: 10,
            seed: 4,
            ..WganGpConfig::default()
        }
    }

    #[test]
    fn counters_checkpoints_and_history() {
        let config = toy_config(25);
        let mut task = ToyTask::new(1);
        let mut state = TrainerState::new(&config);
        let mut hooks = CollectCheckpoints(Vec::new());
        train(
            "toy",
            &config,
            &serde_json::Value::Null,
            &mut task,
            &mut state,
            &mut hooks,
        )
        .unwrap();
        assert_eq!(state.generator_updates, 25);
        assert_eq!(state.critic_updates, 75);
        assert_eq!(state.history.len(), 25);
        let its: Vec<usize> = hooks.0.iter().map(|c| c.iteration).collect();
        assert_eq!(its, vec![0, 10, 20, 25]);
    }

    #[test]
    fn zero_iterations_emits_only_initial_checkpoint() {
        let config = toy_config(0);
        let mut task = ToyTask::new(1);
        let before = task.models.gen.clone();
        let mut state = TrainerState::new(&config);
        let mut hooks = CollectCheckpoints(Vec::new());
        train(
            "toy",
            &config,
            &serde_json::Value::Null,
            &mut task,
            &mut state,
            &mut hooks,
        )
        .unwrap();
        assert_eq!(hooks.0.len(), 1);
        assert_eq!(task.models.gen, before);
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let config = toy_config(20);
        let run = |split: Option<usize>| {
            let mut task = ToyTask::new(1);
            let mut state = TrainerState::new(&config);
            if let Some(k) = split {
                let first = WganGpConfig {
                    total_iterations: k,
                    ..config.clone()
                };
                train(
                    "toy",
                    &first,
                    &serde_json::Value::Null,
                    &mut task,
                    &mut state,
                    &mut NoHooks,
                )
                .unwrap();
                // Round-trip through JSON before resuming.
                let ckpt = snapshot("toy", &serde_json::Value::Null, &task, &state);
                let text = serde_json::to_string(&ckpt).unwrap();
                let back: Checkpoint<ToyModels> = serde_json::from_str(&text).unwrap();
                task = ToyTask::new(1);
                task.models = back.models;
                state = back.state;
            }
            train(
                "toy",
                &config,
                &serde_json::Value::Null,
                &mut task,
                &mut state,
                &mut NoHooks,
            )
            .unwrap();
            (task.models.gen.flatten(), state.history)
        };
        let a = run(None);
        let b = run(None);
        let c = run(Some(7));
        assert_eq!(a, b);
        assert_eq!(a.0, c.0);
    }

    #[test]
    fn non_finite_loss_is_a_training_fault() {
        let config = toy_config(20);
        let mut task = ToyTask::new(1);
        task.poison_at = Some(13);
        let mut state = TrainerState::new(&config);
        let mut hooks = CollectCheckpoints(Vec::new());
        let err = train(
            "toy",
            &config,
            &serde_json::Value::Null,
            &mut task,
            &mut state,
            &mut hooks,
        )
        .unwrap_err();
        match err {
            Error::TrainingFault { iteration, .. } => assert_eq!(iteration, 4),
            other => panic!("unexpected {other:?}"),
        }
        let last = hooks.0.last().unwrap();
        assert_eq!(last.iteration, 0);
        assert!(task.models.critic.flatten().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn generator_moves_toward_data() {
        let config = WganGpConfig {
            total_iterations: 400,
            checkpoint_every: 1000,
            ..toy_config(0)
        };
        let mut task = ToyTask::new(2);
        let mut state = TrainerState::new(&config);
        train(
            "toy",
            &config,
            &serde_json::Value::Null,
            &mut task,
            &mut state,
            &mut NoHooks,
        )
        .unwrap();
        let bias = task.models.gen.get(task.models.gen_layer.bias);
        for &b in bias.iter() {
            assert!((b - 2.0).abs() < 0.5, "bias {b}");
        }
    }
}
