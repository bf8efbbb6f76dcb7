//! The multi-categorical WGAN-GP: a generator with a shared trunk and one
//! softmax head per categorical block plus a linear head for the numerics,
//! and a critic that sees each row next to its minibatch column means.

use ndarray::{s, Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::codec::{decode, BlockKind, EncodedMatrix, EncodingLayout};
use crate::error::{Error, Result};
use crate::nn::{l2_term, BatchNorm, Graph, Linear, Mlp, Mode, ParamSet, SynthRng, Var};
use crate::schema::DatasetSchema;
use crate::table::RawTable;
use crate::wgan::{
    critic_loss, generator_loss, sample_noise, train, Checkpoint, CriticLoss, Ctx, Differentiable, NoiseSpec,
    Objective, TrainHooks, TrainerState, WganGpConfig, WganTask,
};

pub const MODEL_KIND: &str = "mc_wgan_gp";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McGeneratorConfig {
    pub noise_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub batchnorm_decay: f64,
    pub l2_regularization: f64,
}

impl Default for McGeneratorConfig {
    fn default() -> Self {
        Self {
            noise_dim: 10,
            hidden_dims: vec![100, 100],
            batchnorm_decay: 0.90,
            l2_regularization: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McCriticConfig {
    pub hidden_dims: Vec<usize>,
    pub leaky_relu_slope: f64,
    pub l2_regularization: f64,
}

impl Default for McCriticConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![256, 128],
            leaky_relu_slope: 0.2,
            l2_regularization: 0.0,
        }
    }
}

/// Hyperparameters of a full MC-WGAN-GP run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McTrainConfig {
    pub engine: WganGpConfig,
    pub generator: McGeneratorConfig,
    pub critic: McCriticConfig,
}

impl Default for McTrainConfig {
    fn default() -> Self {
        Self {
            engine: WganGpConfig::default(),
            generator: McGeneratorConfig::default(),
            critic: McCriticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McGenerator {
    pub params: ParamSet,
    pub config: McGeneratorConfig,
    pub layout: EncodingLayout,
    pub hidden: Vec<(Linear, BatchNorm)>,
    /// One head per one-hot block, in layout order.
    pub categorical_heads: Vec<Linear>,
    pub numeric_head: Option<Linear>,
}

/// Builds the generator for `layout`.
pub fn build_generator(config: &McGeneratorConfig, layout: &EncodingLayout, rng: &mut SynthRng) -> Result<McGenerator> {
    if layout.blocks.is_empty() {
        return Err(Error::Config("generator layout has no blocks".into()));
    }
    if config.noise_dim == 0 {
        return Err(Error::Config("noise_dim must be >= 1".into()));
    }
    let mut params = ParamSet::new();
    let mut hidden = Vec::new();
    let mut width = config.noise_dim;
    for (i, &h) in config.hidden_dims.iter().enumerate() {
        let lin = Linear::new(&mut params, &format!("gen.hidden{i}"), width, h, rng);
        let bn = BatchNorm::new(&mut params, &format!("gen.bn{i}"), h, config.batchnorm_decay);
        hidden.push((lin, bn));
        width = h;
    }
    let categorical_heads = layout
        .onehot_blocks()
        .map(|b| Linear::new(&mut params, &format!("gen.head.{}", b.variable), width, b.width, rng))
        .collect();
    let n_c = layout.n_numeric();
    let numeric_head = (n_c > 0).then(|| Linear::new(&mut params, "gen.head.numeric", width, n_c, rng));
    Ok(McGenerator {
        params,
        config: config.clone(),
        layout: layout.clone(),
        hidden,
        categorical_heads,
        numeric_head,
    })
}

impl McGenerator {
    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            dim: self.config.noise_dim,
        }
    }

    fn forward_impl(&mut self, g: &mut Graph, p: &[Var], z: Var, mode: Mode) -> Var {
        let mut h = z;
        for (lin, bn) in &mut self.hidden {
            let a = lin.forward(g, p, h);
            let b = bn.forward(g, p, a, mode);
            h = g.relu(b);
        }
        let numeric = self.numeric_head.as_ref().map(|head| head.forward(g, p, h));
        let mut parts = Vec::with_capacity(self.layout.blocks.len());
        let mut cat = 0;
        let mut num = 0;
        for block in &self.layout.blocks {
            match block.kind {
                BlockKind::OneHot => {
                    let logits = self.categorical_heads[cat].forward(g, p, h);
                    parts.push(g.softmax(logits));
                    cat += 1;
                }
                BlockKind::MinMax => {
                    let head = numeric.expect("numeric head exists when numeric blocks do");
                    parts.push(g.slice_cols(head, num, block.width));
                    num += block.width;
                }
            }
        }
        g.concat_cols(&parts)
    }

    /// Maps a noise batch to encoded rows without tracking gradients.
    pub fn generate(&mut self, noise: &Array2<f64>, mode: Mode) -> Array2<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let z = g.leaf(noise.clone());
        let out = self.forward_impl(&mut g, &p, z, mode);
        g.value(out).clone()
    }
}

impl Differentiable for McGenerator {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn forward(&mut self, g: &mut Graph, p: &[Var], x: Var, ctx: &mut Ctx<'_>) -> Var {
        self.forward_impl(g, p, x, ctx.mode)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McCritic {
    pub params: ParamSet,
    pub config: McCriticConfig,
    pub input_dim: usize,
    pub mlp: Mlp,
}

pub fn build_critic(config: &McCriticConfig, input_dim: usize, rng: &mut SynthRng) -> Result<McCritic> {
    if input_dim == 0 {
        return Err(Error::Config("critic input_dim must be > 0".into()));
    }
    let mut params = ParamSet::new();
    let mut widths = vec![2 * input_dim];
    widths.extend(&config.hidden_dims);
    widths.push(1);
    let mlp = Mlp::new(&mut params, "critic", &widths, config.leaky_relu_slope, rng);
    Ok(McCritic {
        params,
        config: config.clone(),
        input_dim,
        mlp,
    })
}

/// Concatenates each row with the column means of its batch.
pub fn augment_with_batch_mean(g: &mut Graph, x: Var) -> Var {
    let shape = g.shape(x);
    let mean = g.mean_rows(x);
    let wide = g.broadcast(mean, shape);
    g.concat_cols(&[x, wide])
}

impl McCritic {
    /// Scores a batch of at least two rows.
    pub fn score(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.nrows() < 2 {
            return Err(Error::Contract("critic needs a minibatch of at least 2 rows".into()));
        }
        if x.ncols() != self.input_dim {
            return Err(Error::Contract(format!(
                "critic expects {} columns, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let xv = g.leaf(x.clone());
        let aug = augment_with_batch_mean(&mut g, xv);
        let out = self.mlp.forward(&mut g, &p, aug);
        Ok(g.value(out).clone())
    }
}

impl Differentiable for McCritic {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn forward(&mut self, g: &mut Graph, p: &[Var], x: Var, _ctx: &mut Ctx<'_>) -> Var {
        let aug = augment_with_batch_mean(g, x);
        self.mlp.forward(g, p, aug)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McModels {
    pub generator: McGenerator,
    pub critic: McCritic,
}

pub fn build_models(config: &McTrainConfig, layout: &EncodingLayout) -> Result<McModels> {
    let mut rng = SynthRng::seed_from_u64(config.engine.seed ^ 0x6d63_5f69_6e69_7400);
    let generator = build_generator(&config.generator, layout, &mut rng)?;
    let critic = build_critic(&config.critic, layout.total_dim, &mut rng)?;
    Ok(McModels { generator, critic })
}

/// Critic loss of one step plus the optional L2 term.
pub struct McCriticObjective {
    pub engine: CriticLoss,
    pub total: Var,
    pub params: Vec<Var>,
}

pub fn mc_critic_objective(
    g: &mut Graph,
    models: &mut McModels,
    config: &McTrainConfig,
    real: &Array2<f64>,
    rng: &mut SynthRng,
) -> Result<McCriticObjective> {
    let m = real.nrows();
    let noise = sample_noise(models.generator.noise(), m, rng);
    let gp = models.generator.params.bind(g);
    let z = g.leaf(noise);
    let fake = models.generator.forward_impl(g, &gp, z, Mode::Train);
    let fake = g.detach(fake);
    let real = g.leaf(real.clone());
    let cp = models.critic.params.bind(g);
    let mut ctx = Ctx::new(Mode::Train, rng);
    let engine = critic_loss(
        g,
        &mut models.critic,
        &cp,
        real,
        fake,
        config.engine.lambda_gp,
        &mut ctx,
    )?;
    let total = if config.critic.l2_regularization > 0.0 {
        let l2 = l2_term(g, &cp);
        let l2 = g.scale(l2, config.critic.l2_regularization);
        g.add(engine.total, l2)
    } else {
        engine.total
    };
    Ok(McCriticObjective {
        engine,
        total,
        params: cp,
    })
}

/// Generator loss of one step: `(engine loss, total with L2, params)`.
pub fn mc_generator_objective(
    g: &mut Graph,
    models: &mut McModels,
    config: &McTrainConfig,
    m: usize,
    rng: &mut SynthRng,
) -> (Var, Var, Vec<Var>) {
    let noise = sample_noise(models.generator.noise(), m, rng);
    let gp = models.generator.params.bind(g);
    let z = g.leaf(noise);
    let fake = models.generator.forward_impl(g, &gp, z, Mode::Train);
    let cp = models.critic.params.bind(g);
    let mut ctx = Ctx::new(Mode::Train, rng);
    let engine = generator_loss(g, &mut models.critic, &cp, fake, &mut ctx);
    let total = if config.generator.l2_regularization > 0.0 {
        let l2 = l2_term(g, &gp);
        let l2 = g.scale(l2, config.generator.l2_regularization);
        g.add(engine, l2)
    } else {
        engine
    };
    (engine, total, gp)
}

struct McTask<'a> {
    models: McModels,
    config: &'a McTrainConfig,
    data: &'a Array2<f64>,
}

impl WganTask for McTask<'_> {
    type Models = McModels;

    fn models(&self) -> &McModels {
        &self.models
    }
    fn models_mut(&mut self) -> &mut McModels {
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
        let obj = mc_critic_objective(g, &mut self.models, self.config, &real, rng)?;
        Ok(Objective {
            loss: obj.total,
            params: obj.params,
        })
    }
    fn generator_objective(&mut self, g: &mut Graph, rng: &mut SynthRng) -> Result<Objective> {
        let m = self.config.engine.minibatch_size;
        let (_, total, params) = mc_generator_objective(g, &mut self.models, self.config, m, rng);
        Ok(Objective { loss: total, params })
    }
}

/// Trains from scratch (`resume = None`) or continues a checkpoint until
/// `config.engine.total_iterations`.
pub fn train_mc(
    data: &EncodedMatrix,
    config: &McTrainConfig,
    resume: Option<Checkpoint<McModels>>,
    hooks: &mut dyn TrainHooks<McModels>,
) -> Result<(McModels, TrainerState)> {
    config.engine.validate()?;
    if data.n_rows() < config.engine.minibatch_size {
        return Err(Error::Config(format!(
            "minibatch_size {} exceeds the {} training rows",
            config.engine.minibatch_size,
            data.n_rows()
        )));
    }
    let (models, mut state) = match resume {
        Some(ckpt) => (ckpt.models, ckpt.state),
        None => (build_models(config, &data.layout)?, TrainerState::new(&config.engine)),
    };
    if models.generator.layout != data.layout {
        return Err(Error::Config("checkpoint layout does not match the data".into()));
    }
    let mut task = McTask {
        models,
        config,
        data: &data.values,
    };
    let run_config = serde_json::to_value(config)?;
    train(MODEL_KIND, &config.engine, &run_config, &mut task, &mut state, hooks)?;
    Ok((task.models, state))
}

/// How generated simplex blocks become levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisMode {
    /// Sample each level from the generated probabilities.
    Soft,
    /// Take the most probable level.
    Hard,
}

/// Replaces every one-hot block of `values` by a one-hot vector drawn from
/// its (clamped, renormalized) probabilities.
pub fn sample_onehot_blocks(values: &mut Array2<f64>, layout: &EncodingLayout, rng: &mut SynthRng) {
    for block in layout.onehot_blocks() {
        let mut view = values.slice_mut(s![.., block.offset..block.offset + block.width]);
        for mut row in view.axis_iter_mut(Axis(0)) {
            let total: f64 = row.iter().map(|v| v.max(0.0)).sum();
            let pick = if total > 0.0 && total.is_finite() {
                let u = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = block.width - 1;
                for (i, v) in row.iter().enumerate() {
                    acc += v.max(0.0);
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            } else {
                crate::codec::argmax(row.view())
            };
            row.fill(0.0);
            row[pick] = 1.0;
        }
    }
}

const SYNTH_CHUNK: usize = 8192;

/// Generates `count` encoded rows in evaluation mode.
pub fn generate_encoded(generator: &mut McGenerator, count: usize, rng: &mut SynthRng) -> Array2<f64> {
    let mut out = Array2::zeros((count, generator.layout.total_dim));
    let mut start = 0;
    while start < count {
        let n = SYNTH_CHUNK.min(count - start);
        let z = sample_noise(generator.noise(), n, rng);
        let block = generator.generate(&z, Mode::Eval);
        out.slice_mut(s![start..start + n, ..]).assign(&block);
        start += n;
    }
    out
}

/// Generates a synthetic table of `count` rows conforming to `schema`.
pub fn synthesize(
    generator: &mut McGenerator,
    schema: &DatasetSchema,
    count: usize,
    rng: &mut SynthRng,
    mode: SynthesisMode,
) -> Result<RawTable> {
    let mut values = generate_encoded(generator, count, rng);
    if mode == SynthesisMode::Soft {
        sample_onehot_blocks(&mut values, &generator.layout, rng);
    }
    decode(
        &EncodedMatrix {
            values,
            layout: generator.layout.clone(),
        },
        schema,
    )
}
