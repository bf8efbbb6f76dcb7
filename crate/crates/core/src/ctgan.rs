//! The conditional tabular GAN: every record is generated under a
//! condition `(column, value)`, real rows matching the condition are
//! sampled for the critic, generator heads use Gumbel-softmax, and the
//! critic scores pacs of records jointly.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::codec::{argmax, decode, encode, BlockKind, EncodedMatrix, EncodingLayout};
use crate::error::{Error, Result};
use crate::nn::{dropout, gumbel_softmax, BatchNorm, Graph, Linear, Mode, ParamSet, SynthRng, Var};
use crate::schema::DatasetSchema;
use crate::table::RawTable;
use crate::wgan::{
    critic_loss, generator_loss, sample_noise, train, Checkpoint, Ctx, Differentiable, NoiseSpec, Objective,
    OptimizerKind, TrainHooks, TrainerState, WganGpConfig, WganTask,
};

pub const MODEL_KIND: &str = "ctgan";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CtganConfig {
    pub noise_dim: usize,
    pub generator_dims: Vec<usize>,
    pub critic_dims: Vec<usize>,
    pub pac_size: usize,
    pub gumbel_temperature: f64,
    pub dropout_rate: f64,
    pub leaky_relu_slope: f64,
    pub batchnorm_decay: f64,
    /// Weight of the conditioning cross-entropy in the generator loss.
    pub conditioning_weight: f64,
    /// Training length in passes over the data, used when
    /// `engine.total_iterations` is 0.
    pub epochs: usize,
}

impl Default for CtganConfig {
    fn default() -> Self {
        Self {
            noise_dim: 128,
            generator_dims: vec![256, 256],
            critic_dims: vec![256, 256],
            pac_size: 10,
            gumbel_temperature: 0.2,
            dropout_rate: 0.5,
            leaky_relu_slope: 0.2,
            batchnorm_decay: 0.9,
            conditioning_weight: 1.0,
            epochs: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CtganTrainConfig {
    pub engine: WganGpConfig,
    pub model: CtganConfig,
}

impl Default for CtganTrainConfig {
    fn default() -> Self {
        Self {
            engine: WganGpConfig {
                learning_rate: 2e-4,
                adam_beta1: 0.5,
                adam_beta2: 0.9,
                minibatch_size: 500,
                optimizer: OptimizerKind::Adam,
                total_iterations: 0,
                ..WganGpConfig::default()
            },
            model: CtganConfig::default(),
        }
    }
}

impl CtganTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.pac_size == 0 || self.engine.minibatch_size % m.pac_size != 0 {
            return Err(Error::Config(format!(
                "minibatch_size {} must be a multiple of pac_size {}",
                self.engine.minibatch_size, m.pac_size
            )));
        }
        if !(m.gumbel_temperature > 0.0) {
            return Err(Error::Config("gumbel_temperature must be > 0".into()));
        }
        if !(0.0..1.0).contains(&m.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Iteration budget: the explicit one, or `epochs` passes over `rows`.
    pub fn iterations_for(&self, rows: usize) -> usize {
        if self.engine.total_iterations > 0 {
            self.engine.total_iterations
        } else {
            (self.model.epochs * rows).div_ceil(self.engine.minibatch_size).max(1)
        }
    }
}

/// Level counts of one categorical column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnFrequency {
    pub variable: String,
    /// Offset of the column's block in the encoded row and the condition.
    pub offset: usize,
    pub counts: Vec<usize>,
}

impl ColumnFrequency {
    pub fn width(&self) -> usize {
        self.counts.len()
    }
}

/// Level counts per column, and the matching training rows of every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyIndex {
    pub columns: Vec<ColumnFrequency>,
    pub n_rows: usize,
    pub cond_dim: usize,
    /// `rows[column][level]`: training rows with that level. Not persisted.
    #[serde(skip)]
    pub rows: Vec<Vec<Vec<usize>>>,
}

fn require_all_categorical(layout: &EncodingLayout) -> Result<()> {
    if layout.blocks.is_empty() || layout.blocks.iter().any(|b| b.kind != BlockKind::OneHot) {
        return Err(Error::Config(
            "CTGAN needs every variable categorical (bin numeric variables first)".into(),
        ));
    }
    Ok(())
}

/// Indexes an encoded all-categorical matrix.
pub fn build_frequency_index_encoded(data: &EncodedMatrix) -> Result<FrequencyIndex> {
    require_all_categorical(&data.layout)?;
    let mut columns = Vec::new();
    let mut rows = Vec::new();
    for block in &data.layout.blocks {
        let mut counts = vec![0usize; block.width];
        let mut lists = vec![Vec::new(); block.width];
        let view = data.values.slice(s![.., block.offset..block.offset + block.width]);
        for (i, row) in view.axis_iter(Axis(0)).enumerate() {
            let level = argmax(row);
            counts[level] += 1;
            lists[level].push(i);
        }
        columns.push(ColumnFrequency {
            variable: block.variable.clone(),
            offset: block.offset,
            counts,
        });
        rows.push(lists);
    }
    Ok(FrequencyIndex {
        columns,
        n_rows: data.n_rows(),
        cond_dim: data.layout.total_dim,
        rows,
    })
}

/// Counts and row lists of every categorical column of `table`.
pub fn build_frequency_index(table: &RawTable, schema: &DatasetSchema) -> Result<FrequencyIndex> {
    if let Some(v) = schema
        .variables
        .iter()
        .find(|v| v.raw_is_numeric() && v.binning.is_none())
    {
        return Err(Error::Config(format!(
            "variable `{}` is numeric and not binned",
            v.name
        )));
    }
    build_frequency_index_encoded(&encode(table, schema)?)
}

/// A condition: one level of one column, encoded as a single 1 in the
/// concatenated per-column one-hot mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondVector {
    pub column: usize,
    pub value: usize,
}

impl CondVector {
    pub fn position(&self, index: &FrequencyIndex) -> usize {
        index.columns[self.column].offset + self.value
    }

    pub fn encoding(&self, index: &FrequencyIndex) -> Vec<f64> {
        let mut v = vec![0.0; index.cond_dim];
        v[self.position(index)] = 1.0;
        v
    }
}

/// Column uniformly at random, then a level with probability proportional
/// to its count.
pub fn sample_condition(index: &FrequencyIndex, rng: &mut SynthRng) -> CondVector {
    let column = rng.random_range(0..index.columns.len());
    let counts = &index.columns[column].counts;
    let total: usize = counts.iter().sum();
    let mut u = rng.random_range(0..total.max(1));
    let mut value = counts.len() - 1;
    for (level, &c) in counts.iter().enumerate() {
        if u < c {
            value = level;
            break;
        }
        u -= c;
    }
    CondVector { column, value }
}

/// A uniformly random training row matching `cond`.
pub fn sample_matching_real(index: &FrequencyIndex, cond: CondVector, rng: &mut SynthRng) -> Result<usize> {
    let list = index
        .rows
        .get(cond.column)
        .and_then(|c| c.get(cond.value))
        .ok_or_else(|| Error::Contract("frequency index has no row lists".into()))?;
    if list.is_empty() {
        return Err(Error::Contract(format!(
            "no training row has level {} of `{}`",
            cond.value, index.columns[cond.column].variable
        )));
    }
    Ok(list[rng.random_range(0..list.len())])
}

pub fn cond_matrix(index: &FrequencyIndex, conds: &[CondVector]) -> Array2<f64> {
    let mut c = Array2::zeros((conds.len(), index.cond_dim));
    for (i, cond) in conds.iter().enumerate() {
        c[[i, cond.position(index)]] = 1.0;
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtganGenerator {
    pub params: ParamSet,
    pub noise_dim: usize,
    pub cond_dim: usize,
    pub temperature: f64,
    pub layout: EncodingLayout,
    pub hidden: Vec<(Linear, BatchNorm)>,
    pub heads: Vec<Linear>,
}

/// Generator outputs of one forward pass.
pub struct GeneratorOutput {
    /// Gumbel-softmax blocks in layout order.
    pub sample: Var,
    /// Per-block log-softmax of the head logits, concatenated.
    pub log_probs: Var,
}

pub fn build_ctgan_generator(
    config: &CtganConfig,
    layout: &EncodingLayout,
    rng: &mut SynthRng,
) -> Result<CtganGenerator> {
    require_all_categorical(layout)?;
    let mut params = ParamSet::new();
    let input = config.noise_dim + layout.total_dim;
    let mut width = input;
    let mut hidden = Vec::new();
    for (i, &h) in config.generator_dims.iter().enumerate() {
        let lin = Linear::new(&mut params, &format!("gen.hidden{i}"), width, h, rng);
        let bn = BatchNorm::new(&mut params, &format!("gen.bn{i}"), h, config.batchnorm_decay);
        hidden.push((lin, bn));
        width += h;
    }
    let heads = layout
        .blocks
        .iter()
        .map(|b| Linear::new(&mut params, &format!("gen.head.{}", b.variable), width, b.width, rng))
        .collect();
    Ok(CtganGenerator {
        params,
        noise_dim: config.noise_dim,
        cond_dim: layout.total_dim,
        temperature: config.gumbel_temperature,
        layout: layout.clone(),
        hidden,
        heads,
    })
}

impl CtganGenerator {
    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec { dim: self.noise_dim }
    }

    /// `input` is noise concatenated with the condition matrix.
    pub fn run(&mut self, g: &mut Graph, p: &[Var], input: Var, mode: Mode, rng: &mut SynthRng) -> GeneratorOutput {
        // Every layer sees the input and all earlier activations.
        let mut features = vec![input];
        for (lin, bn) in &mut self.hidden {
            let x = g.concat_cols(&features);
            let a = lin.forward(g, p, x);
            let b = bn.forward(g, p, a, mode);
            features.push(g.relu(b));
        }
        let h = g.concat_cols(&features);
        let mut samples = Vec::new();
        let mut logps = Vec::new();
        for head in &self.heads {
            let logits = head.forward(g, p, h);
            logps.push(g.log_softmax(logits));
            samples.push(gumbel_softmax(g, logits, self.temperature, rng));
        }
        GeneratorOutput {
            sample: g.concat_cols(&samples),
            log_probs: g.concat_cols(&logps),
        }
    }

    /// Generates one record per condition in evaluation mode.
    pub fn generate(&mut self, index: &FrequencyIndex, conds: &[CondVector], rng: &mut SynthRng) -> Array2<f64> {
        let z = sample_noise(self.noise(), conds.len(), rng);
        let c = cond_matrix(index, conds);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let zv = g.leaf(z);
        let cv = g.leaf(c);
        let input = g.concat_cols(&[zv, cv]);
        let out = self.run(&mut g, &p, input, Mode::Eval, rng);
        g.value(out.sample).clone()
    }
}

/// Critic over pacs: `pac_size` records (each with its condition) are
/// concatenated into one input row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacCritic {
    pub params: ParamSet,
    pub pac_size: usize,
    pub record_dim: usize,
    pub layers: Vec<Linear>,
    pub slope: f64,
    pub dropout_rate: f64,
}

pub fn build_pac_critic(config: &CtganConfig, record_dim: usize, rng: &mut SynthRng) -> Result<PacCritic> {
    if config.pac_size == 0 || record_dim == 0 {
        return Err(Error::Config("pac_size and record_dim must be positive".into()));
    }
    let mut params = ParamSet::new();
    let mut widths = vec![config.pac_size * record_dim];
    widths.extend(&config.critic_dims);
    widths.push(1);
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| Linear::new(&mut params, &format!("critic.{i}"), w[0], w[1], rng))
        .collect();
    Ok(PacCritic {
        params,
        pac_size: config.pac_size,
        record_dim,
        layers,
        slope: config.leaky_relu_slope,
        dropout_rate: config.dropout_rate,
    })
}

impl PacCritic {
    /// Reshapes `m × record_dim` records into `m/pac × pac·record_dim`.
    pub fn pack(&self, g: &mut Graph, records: Var) -> Result<Var> {
        let (m, w) = g.shape(records);
        if w != self.record_dim {
            return Err(Error::Contract(format!(
                "records have width {w}, expected {}",
                self.record_dim
            )));
        }
        if m % self.pac_size != 0 {
            return Err(Error::Contract(format!(
                "batch of {m} is not divisible by pac size {}",
                self.pac_size
            )));
        }
        Ok(g.reshape(records, (m / self.pac_size, self.pac_size * w)))
    }

    /// Scores a batch of records, one score per pac.
    pub fn score(&self, records: &Array2<f64>, mode: Mode, rng: &mut SynthRng) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.leaf(records.clone());
        let packed = self.pack(&mut g, x)?;
        let mut critic = self.clone();
        let mut ctx = Ctx::new(mode, rng);
        let out = critic.forward(&mut g, &p, packed, &mut ctx);
        Ok(g.value(out).clone())
    }
}

impl Differentiable for PacCritic {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    /// `x` is already packed.
    fn forward(&mut self, g: &mut Graph, p: &[Var], x: Var, ctx: &mut Ctx<'_>) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h);
            if i < last {
                h = g.leaky_relu(h, self.slope);
                h = dropout(g, h, self.dropout_rate, ctx.mode, ctx.rng);
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtganModels {
    pub generator: CtganGenerator,
    pub critic: PacCritic,
    pub index: FrequencyIndex,
}

pub fn build_models(config: &CtganTrainConfig, index: FrequencyIndex, layout: &EncodingLayout) -> Result<CtganModels> {
    let mut rng = SynthRng::seed_from_u64(config.engine.seed ^ 0x6374_6761_6e5f_6900);
    let generator = build_ctgan_generator(&config.model, layout, &mut rng)?;
    let critic = build_pac_critic(&config.model, layout.total_dim + index.cond_dim, &mut rng)?;
    Ok(CtganModels {
        generator,
        critic,
        index,
    })
}

/// Mean over rows of `−log p(chosen value)` for the conditioned column.
pub fn conditioning_loss(g: &mut Graph, log_probs: Var, cond: &Array2<f64>) -> Var {
    let m = cond.nrows() as f64;
    let mask = g.leaf(cond.clone());
    let picked = g.mul(log_probs, mask);
    let total = g.sum(picked);
    g.scale(total, -1.0 / m)
}

struct CtganTask<'a> {
    models: CtganModels,
    config: &'a CtganTrainConfig,
    data: &'a Array2<f64>,
}

impl CtganTask<'_> {
    fn sample_conditions(&self, m: usize, rng: &mut SynthRng) -> Vec<CondVector> {
        (0..m).map(|_| sample_condition(&self.models.index, rng)).collect()
    }

    fn fake(
        &mut self,
        g: &mut Graph,
        gp: &[Var],
        cond: &Array2<f64>,
        mode: Mode,
        rng: &mut SynthRng,
    ) -> GeneratorOutput {
        let z = sample_noise(self.models.generator.noise(), cond.nrows(), rng);
        let zv = g.leaf(z);
        let cv = g.leaf(cond.clone());
        let input = g.concat_cols(&[zv, cv]);
        self.models.generator.run(g, gp, input, mode, rng)
    }
}

impl WganTask for CtganTask<'_> {
    type Models = CtganModels;

    fn models(&self) -> &CtganModels {
        &self.models
    }
    fn models_mut(&mut self) -> &mut CtganModels {
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
        let conds = self.sample_conditions(m, rng);
        let rows = conds
            .iter()
            .map(|&c| sample_matching_real(&self.models.index, c, rng))
            .collect::<Result<Vec<_>>>()?;
        let cond = cond_matrix(&self.models.index, &conds);
        let real = g.leaf(self.data.select(Axis(0), &rows));
        let gp = self.models.generator.params.bind(g);
        let fake = self.fake(g, &gp, &cond, Mode::Train, rng).sample;
        let fake = g.detach(fake);
        let cv = g.leaf(cond);
        let real_rec = g.concat_cols(&[real, cv]);
        let fake_rec = g.concat_cols(&[fake, cv]);
        // Pacs are interpolated as whole rows of the packed matrix.
        let real_pac = self.models.critic.pack(g, real_rec)?;
        let fake_pac = self.models.critic.pack(g, fake_rec)?;
        let cp = self.models.critic.params.bind(g);
        let mut ctx = Ctx::new(Mode::Train, rng);
        let loss = critic_loss(
            g,
            &mut self.models.critic,
            &cp,
            real_pac,
            fake_pac,
            self.config.engine.lambda_gp,
            &mut ctx,
        )?;
        Ok(Objective {
            loss: loss.total,
            params: cp,
        })
    }

    fn generator_objective(&mut self, g: &mut Graph, rng: &mut SynthRng) -> Result<Objective> {
        let m = self.config.engine.minibatch_size;
        let conds = self.sample_conditions(m, rng);
        let cond = cond_matrix(&self.models.index, &conds);
        let gp = self.models.generator.params.bind(g);
        let out = self.fake(g, &gp, &cond, Mode::Train, rng);
        let cv = g.leaf(cond.clone());
        let rec = g.concat_cols(&[out.sample, cv]);
        let pac = self.models.critic.pack(g, rec)?;
        let cp = self.models.critic.params.bind(g);
        let mut ctx = Ctx::new(Mode::Train, rng);
        let adversarial = generator_loss(g, &mut self.models.critic, &cp, pac, &mut ctx);
        let ce = conditioning_loss(g, out.log_probs, &cond);
        let ce = g.scale(ce, self.config.model.conditioning_weight);
        let loss = g.add(adversarial, ce);
        Ok(Objective { loss, params: gp })
    }
}

/// Trains on an encoded all-categorical matrix.
pub fn train_ctgan(
    data: &EncodedMatrix,
    config: &CtganTrainConfig,
    resume: Option<Checkpoint<CtganModels>>,
    hooks: &mut dyn TrainHooks<CtganModels>,
) -> Result<(CtganModels, TrainerState)> {
    config.validate()?;
    let index = build_frequency_index_encoded(data)?;
    let engine = WganGpConfig {
        total_iterations: config.iterations_for(data.n_rows()),
        ..config.engine.clone()
    };
    let (mut models, mut state) = match resume {
        Some(ckpt) => (ckpt.models, ckpt.state),
        None => (
            build_models(config, index.clone(), &data.layout)?,
            TrainerState::new(&engine),
        ),
    };
    if models.generator.layout != data.layout {
        return Err(Error::Config("checkpoint layout does not match the data".into()));
    }
    models.index.rows = index.rows;
    let mut task = CtganTask {
        models,
        config,
        data: &data.values,
    };
    let run_config = serde_json::to_value(config)?;
    train(MODEL_KIND, &engine, &run_config, &mut task, &mut state, hooks)?;
    Ok((task.models, state))
}

/// Generates `count` records one condition at a time (batched), decoded by
/// argmax.
pub fn synthesize_ctgan(
    models: &mut CtganModels,
    schema: &DatasetSchema,
    count: usize,
    rng: &mut SynthRng,
) -> Result<RawTable> {
    const CHUNK: usize = 8192;
    let layout = models.generator.layout.clone();
    let mut values = Array2::zeros((count, layout.total_dim));
    let mut start = 0;
    while start < count {
        let n = CHUNK.min(count - start);
        let conds: Vec<CondVector> = (0..n).map(|_| sample_condition(&models.index, rng)).collect();
        let block = models.generator.generate(&models.index, &conds, rng);
        values.slice_mut(s![start..start + n, ..]).assign(&block);
        start += n;
    }
    decode(&EncodedMatrix { values, layout }, schema)
}

/// Fraction of generated records whose conditioned column takes the
/// conditioned value.
pub fn conditioning_accuracy(models: &mut CtganModels, count: usize, rng: &mut SynthRng) -> f64 {
    let conds: Vec<CondVector> = (0..count).map(|_| sample_condition(&models.index, rng)).collect();
    let out = models.generator.generate(&models.index, &conds, rng);
    let hits = conds
        .iter()
        .enumerate()
        .filter(|(i, c)| {
            let col = &models.index.columns[c.column];
            let row = out.slice(s![*i, col.offset..col.offset + col.width()]);
            argmax(row) == c.value
        })
        .count();
    hits as f64 / count.max(1) as f64
}
