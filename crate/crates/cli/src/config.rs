//! The run configuration: a TOML document with one section per concern,
//! merged over model defaults and then patched by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use ratesynth::ctgan::CtganTrainConfig;
use ratesynth::eval::refit::RefitOptions;
use ratesynth::mc_wgan::{McTrainConfig, SynthesisMode};
use ratesynth::mncdp::{DpConfig, MncdpConfig};
use ratesynth::schema::Configuration;
use ratesynth::table::{ColumnKind, FREMTPL_COLUMNS};

use crate::exit::ConfigError;

/// Environment variable naming the directory relative output paths live in.
pub const OUTPUT_ROOT_ENV: &str = "RATESYNTH_OUTPUT_ROOT";

/// Which synthesizer a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    #[value(name = "mc_wgan_gp")]
    McWganGp,
    Ctgan,
    Mncdp,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::McWganGp => ratesynth::mc_wgan::MODEL_KIND,
            ModelKind::Ctgan => ratesynth::ctgan::MODEL_KIND,
            ModelKind::Mncdp => ratesynth::mncdp::MODEL_KIND,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Raw claim-frequency CSV read by `prepare`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Run directory. Relative paths are resolved against the output root.
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: None,
            output: PathBuf::from("ratesynth-run"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    /// Rows with a larger exposure are dropped.
    pub exposure_cap: f64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self { exposure_cap: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesizeConfig {
    /// Rows to generate; defaults to the prepared row count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    /// Level selection for MC-WGAN-GP output blocks.
    pub mode: SynthesisMode,
}

impl Default for SynthesizeConfig {
    fn default() -> Self {
        Self {
            count: None,
            mode: SynthesisMode::Hard,
        }
    }
}

/// Everything one run needs. The seed drives every engine, the refit
/// protocol and synthesis, overriding seeds inside model sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub configuration: Configuration,
    pub seed: u64,
    pub paths: Paths,
    pub prepare: PrepareConfig,
    pub dp: DpConfig,
    pub mc_wgan_gp: McTrainConfig,
    pub ctgan: CtganTrainConfig,
    pub mncdp: MncdpConfig,
    pub synthesize: SynthesizeConfig,
    pub evaluate: RefitOptions,
}

impl RunConfig {
    /// Defaults for a model and variable configuration.
    pub fn defaults(model: ModelKind, configuration: Configuration) -> Self {
        Self {
            model,
            configuration,
            seed: 0,
            paths: Paths::default(),
            prepare: PrepareConfig::default(),
            dp: DpConfig::default(),
            mc_wgan_gp: McTrainConfig::default(),
            ctgan: CtganTrainConfig::default(),
            mncdp: MncdpConfig::for_configuration(configuration),
            synthesize: SynthesizeConfig::default(),
            evaluate: RefitOptions::default(),
        }
    }

    /// Reads `path` (if any), applies `overrides` and checks the invariants.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError(format!("cannot read config `{}`: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| ConfigError(format!("invalid config `{}`: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        if doc.get("mncdp").and_then(|m| m.get("dp")).is_some() {
            return Err(ConfigError("privacy settings belong in the top-level [dp] section".into()).into());
        }
        overrides.apply(&mut doc)?;
        Self::from_document(doc)
    }

    fn from_document(doc: toml::Table) -> Result<Self> {
        let mut probe = toml::Table::new();
        for key in ["model", "configuration"] {
            if let Some(v) = doc.get(key) {
                probe.insert(key.into(), v.clone());
            }
        }
        #[derive(Deserialize)]
        struct Head {
            #[serde(default)]
            model: ModelKind,
            #[serde(default)]
            configuration: Configuration,
        }
        let head: Head = probe
            .try_into()
            .map_err(|e| ConfigError(format!("invalid config: {e}")))?;

        let defaults = Self::defaults(head.model, head.configuration);
        let mut merged = toml::Table::try_from(&defaults).context("serializing default configuration")?;
        merge(&mut merged, doc);
        let mut config: RunConfig = merged
            .try_into()
            .map_err(|e| ConfigError(format!("invalid config: {e}")))?;
        config.propagate();
        config.validate()?;
        Ok(config)
    }

    /// Copies the shared seed and privacy settings into the model sections.
    fn propagate(&mut self) {
        self.mc_wgan_gp.engine.seed = self.seed;
        self.ctgan.engine.seed = self.seed;
        self.mncdp.engine.seed = self.seed;
        self.mncdp.dp = self.dp.clone();
        self.evaluate.seed = self.seed;
    }

    fn validate(&self) -> Result<()> {
        if self.model == ModelKind::Ctgan && !all_categorical(self.configuration) {
            return Err(ConfigError(format!(
                "ctgan needs every variable categorical; configuration `{}` leaves numeric columns (use `bin`)",
                self.configuration.as_str()
            ))
            .into());
        }
        if self.dp.enabled && self.model != ModelKind::Mncdp {
            return Err(ConfigError(format!(
                "differential privacy is only available for mncdp, not {}",
                self.model.as_str()
            ))
            .into());
        }
        if self.dp.target_epsilon.is_some() && !self.dp.enabled {
            return Err(ConfigError("dp.target_epsilon is set but dp.enabled is false".into()).into());
        }
        if !(self.prepare.exposure_cap > 0.0) {
            return Err(ConfigError("prepare.exposure_cap must be > 0".into()).into());
        }
        Ok(())
    }

    /// The run directory, resolved against `RATESYNTH_OUTPUT_ROOT` when
    /// relative.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.paths.output, std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
    }

    /// The configuration as a TOML document.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Engine iteration budget of the selected model.
    pub fn total_iterations(&self) -> usize {
        match self.model {
            ModelKind::McWganGp => self.mc_wgan_gp.engine.total_iterations,
            ModelKind::Ctgan => self.ctgan.engine.total_iterations,
            ModelKind::Mncdp => self.mncdp.engine.total_iterations,
        }
    }
}

/// True when the configuration bins every numeric column of the claim table.
pub fn all_categorical(configuration: Configuration) -> bool {
    let binned = configuration.binned_variables();
    FREMTPL_COLUMNS
        .iter()
        .filter(|(_, kind)| *kind == ColumnKind::Numeric)
        .all(|(name, _)| binned.contains(name))
}

fn resolve_output(output: &Path, root: Option<PathBuf>) -> PathBuf {
    match root {
        Some(root) if output.is_relative() => root.join(output),
        _ => output.to_path_buf(),
    }
}

/// Recursively overlays `over` onto `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

/// Values given on the command line; each one replaces the file value.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Synthesizer to train.
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Variable configuration: baseline, all_cat or bin.
    #[arg(long)]
    pub configuration: Option<String>,
    /// Seed for every random stream of the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Raw input CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Training iterations of the selected model.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Enables differential privacy with this target ε.
    #[arg(long)]
    pub epsilon: Option<f64>,
}

impl Overrides {
    fn apply(&self, doc: &mut toml::Table) -> Result<()> {
        if let Some(m) = self.model {
            doc.insert("model".into(), m.as_str().into());
        }
        if let Some(c) = &self.configuration {
            let c: Configuration = c.parse().map_err(|e: ratesynth::Error| ConfigError(e.to_string()))?;
            doc.insert("configuration".into(), c.as_str().into());
        }
        if let Some(s) = self.seed {
            let s = i64::try_from(s).map_err(|_| ConfigError("seed must be below 2^63".into()))?;
            doc.insert("seed".into(), s.into());
        }
        if let Some(p) = &self.data {
            table_at(doc, &["paths"]).insert("data".into(), p.display().to_string().into());
        }
        if let Some(p) = &self.output {
            table_at(doc, &["paths"]).insert("output".into(), p.display().to_string().into());
        }
        if let Some(eps) = self.epsilon {
            let dp = table_at(doc, &["dp"]);
            dp.insert("enabled".into(), true.into());
            dp.insert("target_epsilon".into(), eps.into());
        }
        if let Some(n) = self.iterations {
            let model = match doc.get("model").and_then(|v| v.as_str()) {
                Some(m) => m.to_string(),
                None => ModelKind::default().as_str().to_string(),
            };
            let n = i64::try_from(n).map_err(|_| ConfigError("iterations out of range".into()))?;
            table_at(doc, &[model.as_str(), "engine"]).insert("total_iterations".into(), n.into());
        }
        Ok(())
    }
}

/// The table at `path`, created on the way if missing.
fn table_at<'a>(doc: &'a mut toml::Table, path: &[&str]) -> &'a mut toml::Table {
    let mut cur = doc;
    for key in path {
        let entry = cur
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if !entry.is_table() {
            *entry = toml::Value::Table(toml::Table::new());
        }
        cur = entry.as_table_mut().expect("just made a table");
    }
    cur
}
