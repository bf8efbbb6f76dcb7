//! `train`: fit the selected synthesizer on the prepared data, writing
//! resumable checkpoints, the loss history and (for private runs) the
//! privacy ledger.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use ratesynth::codec::encode;
use ratesynth::ctgan::{train_ctgan, CtganModels};
use ratesynth::mc_wgan::{train_mc, McModels};
use ratesynth::mncdp::{calibrate_noise, train_mncdp, AutoencoderRecord, MncdpModels};
use ratesynth::schema::DatasetSchema;
use ratesynth::wgan::{write_loss_history, Checkpoint, LossRecord, TrainHooks, TrainerState, CHECKPOINT_FORMAT};

use crate::config::{ModelKind, RunConfig};
use crate::exit::{ConfigError, DataError};
use crate::run::{load_with_schema, write_json, Manifest, RunLayout};

/// Saves every checkpoint over the previous one and keeps the loss history
/// file in step with it.
struct FileHooks {
    latest: PathBuf,
    history: PathBuf,
    log_every: usize,
}

impl<M: Serialize + DeserializeOwned> TrainHooks<M> for FileHooks {
    fn on_checkpoint(&mut self, checkpoint: &Checkpoint<M>) -> ratesynth::Result<()> {
        let tmp = self.latest.with_extension("tmp");
        checkpoint.save(&tmp)?;
        std::fs::rename(&tmp, &self.latest)?;
        let tmp = self.history.with_extension("tmp");
        write_loss_history(&tmp, &checkpoint.state.history)?;
        std::fs::rename(&tmp, &self.history)?;
        log::info!("checkpoint at iteration {}", checkpoint.iteration);
        Ok(())
    }

    fn on_iteration(&mut self, record: &LossRecord) {
        if (record.iteration + 1) % self.log_every == 0 {
            log::info!(
                "iteration {}: critic {:.6} generator {:.6}",
                record.iteration + 1,
                record.critic_loss,
                record.generator_loss
            );
        }
    }
}

/// Loads `path` as a checkpoint of `kind`.
pub fn load_checkpoint<M: DeserializeOwned>(path: &Path, kind: &str) -> Result<Checkpoint<M>> {
    if !path.exists() {
        return Err(DataError(format!("no checkpoint at `{}`; run `train` first", path.display())).into());
    }
    let raw = Checkpoint::<serde_json::Value>::load(path)
        .with_context(|| format!("cannot read checkpoint `{}`", path.display()))?;
    if raw.model_kind != kind {
        return Err(ConfigError(format!(
            "checkpoint `{}` holds a {} model, but the run selects {kind}",
            path.display(),
            raw.model_kind
        ))
        .into());
    }
    let models: M = serde_json::from_value(raw.models)
        .with_context(|| format!("checkpoint `{}` does not hold a valid {kind} model", path.display()))?;
    Ok(Checkpoint {
        format: raw.format,
        model_kind: raw.model_kind,
        config: raw.config,
        iteration: raw.iteration,
        models,
        state: raw.state,
    })
}

fn final_checkpoint<M>(kind: &str, config: serde_json::Value, models: M, state: TrainerState) -> Checkpoint<M> {
    Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        model_kind: kind.to_string(),
        config,
        iteration: state.iteration,
        models,
        state,
    }
}

fn write_autoencoder_history(path: &Path, history: &[AutoencoderRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "train_loss", "validation_loss", "learning_rate"])?;
    for r in history {
        w.write_record([
            r.iteration.to_string(),
            r.train_loss.to_string(),
            r.validation_loss.to_string(),
            r.learning_rate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Loads the prepared table and its schema.
pub fn load_prepared(config: &RunConfig, layout: &RunLayout) -> Result<(DatasetSchema, ratesynth::table::RawTable)> {
    if !layout.schema().exists() {
        return Err(DataError(format!(
            "no prepared data under `{}`; run `prepare` first",
            layout.prepared_dir().display()
        ))
        .into());
    }
    let schema = DatasetSchema::load(layout.schema())?;
    if schema.configuration != config.configuration {
        return Err(ConfigError(format!(
            "data were prepared for configuration `{}`, but the run selects `{}`",
            schema.configuration.as_str(),
            config.configuration.as_str()
        ))
        .into());
    }
    let table = load_with_schema(&layout.filtered_csv(), &schema)?;
    Ok((schema, table))
}

pub fn run(config: &RunConfig, resume: bool) -> Result<()> {
    let layout = RunLayout::new(config.output_dir());
    let (schema, table) = load_prepared(config, &layout)?;
    let data = encode(&table, &schema)?;
    std::fs::create_dir_all(layout.train_dir())?;

    let mut manifest = Manifest::new("train", config);
    manifest.input("schema", &layout.schema())?;
    manifest.input("prepared_data", &layout.filtered_csv())?;
    if resume && layout.latest_checkpoint().exists() {
        manifest.input("resumed_checkpoint", &layout.latest_checkpoint())?;
    }

    let mut hooks = FileHooks {
        latest: layout.latest_checkpoint(),
        history: layout.loss_history(),
        log_every: (config.total_iterations() / 20).max(1),
    };
    let kind = config.model.as_str();
    let resume_path = layout.latest_checkpoint();
    let mut summary = serde_json::Map::new();
    summary.insert("model".into(), kind.into());
    summary.insert("rows".into(), data.n_rows().into());
    summary.insert("encoded_width".into(), data.layout.total_dim.into());

    let iteration = match config.model {
        ModelKind::McWganGp => {
            let start = resume
                .then(|| load_checkpoint::<McModels>(&resume_path, kind))
                .transpose()?;
            let (models, state) = train_mc(&data, &config.mc_wgan_gp, start, &mut hooks)?;
            let ckpt = final_checkpoint(kind, serde_json::to_value(&config.mc_wgan_gp)?, models, state);
            ckpt.save(layout.final_checkpoint())?;
            write_loss_history(layout.loss_history(), &ckpt.state.history)?;
            ckpt.iteration
        }
        ModelKind::Ctgan => {
            let start = resume
                .then(|| load_checkpoint::<CtganModels>(&resume_path, kind))
                .transpose()?;
            let (models, state) = train_ctgan(&data, &config.ctgan, start, &mut hooks)?;
            let ckpt = final_checkpoint(kind, serde_json::to_value(&config.ctgan)?, models, state);
            ckpt.save(layout.final_checkpoint())?;
            write_loss_history(layout.loss_history(), &ckpt.state.history)?;
            ckpt.iteration
        }
        ModelKind::Mncdp => {
            let (resolved, solution) = calibrate_noise(&config.mncdp, data.n_rows())?;
            if let Some(sol) = &solution {
                println!(
                    "noise multiplier σ = {:.6} planned for ε = {:.6}",
                    sol.sigma, sol.epsilon
                );
            }
            let start = resume
                .then(|| load_checkpoint::<MncdpModels>(&resume_path, kind))
                .transpose()?;
            let (models, state) = train_mncdp(&data, &config.mncdp, start, &mut hooks)?;
            write_autoencoder_history(&layout.autoencoder_history(), &models.autoencoder_history)?;
            manifest.output("autoencoder_history", &layout.autoencoder_history())?;
            summary.insert(
                "noise_multiplier".into(),
                serde_json::json!(resolved.dp.enabled.then_some(resolved.dp.noise_multiplier)),
            );
            if let Some(ledger) = &models.ledger {
                write_json(&layout.privacy_ledger(), ledger)?;
                manifest.output("privacy_ledger", &layout.privacy_ledger())?;
                summary.insert("epsilon".into(), ledger.computed_epsilon.into());
                summary.insert("delta".into(), ledger.target_delta.into());
                println!(
                    "privacy spent: ε = {:.6} at δ = {}",
                    ledger.computed_epsilon, ledger.target_delta
                );
            } else {
                summary.insert("epsilon".into(), serde_json::Value::Null);
            }
            let ckpt = final_checkpoint(kind, serde_json::to_value(&resolved)?, models, state);
            ckpt.save(layout.final_checkpoint())?;
            write_loss_history(layout.loss_history(), &ckpt.state.history)?;
            ckpt.iteration
        }
    };

    manifest.output("final_checkpoint", &layout.final_checkpoint())?;
    manifest.output("loss_history", &layout.loss_history())?;
    summary.insert("final_iteration".into(), iteration.into());
    manifest.summary = serde_json::Value::Object(summary);
    manifest.write(&layout.train_manifest())?;
    println!(
        "trained {kind} to iteration {iteration}; final checkpoint `{}`",
        layout.final_checkpoint().display()
    );
    Ok(())
}
