//! `synthesize`: draw a synthetic table from a trained checkpoint.

use std::path::PathBuf;

use anyhow::{Context, Result};
use rand::SeedableRng;
use serde::Serialize;

use ratesynth::ctgan::{synthesize_ctgan, CtganModels};
use ratesynth::mc_wgan::{synthesize as synthesize_mc, McModels, SynthesisMode};
use ratesynth::mncdp::{synthesize_mncdp, MncdpModels};
use ratesynth::nn::SynthRng;
use ratesynth::schema::DatasetSchema;

use crate::config::{ModelKind, RunConfig};
use crate::exit::DataError;
use crate::run::{write_json, FileRecord, Manifest, RunLayout};
use crate::train::load_checkpoint;

/// Stream of the run seed reserved for synthesis, so sampling never
/// replays the training noise.
const SYNTHESIS_STREAM: u64 = 0x5379_6e74;

#[derive(Clone, Debug, Default, clap::Args)]
pub struct SynthesizeArgs {
    /// Checkpoint to sample from (default: the run's final checkpoint).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Rows to generate (default: the prepared row count).
    #[arg(long)]
    pub count: Option<usize>,
    /// Output CSV (default: synthetic/synthetic.csv in the run directory).
    #[arg(long = "out")]
    pub out: Option<PathBuf>,
}

/// Sidecar written next to every synthetic CSV.
#[derive(Serialize)]
struct SynthesisMetadata {
    model: String,
    configuration: String,
    seed: u64,
    rows: usize,
    mode: Option<SynthesisMode>,
    checkpoint: FileRecord,
    checkpoint_iteration: usize,
    differentially_private: bool,
    /// Spent privacy; absent for non-private models (`ε = ∞`).
    epsilon: Option<f64>,
    delta: Option<f64>,
    noise_multiplier: Option<f64>,
}

pub fn run(config: &RunConfig, args: &SynthesizeArgs) -> Result<()> {
    let layout = RunLayout::new(config.output_dir());
    if !layout.schema().exists() {
        return Err(DataError(format!(
            "no prepared schema at `{}`; run `prepare` first",
            layout.schema().display()
        ))
        .into());
    }
    let schema = DatasetSchema::load(layout.schema())?;
    let checkpoint = args.checkpoint.clone().unwrap_or_else(|| layout.final_checkpoint());
    let count = match args.count.or(config.synthesize.count) {
        Some(n) => n,
        None => crate::prepare::retained_rows(&layout)?,
    };
    let out = args.out.clone().unwrap_or_else(|| layout.synthetic_csv());
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create `{}`", dir.display()))?;
    }

    let mut rng = SynthRng::seed_from_u64(config.seed);
    rng.set_stream(SYNTHESIS_STREAM);
    let kind = config.model.as_str();
    let (table, iteration, mode, ledger) = match config.model {
        ModelKind::McWganGp => {
            let mut ckpt = load_checkpoint::<McModels>(&checkpoint, kind)?;
            let mode = config.synthesize.mode;
            let table = synthesize_mc(&mut ckpt.models.generator, &schema, count, &mut rng, mode)?;
            (table, ckpt.iteration, Some(mode), None)
        }
        ModelKind::Ctgan => {
            let mut ckpt = load_checkpoint::<CtganModels>(&checkpoint, kind)?;
            let table = synthesize_ctgan(&mut ckpt.models, &schema, count, &mut rng)?;
            (table, ckpt.iteration, None, None)
        }
        ModelKind::Mncdp => {
            let ckpt = load_checkpoint::<MncdpModels>(&checkpoint, kind)?;
            let table = synthesize_mncdp(&ckpt.models, &schema, count, &mut rng)?;
            let sigma = ckpt
                .models
                .ledger
                .as_ref()
                .and_then(|l| l.phases.last().map(|p| p.noise_multiplier));
            let ledger = ckpt.models.ledger.map(|l| (l.computed_epsilon, l.target_delta, sigma));
            (table, ckpt.iteration, None, ledger)
        }
    };
    table.write_csv(&out)?;

    let meta = SynthesisMetadata {
        model: kind.to_string(),
        configuration: config.configuration.as_str().to_string(),
        seed: config.seed,
        rows: table.n_rows(),
        mode,
        checkpoint: FileRecord::of("checkpoint", &checkpoint)?,
        checkpoint_iteration: iteration,
        differentially_private: ledger.is_some(),
        epsilon: ledger.map(|l| l.0),
        delta: ledger.map(|l| l.1),
        noise_multiplier: ledger.and_then(|l| l.2),
    };
    let meta_path = out.with_extension("metadata.json");
    write_json(&meta_path, &meta)?;

    let mut manifest = Manifest::new("synthesize", config);
    manifest.input("checkpoint", &checkpoint)?;
    manifest.input("schema", &layout.schema())?;
    manifest.output("synthetic_data", &out)?;
    manifest.output("metadata", &meta_path)?;
    manifest.summary = serde_json::json!({ "rows": table.n_rows(), "epsilon": meta.epsilon, "delta": meta.delta });
    manifest.write(&out.with_extension("manifest.json"))?;

    match meta.epsilon {
        Some(eps) => println!(
            "wrote {} rows to `{}` (ε = {eps:.6}, δ = {})",
            table.n_rows(),
            out.display(),
            meta.delta.unwrap_or_default()
        ),
        None => println!("wrote {} rows to `{}`", table.n_rows(), out.display()),
    }
    Ok(())
}
