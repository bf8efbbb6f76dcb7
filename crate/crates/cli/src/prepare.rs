//! `prepare`: filter the raw table, fit the schema and write the splits.

use anyhow::{Context, Result};
use rand::SeedableRng;
use serde::Serialize;

use ratesynth::nn::SynthRng;
use ratesynth::schema::{default_binning_rules, infer_schema};
use ratesynth::table::{filter_exposure, load_raw_dataset, split_indices, FREMTPL_COLUMNS};

use crate::config::RunConfig;
use crate::exit::ConfigError;
use crate::run::{thousands, write_json, Manifest, RunLayout};

/// Row indices of the real train/test split the refit protocol uses.
#[derive(Serialize)]
struct SplitManifest {
    purpose: &'static str,
    seed: u64,
    train_fraction: f64,
    train_rows: Vec<usize>,
    test_rows: Vec<usize>,
}

pub fn run(config: &RunConfig) -> Result<()> {
    let data = config
        .paths
        .data
        .as_deref()
        .ok_or_else(|| ConfigError("the raw data path is required (paths.data or --data)".into()))?;
    let raw = load_raw_dataset(data, &FREMTPL_COLUMNS).with_context(|| format!("cannot load `{}`", data.display()))?;
    let filtered = filter_exposure(&raw, config.prepare.exposure_cap)?;
    let table = filtered.table;
    let schema = infer_schema(&table, config.configuration, &default_binning_rules())?;

    let layout = RunLayout::new(config.output_dir());
    std::fs::create_dir_all(layout.prepared_dir())
        .with_context(|| format!("cannot create `{}`", layout.prepared_dir().display()))?;
    schema.save(layout.schema())?;
    table.write_csv(layout.filtered_csv())?;

    let mut rng = SynthRng::seed_from_u64(config.evaluate.seed);
    let (train_rows, test_rows) = split_indices(table.n_rows(), config.evaluate.train_fraction, &mut rng);
    write_json(
        &layout.splits(),
        &SplitManifest {
            purpose: "refit reference split of the prepared rows",
            seed: config.evaluate.seed,
            train_fraction: config.evaluate.train_fraction,
            train_rows,
            test_rows,
        },
    )?;

    let mut manifest = Manifest::new("prepare", config);
    manifest.input("raw_data", data)?;
    manifest.output("schema", &layout.schema())?;
    manifest.output("prepared_data", &layout.filtered_csv())?;
    manifest.output("splits", &layout.splits())?;
    manifest.summary = serde_json::json!({
        "input_rows": raw.n_rows(),
        "removed_rows": filtered.removed,
        "retained_rows": table.n_rows(),
        "exposure_cap": config.prepare.exposure_cap,
    });
    manifest.write(&layout.prepare_manifest())?;

    println!(
        "{} rows removed, {} retained",
        thousands(filtered.removed),
        thousands(table.n_rows())
    );
    Ok(())
}

/// Row count recorded by `prepare`.
pub fn retained_rows(layout: &RunLayout) -> Result<usize> {
    let manifest: Manifest = crate::run::read_json(&layout.prepare_manifest())?;
    manifest.summary["retained_rows"]
        .as_u64()
        .map(|n| n as usize)
        .context("prepare manifest lacks retained_rows")
}
