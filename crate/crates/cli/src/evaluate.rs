//! `evaluate`: compare a synthetic table against the real one and write the
//! report tables.

use std::path::PathBuf;

use anyhow::Result;

use ratesynth::eval::report::evaluate;
use ratesynth::schema::DatasetSchema;

use crate::config::RunConfig;
use crate::exit::DataError;
use crate::run::{load_with_schema, Manifest, RunLayout};

#[derive(Clone, Debug, Default, clap::Args)]
pub struct EvaluateArgs {
    /// Real table (default: the prepared data of the run).
    #[arg(long)]
    pub real: Option<PathBuf>,
    /// Synthetic table (default: synthetic/synthetic.csv of the run).
    #[arg(long = "synthetic")]
    pub synthetic: Option<PathBuf>,
    /// Schema both tables follow (default: the prepared schema).
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Report directory (default: evaluation/ in the run directory).
    #[arg(long = "out")]
    pub out: Option<PathBuf>,
    /// Name of the synthetic source in the report (default: the model).
    #[arg(long)]
    pub label: Option<String>,
    /// Refit replications, replacing evaluate.replications.
    #[arg(long)]
    pub replications: Option<usize>,
    /// Skip the GLM refit protocol.
    #[arg(long)]
    pub no_refit: bool,
}

pub fn run(config: &RunConfig, args: &EvaluateArgs) -> Result<()> {
    let layout = RunLayout::new(config.output_dir());
    let schema_path = args.schema.clone().unwrap_or_else(|| layout.schema());
    let real_path = args.real.clone().unwrap_or_else(|| layout.filtered_csv());
    let synth_path = args.synthetic.clone().unwrap_or_else(|| layout.synthetic_csv());
    let out = args.out.clone().unwrap_or_else(|| layout.evaluation_dir());
    for p in [&schema_path, &real_path, &synth_path] {
        if !p.exists() {
            return Err(DataError(format!("`{}` does not exist", p.display())).into());
        }
    }
    let schema = DatasetSchema::load(&schema_path)?;
    let real = load_with_schema(&real_path, &schema)?;
    let synth = load_with_schema(&synth_path, &schema)?;

    let mut options = config.evaluate.clone();
    if let Some(r) = args.replications {
        options.replications = r;
    }
    let label = args.label.clone().unwrap_or_else(|| config.model.as_str().to_string());
    let (report, refit_error) = match evaluate(&label, &real, &synth, &schema, (!args.no_refit).then_some(&options)) {
        Ok(report) => (report, None),
        Err(e @ ratesynth::Error::Evaluation(_)) if !args.no_refit => {
            (evaluate(&label, &real, &synth, &schema, None)?, Some(e))
        }
        Err(e) => return Err(e.into()),
    };
    report.write(&out)?;

    let mut manifest = Manifest::new("evaluate", config);
    manifest.input("schema", &schema_path)?;
    manifest.input("real_data", &real_path)?;
    manifest.input("synthetic_data", &synth_path)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(&out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n != "manifest.json") && p.is_file())
        .collect();
    files.sort();
    for f in &files {
        let role = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        manifest.output(&role, f)?;
    }
    let max_tv = report.univariate.iter().map(|c| c.tv).fold(0.0, f64::max);
    manifest.summary = serde_json::json!({
        "label": label,
        "max_univariate_tv": max_tv,
        "refit": report.refit.as_ref().map(|r| serde_json::json!({
            "mae_x1000": r.errors.mae_cell(),
            "mse_x1000": r.errors.mse_cell(),
        })),
    });
    manifest.write(&out.join("manifest.json"))?;

    println!("{label}: largest univariate TV distance {max_tv:.6}");
    if let Some(r) = &report.refit {
        println!(
            "{label}: MAE×1000 {}  MSE×1000 {}",
            r.errors.mae_cell(),
            r.errors.mse_cell()
        );
    }
    println!("report written to `{}`", out.display());
    match refit_error {
        Some(e) => Err(anyhow::Error::from(e).context("the refit protocol failed; the other tables were written")),
        None => Ok(()),
    }
}
