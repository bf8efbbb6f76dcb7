//! `standin`: write a synthetic table in the layout of the claim-frequency
//! data, for running the pipeline when the real file is unavailable.

use std::path::PathBuf;

use anyhow::{Context, Result};
use rand::SeedableRng;

use ratesynth::nn::SynthRng;
use ratesynth::standin::{fremtpl_standin, FREMTPL_ROWS_OVER_CAP, FREMTPL_ROWS_WITHIN_CAP};

#[derive(Clone, Debug, clap::Args)]
pub struct StandinArgs {
    /// Output CSV.
    #[arg(long = "out")]
    pub out: PathBuf,
    /// Rows with exposure at most 1.
    #[arg(long, default_value_t = FREMTPL_ROWS_WITHIN_CAP)]
    pub within_cap: usize,
    /// Rows with exposure above 1.
    #[arg(long, default_value_t = FREMTPL_ROWS_OVER_CAP)]
    pub over_cap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(args: &StandinArgs) -> Result<()> {
    let table = fremtpl_standin(args.within_cap, args.over_cap, &mut SynthRng::seed_from_u64(args.seed));
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create `{}`", dir.display()))?;
    }
    table.write_csv(&args.out)?;
    println!("wrote {} stand-in rows to `{}`", table.n_rows(), args.out.display());
    Ok(())
}
