//! `accountant`: privacy spent by a subsampled Gaussian mechanism, or the
//! noise multiplier a target ε needs.

use anyhow::Result;
use serde::Serialize;

use ratesynth::accountant::{default_orders, rdp_of_subsampled_gaussian, rdp_to_epsilon, solve_sigma, DEFAULT_DELTA};

use crate::exit::ConfigError;

#[derive(Clone, Debug, clap::Args)]
pub struct AccountantArgs {
    /// Poisson sampling rate q of each step.
    #[arg(long)]
    pub sampling_rate: f64,
    /// Number of noisy steps.
    #[arg(long)]
    pub steps: u64,
    /// Noise multiplier σ; reports the ε it spends.
    #[arg(long, conflicts_with = "epsilon", required_unless_present = "epsilon")]
    pub noise_multiplier: Option<f64>,
    /// Target ε; reports the smallest σ that meets it.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Target δ.
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    pub delta: f64,
}

#[derive(Serialize)]
struct AccountantReport {
    sampling_rate: f64,
    steps: u64,
    delta: f64,
    noise_multiplier: f64,
    epsilon: f64,
    /// Rényi order at which the conversion to (ε, δ) was tightest.
    order: f64,
}

pub fn run(args: &AccountantArgs) -> Result<()> {
    if !(args.delta > 0.0 && args.delta < 1.0) {
        return Err(ConfigError("delta must lie in (0, 1)".into()).into());
    }
    let orders = default_orders();
    let sigma = match (args.noise_multiplier, args.epsilon) {
        (Some(s), _) => s,
        (None, Some(eps)) => solve_sigma(eps, args.steps, args.sampling_rate, args.delta, &orders)?.sigma,
        (None, None) => return Err(ConfigError("give --noise-multiplier or --epsilon".into()).into()),
    };
    let rdp: Vec<f64> = rdp_of_subsampled_gaussian(args.sampling_rate, sigma, &orders)?
        .into_iter()
        .map(|r| r * args.steps as f64)
        .collect();
    let (epsilon, order) = rdp_to_epsilon(&orders, &rdp, args.delta)?;
    let report = AccountantReport {
        sampling_rate: args.sampling_rate,
        steps: args.steps,
        delta: args.delta,
        noise_multiplier: sigma,
        epsilon,
        order,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
