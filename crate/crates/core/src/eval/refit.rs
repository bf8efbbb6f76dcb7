//! The refit protocol: a GLM fitted on synthetic data is compared with one
//! fitted on real data through their predictions on held-out real rows.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::glm::{fit_with_design, GlmDesign, GlmFit, GlmOptions};
use super::{median, percentile};
use crate::error::{Error, Result};
use crate::nn::SynthRng;
use crate::schema::DatasetSchema;
use crate::table::{split_indices, RawTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefitOptions {
    pub replications: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub glm: GlmOptions,
}

impl Default for RefitOptions {
    fn default() -> Self {
        Self {
            replications: 5000,
            train_fraction: 0.7,
            seed: 0,
            glm: GlmOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionErrorReport {
    /// Median over replications of the per-replication median `|Δ|`.
    pub mae_median: f64,
    pub mae_ci95: (f64, f64),
    /// Median over replications of the per-replication mean `Δ²`.
    pub mse_mean: f64,
    pub mse_ci95: (f64, f64),
    pub replications: usize,
    pub failed_replications: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientComparison {
    pub term: String,
    pub real: f64,
    /// Average over successful replications.
    pub synthetic_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefitReport {
    pub reference: GlmFit,
    pub coefficients: Vec<CoefficientComparison>,
    pub errors: PredictionErrorReport,
    /// Per-replication `(mae, mse)` of successful replications, in order.
    pub per_replication: Vec<(f64, f64)>,
}

/// `"5.0 (4.68, 5.44)"`-style cell for a metric scaled by 1000.
pub fn format_table1_cell(point: f64, ci: (f64, f64)) -> String {
    format!("{:.1} ({:.2}, {:.2})", point * 1000.0, ci.0 * 1000.0, ci.1 * 1000.0)
}

impl PredictionErrorReport {
    pub fn mae_cell(&self) -> String {
        format_table1_cell(self.mae_median, self.mae_ci95)
    }

    pub fn mse_cell(&self) -> String {
        format_table1_cell(self.mse_mean, self.mse_ci95)
    }
}

/// Generator for replication `index`, independent of scheduling.
pub fn replication_rng(seed: u64, index: usize) -> SynthRng {
    let mut rng = SynthRng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

struct Replication {
    mae: f64,
    mse: f64,
    coefficients: Vec<Option<f64>>,
}

/// Runs the protocol: one reference fit on the real training split, then
/// `replications` fits on fresh synthetic subsamples of the same
/// proportion, each scored on the real test split.
pub fn refit_protocol(
    real: &RawTable,
    synth: &RawTable,
    schema: &DatasetSchema,
    options: &RefitOptions,
) -> Result<RefitReport> {
    if options.replications == 0 {
        return Err(Error::Evaluation("replications must be >= 1".into()));
    }
    if !(options.train_fraction > 0.0 && options.train_fraction < 1.0) {
        return Err(Error::Evaluation("train_fraction must lie in (0, 1)".into()));
    }
    let design = GlmDesign::from_schema(schema, &options.glm);
    let mut split_rng = SynthRng::seed_from_u64(options.seed);
    let (train_idx, test_idx) = split_indices(real.n_rows(), options.train_fraction, &mut split_rng);
    let train = real.select_rows(&train_idx);
    let test = real.select_rows(&test_idx);
    if test.n_rows() == 0 {
        return Err(Error::Evaluation("real test split is empty".into()));
    }
    let reference = fit_with_design(&train, &design, &options.glm)?;
    let reference_pred = reference.predict(&test)?;

    let synth_n = ((synth.n_rows() as f64) * options.train_fraction).round() as usize;
    if synth_n == 0 {
        return Err(Error::Evaluation("synthetic table is too small to subsample".into()));
    }

    let results: Vec<Option<Replication>> = (0..options.replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = replication_rng(options.seed, r);
            let idx = sample_indices(&mut rng, synth.n_rows(), synth_n).into_vec();
            let sample = synth.select_rows(&idx);
            let fit = fit_with_design(&sample, &design, &options.glm).ok()?;
            let pred = fit.predict(&test).ok()?;
            let delta = &pred - &reference_pred;
            if delta.iter().any(|d| !d.is_finite()) {
                return None;
            }
            let abs: Vec<f64> = delta.iter().map(|d| d.abs()).collect();
            Some(Replication {
                mae: median(&abs),
                mse: delta.mapv(|d| d * d).mean().unwrap_or(0.0),
                coefficients: fit.coefficients.iter().map(|c| c.estimate).collect(),
            })
        })
        .collect();

    let failed = results.iter().filter(|r| r.is_none()).count();
    if failed as f64 > 0.01 * options.replications as f64 {
        return Err(Error::Evaluation(format!(
            "{failed} of {} replications failed to fit",
            options.replications
        )));
    }
    let ok: Vec<Replication> = results.into_iter().flatten().collect();
    let maes: Vec<f64> = ok.iter().map(|r| r.mae).collect();
    let mses: Vec<f64> = ok.iter().map(|r| r.mse).collect();

    let mut coefficients = Vec::new();
    for (j, c) in reference.coefficients.iter().enumerate() {
        let Some(real_value) = c.estimate else { continue };
        let values: Vec<f64> = ok.iter().filter_map(|r| r.coefficients[j]).collect();
        if values.len() < ok.len() {
            // Dropped on some synthetic fits, so excluded from both sides.
            continue;
        }
        coefficients.push(CoefficientComparison {
            term: c.term.clone(),
            real: real_value,
            synthetic_mean: values.iter().sum::<f64>() / values.len() as f64,
        });
    }

    let errors = PredictionErrorReport {
        mae_median: median(&maes),
        mae_ci95: (percentile(&maes, 2.5), percentile(&maes, 97.5)),
        mse_mean: median(&mses),
        mse_ci95: (percentile(&mses, 2.5), percentile(&mses, 97.5)),
        replications: options.replications,
        failed_replications: failed,
    };
    Ok(RefitReport {
        reference,
        coefficients,
        errors,
        per_replication: maes.into_iter().zip(mses).collect(),
    })
}
