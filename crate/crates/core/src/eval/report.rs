//! The full evaluation of one synthetic table and its on-disk form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::refit::{refit_protocol, RefitOptions, RefitReport};
use super::{
    claim_probability_table, frequency_scatter, grouping_variables, univariate_report, ClaimProbabilityTable,
    ComparisonKind, GroupFrequencyTable, VariableComparison,
};
use crate::error::Result;
use crate::schema::DatasetSchema;
use crate::table::{RawTable, CLAIM_NB};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub label: String,
    pub real_rows: usize,
    pub synthetic_rows: usize,
    pub univariate: Vec<VariableComparison>,
    pub frequency_scatter: GroupFrequencyTable,
    pub claim_probability: Option<ClaimProbabilityTable>,
    pub refit: Option<RefitReport>,
}

/// Runs every comparison. The claim-probability table and the refit
/// protocol need a `ClaimNb` column; `refit = None` skips the protocol.
pub fn evaluate(
    label: &str,
    real: &RawTable,
    synth: &RawTable,
    schema: &DatasetSchema,
    refit: Option<&RefitOptions>,
) -> Result<EvaluationReport> {
    let univariate = univariate_report(real, synth, schema)?;
    let mut scatter_vars = grouping_variables(schema);
    if schema.variable(CLAIM_NB).is_some_and(|v| !v.raw_is_numeric()) {
        scatter_vars.insert(0, CLAIM_NB);
    }
    let frequency_scatter = frequency_scatter(real, synth, schema, &scatter_vars)?;
    let has_claims = schema.variable(CLAIM_NB).is_some();
    let claim_probability = if has_claims {
        Some(claim_probability_table(real, synth, schema)?)
    } else {
        None
    };
    let refit = match refit {
        Some(opts) if has_claims => Some(refit_protocol(real, synth, schema, opts)?),
        _ => None,
    };
    Ok(EvaluationReport {
        label: label.to_string(),
        real_rows: real.n_rows(),
        synthetic_rows: synth.n_rows(),
        univariate,
        frequency_scatter,
        claim_probability,
        refit,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvaluationReport {
    /// Writes `report.json` and one CSV per table into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)? + "\n")?;

        let mut w = csv::Writer::from_path(dir.join("univariate.csv"))?;
        w.write_record(["variable", "kind", "bin", "real", "synthetic"])?;
        for c in &self.univariate {
            let kind = match c.kind {
                ComparisonKind::Categorical => "categorical",
                ComparisonKind::Numeric => "numeric",
            };
            for (i, label) in c.labels.iter().enumerate() {
                w.write_record([
                    c.variable.as_str(),
                    kind,
                    label.as_str(),
                    &c.real[i].to_string(),
                    &c.synthetic[i].to_string(),
                ])?;
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("univariate_tv.csv"))?;
        w.write_record(["variable", "tv"])?;
        for c in &self.univariate {
            w.write_record([c.variable.as_str(), &c.tv.to_string()])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("frequency_scatter.csv"))?;
        w.write_record(["variable", "level", "real_frequency", "synthetic_frequency"])?;
        for r in &self.frequency_scatter.rows {
            w.write_record([
                r.variable.as_str(),
                r.level.as_str(),
                &r.real_frequency.to_string(),
                &r.synthetic_frequency.to_string(),
            ])?;
        }
        w.flush()?;

        if let Some(table) = &self.claim_probability {
            let mut w = csv::Writer::from_path(dir.join("claim_probability.csv"))?;
            w.write_record([
                "variable",
                "level",
                "real_p_claim",
                "real_group_size",
                "synthetic_p_claim",
                "synthetic_group_size",
                "synthetic_group_share",
            ])?;
            for r in &table.rows {
                w.write_record([
                    r.variable.as_str(),
                    r.level.as_str(),
                    &opt(r.real_p_claim),
                    &r.real_group_size.to_string(),
                    &opt(r.synthetic_p_claim),
                    &r.synthetic_group_size.to_string(),
                    &r.synthetic_group_share.to_string(),
                ])?;
            }
            w.flush()?;
        }

        if let Some(refit) = &self.refit {
            let mut w = csv::Writer::from_path(dir.join("coefficients.csv"))?;
            w.write_record(["term", "real", "synthetic_mean"])?;
            for c in &refit.coefficients {
                w.write_record([c.term.as_str(), &c.real.to_string(), &c.synthetic_mean.to_string()])?;
            }
            w.flush()?;

            let mut w = csv::Writer::from_path(dir.join("table1.csv"))?;
            w.write_record(["model", "mae_x1000", "mse_x1000"])?;
            w.write_record([self.label.as_str(), &refit.errors.mae_cell(), &refit.errors.mse_cell()])?;
            w.flush()?;

            let mut w = csv::Writer::from_path(dir.join("refit_replications.csv"))?;
            w.write_record(["replication", "mae", "mse"])?;
            for (i, (mae, mse)) in refit.per_replication.iter().enumerate() {
                w.write_record([i.to_string(), mae.to_string(), mse.to_string()])?;
            }
            w.flush()?;
        }
        Ok(())
    }
}
