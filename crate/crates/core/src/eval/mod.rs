//! Comparison of a synthetic table against the real one: univariate
//! distributions, category-frequency scatter data, per-group claim
//! probabilities, and the Poisson-GLM refit protocol.

pub mod glm;
pub mod refit;
pub mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{apply_binning, bin_label, DatasetSchema, VariableSpec};
use crate::table::{ColumnData, RawTable, CLAIM_NB};

pub use glm::{fit_poisson_glm, GlmDesign, GlmFit, GlmOptions};
pub use refit::{format_table1_cell, refit_protocol, PredictionErrorReport, RefitOptions, RefitReport};

/// Number of equal-width bins for numeric histograms.
pub const HISTOGRAM_BINS: usize = 50;

/// Half the L1 distance between two distributions on the same support.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions must share a support");
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Pearson correlation; `NaN` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Proportion of `values` at each of `levels`; values outside `levels` are
/// counted in the denominator only.
pub fn level_frequencies(values: &[String], levels: &[String]) -> Vec<f64> {
    let index: BTreeMap<&str, usize> = levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut counts = vec![0.0; levels.len()];
    for v in values {
        if let Some(&i) = index.get(v.as_str()) {
            counts[i] += 1.0;
        }
    }
    let n = values.len().max(1) as f64;
    counts.iter().map(|c| c / n).collect()
}

/// Proportions of `real` and `synth` in `bins` equal-width bins over their
/// pooled range, with bin labels `[lo,hi)`.
pub fn pooled_histograms(real: &[f64], synth: &[f64], bins: usize) -> (Vec<String>, Vec<f64>, Vec<f64>) {
    let (lo, hi) = real
        .iter()
        .chain(synth)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() || hi <= lo {
        let label = if lo.is_finite() {
            format!("[{lo},{lo}]")
        } else {
            "empty".into()
        };
        let share = |v: &[f64]| if v.is_empty() { 0.0 } else { 1.0 };
        return (vec![label], vec![share(real)], vec![share(synth)]);
    }
    let width = (hi - lo) / bins as f64;
    let index = |v: f64| (((v - lo) / width) as usize).min(bins - 1);
    let hist = |values: &[f64]| {
        let mut h = vec![0.0; bins];
        for &v in values {
            h[index(v)] += 1.0;
        }
        let n = values.len().max(1) as f64;
        h.iter().map(|c| c / n).collect::<Vec<f64>>()
    };
    let labels = (0..bins)
        .map(|i| format!("[{},{})", lo + i as f64 * width, lo + (i + 1) as f64 * width))
        .collect();
    (labels, hist(real), hist(synth))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonKind {
    Categorical,
    Numeric,
}

/// Real and synthetic distribution of one variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableComparison {
    pub variable: String,
    pub kind: ComparisonKind,
    pub labels: Vec<String>,
    pub real: Vec<f64>,
    pub synthetic: Vec<f64>,
    pub tv: f64,
}

fn check_conforms(table: &RawTable, schema: &DatasetSchema, side: &str) -> Result<()> {
    for var in &schema.variables {
        let column = table
            .column(&var.name)
            .map_err(|_| Error::Contract(format!("{side} table lacks variable `{}`", var.name)))?;
        let numeric = matches!(column.data, ColumnData::Numeric(_));
        if numeric != var.raw_is_numeric() {
            return Err(Error::Contract(format!(
                "{side} column `{}` has the wrong type for the schema",
                var.name
            )));
        }
    }
    Ok(())
}

/// Level labels of a categorical or binned variable and the label of
/// every cell of its column.
fn categorical_view(table: &RawTable, var: &VariableSpec) -> Result<Option<(Vec<String>, Vec<String>)>> {
    if !var.raw_is_numeric() {
        return Ok(Some((var.levels.clone(), table.categorical(&var.name)?.to_vec())));
    }
    match &var.binning {
        Some(rule) => {
            let cells = table
                .numeric(&var.name)?
                .iter()
                .map(|&v| apply_binning(v, rule).map(bin_label))
                .collect::<Result<Vec<_>>>()?;
            Ok(Some((var.levels.clone(), cells)))
        }
        None => Ok(None),
    }
}

/// Per-variable comparison: level frequencies for categoricals and
/// [`HISTOGRAM_BINS`]-bin pooled histograms for raw numerics, each with
/// its total-variation distance.
pub fn univariate_report(real: &RawTable, synth: &RawTable, schema: &DatasetSchema) -> Result<Vec<VariableComparison>> {
    check_conforms(real, schema, "real")?;
    check_conforms(synth, schema, "synthetic")?;
    schema
        .variables
        .iter()
        .map(|var| {
            if var.raw_is_numeric() {
                let (labels, r, s) =
                    pooled_histograms(real.numeric(&var.name)?, synth.numeric(&var.name)?, HISTOGRAM_BINS);
                let tv = tv_distance(&r, &s);
                Ok(VariableComparison {
                    variable: var.name.clone(),
                    kind: ComparisonKind::Numeric,
                    labels,
                    real: r,
                    synthetic: s,
                    tv,
                })
            } else {
                let r = level_frequencies(real.categorical(&var.name)?, &var.levels);
                let s = level_frequencies(synth.categorical(&var.name)?, &var.levels);
                let tv = tv_distance(&r, &s);
                Ok(VariableComparison {
                    variable: var.name.clone(),
                    kind: ComparisonKind::Categorical,
                    labels: var.levels.clone(),
                    real: r,
                    synthetic: s,
                    tv,
                })
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupFrequency {
    pub variable: String,
    pub level: String,
    pub real_frequency: f64,
    pub synthetic_frequency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupFrequencyTable {
    pub rows: Vec<GroupFrequency>,
    /// Pearson correlation of the `(real, synthetic)` frequency pairs.
    pub correlation: f64,
}

/// Category frequencies of `variables` on both sides. Binned numeric
/// variables are compared on their bins.
pub fn frequency_scatter(
    real: &RawTable,
    synth: &RawTable,
    schema: &DatasetSchema,
    variables: &[&str],
) -> Result<GroupFrequencyTable> {
    let mut rows = Vec::new();
    for &name in variables {
        let var = schema
            .variable(name)
            .ok_or_else(|| Error::Contract(format!("unknown variable `{name}`")))?;
        let (levels, real_cells) = categorical_view(real, var)?
            .ok_or_else(|| Error::Contract(format!("variable `{name}` is not categorical")))?;
        let (_, synth_cells) = categorical_view(synth, var)?.expect("same spec on both sides");
        let r = level_frequencies(&real_cells, &levels);
        let s = level_frequencies(&synth_cells, &levels);
        for (i, level) in levels.iter().enumerate() {
            rows.push(GroupFrequency {
                variable: name.to_string(),
                level: level.clone(),
                real_frequency: r[i],
                synthetic_frequency: s[i],
            });
        }
    }
    let x: Vec<f64> = rows.iter().map(|r| r.real_frequency).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.synthetic_frequency).collect();
    let correlation = pearson(&x, &y);
    Ok(GroupFrequencyTable { rows, correlation })
}

/// Categorical (or binned) variables of `schema` other than the target.
pub fn grouping_variables(schema: &DatasetSchema) -> Vec<&str> {
    schema
        .variables
        .iter()
        .filter(|v| !v.raw_is_numeric() || v.binning.is_some())
        .filter(|v| Some(v.name.as_str()) != schema.target_name.as_deref() && v.name != CLAIM_NB)
        .map(|v| v.name.as_str())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaimProbability {
    pub variable: String,
    pub level: String,
    /// `None` when the real group is empty.
    pub real_p_claim: Option<f64>,
    pub real_group_size: usize,
    pub synthetic_p_claim: Option<f64>,
    pub synthetic_group_size: usize,
    pub synthetic_group_share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaimProbabilityTable {
    pub rows: Vec<ClaimProbability>,
}

fn has_claim(label: &str) -> Result<bool> {
    label
        .trim()
        .parse::<f64>()
        .map(|v| v >= 1.0)
        .map_err(|_| Error::Evaluation(format!("ClaimNb value `{label}` is not a count")))
}

fn claim_flags(table: &RawTable) -> Result<Vec<bool>> {
    match &table.column(CLAIM_NB)?.data {
        ColumnData::Categorical(v) => v.iter().map(|s| has_claim(s)).collect(),
        ColumnData::Numeric(v) => Ok(v.iter().map(|&x| x >= 1.0).collect()),
    }
}

/// `P(ClaimNb ≥ 1)` within every level of every grouping variable.
pub fn claim_probability_table(
    real: &RawTable,
    synth: &RawTable,
    schema: &DatasetSchema,
) -> Result<ClaimProbabilityTable> {
    let real_claims = claim_flags(real)?;
    let synth_claims = claim_flags(synth)?;
    let mut rows = Vec::new();
    for name in grouping_variables(schema) {
        let var = schema.variable(name).expect("listed from the schema");
        let (levels, real_cells) = categorical_view(real, var)?.expect("grouping variables are categorical");
        let (_, synth_cells) = categorical_view(synth, var)?.expect("grouping variables are categorical");
        fn tally(cells: &[String], claims: &[bool]) -> BTreeMap<String, (usize, usize)> {
            let mut t: BTreeMap<String, (usize, usize)> = BTreeMap::new();
            for (c, &k) in cells.iter().zip(claims) {
                let e = t.entry(c.clone()).or_default();
                e.0 += 1;
                e.1 += k as usize;
            }
            t
        }
        let rt = tally(&real_cells, &real_claims);
        let st = tally(&synth_cells, &synth_claims);
        let n_synth = synth_cells.len().max(1) as f64;
        for level in &levels {
            let (rn, rk) = rt.get(level.as_str()).copied().unwrap_or((0, 0));
            let (sn, sk) = st.get(level.as_str()).copied().unwrap_or((0, 0));
            rows.push(ClaimProbability {
                variable: name.to_string(),
                level: level.clone(),
                real_p_claim: (rn > 0).then(|| rk as f64 / rn as f64),
                real_group_size: rn,
                synthetic_p_claim: (sn > 0).then(|| sk as f64 / sn as f64),
                synthetic_group_size: sn,
                synthetic_group_share: sn as f64 / n_synth,
            });
        }
    }
    Ok(ClaimProbabilityTable { rows })
}

/// Linear-interpolation percentile (`p` in `[0, 100]`) of unsorted data.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (rank - lo as f64) * (v[hi] - v[lo])
}

pub fn median(values: &[f64]) -> f64 {
    percentile(values, 50.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::Column;

    fn cat(name: &str, values: &[&str]) -> Column {
        Column {
            name: name.into(),
            data: ColumnData::Categorical(values.iter().map(|s| s.to_string()).collect()),
        }
    }

    fn gas_schema() -> DatasetSchema {
        DatasetSchema {
            configuration: crate::schema::Configuration::Baseline,
            target_name: Some(CLAIM_NB.into()),
            variables: vec![
                VariableSpec::categorical(
                    CLAIM_NB,
                    crate::schema::CLAIM_LEVELS.iter().map(|s| s.to_string()).collect(),
                ),
                VariableSpec::categorical("Gas", vec!["D".into(), "R".into()]),
            ],
        }
    }

    fn gas_table(claims: &[&str], gas: &[&str]) -> RawTable {
        RawTable::new(vec![cat(CLAIM_NB, claims), cat("Gas", gas)]).unwrap()
    }

    fn gas_tv(real: &RawTable, synth: &RawTable) -> f64 {
        let report = univariate_report(real, synth, &gas_schema()).unwrap();
        report.iter().find(|c| c.variable == "Gas").unwrap().tv
    }

    #[test]
    fn tv_hand_cases() {
        let real = gas_table(&["0"; 4], &["D", "D", "D", "R"]);
        let half = gas_table(&["0"; 4], &["D", "R", "D", "R"]);
        assert_eq!(gas_tv(&real, &real), 0.0);
        assert_eq!(gas_tv(&real, &half), 0.25);
        let all_d = gas_table(&["0"; 2], &["D", "D"]);
        let all_r = gas_table(&["0"; 2], &["R", "R"]);
        assert_eq!(gas_tv(&all_d, &all_r), 1.0);
    }

    #[test]
    fn schema_mismatch_is_a_contract_error() {
        let t = RawTable::new(vec![cat("Gas", &["D"])]).unwrap();
        assert!(matches!(
            univariate_report(&t, &t, &gas_schema()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn numeric_histograms_pool_the_range() {
        let (labels, r, s) = pooled_histograms(&[0.0, 1.0], &[0.5, 0.5], 2);
        assert_eq!(labels.len(), 2);
        assert_eq!(r, vec![0.5, 0.5]);
        assert_eq!(s, vec![0.0, 1.0]);
        assert_eq!(tv_distance(&r, &s), 0.5);
    }

    #[test]
    fn scatter_counts_and_identity() {
        let real = gas_table(&["0"; 4], &["D", "D", "D", "R"]);
        let shuffled = gas_table(&["0"; 4], &["R", "D", "D", "D"]);
        let t = frequency_scatter(&real, &shuffled, &gas_schema(), &["Gas"]).unwrap();
        assert_eq!(t.rows[0].real_frequency, 0.75);
        assert_eq!(t.rows[1].synthetic_frequency, 0.25);
        assert!((t.correlation - 1.0).abs() < 1e-12);
    }

    #[test]
    fn claim_probabilities_by_hand() {
        let t = gas_table(&["0", "1", "2"], &["D", "D", "R"]);
        let c = claim_probability_table(&t, &t, &gas_schema()).unwrap();
        assert_eq!(c.rows.len(), 2);
        assert_eq!(c.rows[0].real_p_claim, Some(0.5));
        assert_eq!(c.rows[1].real_p_claim, Some(1.0));
        assert_eq!(c.rows[0].synthetic_group_share, 2.0 / 3.0);

        let none = gas_table(&["0", "0"], &["D", "D"]);
        let c = claim_probability_table(&none, &none, &gas_schema()).unwrap();
        assert_eq!(c.rows[0].real_p_claim, Some(0.0));
        assert_eq!(c.rows[1].real_p_claim, None);
        assert_eq!(c.rows[1].real_group_size, 0);
    }

    #[test]
    fn percentiles_interpolate() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert_eq!(median(&v), 2.5);
        assert!((percentile(&v, 2.5) - 1.075).abs() < 1e-12);
    }
}
