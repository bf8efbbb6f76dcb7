//! Dataset schema: variable kinds, categorical levels, numeric ranges and
//! binning rules, plus schema inference for the three feature
//! configurations.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{ColumnData, RawTable, CLAIM_NB};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    Categorical,
    Numeric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinningKind {
    ExplicitEdges,
    Quantile,
    SpecialValuePlusQuantile,
    MonthlyExposure,
    LogDecile,
}

/// How a numeric variable is discretized.
///
/// Quantile-based kinds start without edges and are fitted on training
/// values with [`BinningRule::fit`]. Edges of log-scale rules are stored in
/// log space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinningRule {
    pub kind: BinningKind,
    #[serde(default)]
    pub edges: Vec<f64>,
    #[serde(default)]
    pub n_quantiles: usize,
    #[serde(default)]
    pub special_values: Vec<f64>,
    #[serde(default)]
    pub log_scale: bool,
}

/// One bin of a fitted rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bin {
    Special(f64),
    /// `[lo, hi)` in the rule's (possibly logarithmic) scale.
    Interval(f64, f64),
}

impl BinningRule {
    pub fn explicit(edges: Vec<f64>) -> Self {
        Self {
            kind: BinningKind::ExplicitEdges,
            edges,
            n_quantiles: 0,
            special_values: Vec::new(),
            log_scale: false,
        }
    }

    pub fn quantile(n_quantiles: usize) -> Self {
        Self {
            kind: BinningKind::Quantile,
            edges: Vec::new(),
            n_quantiles,
            special_values: Vec::new(),
            log_scale: false,
        }
    }

    pub fn special_plus_quantile(special_values: Vec<f64>, n_quantiles: usize) -> Self {
        Self {
            kind: BinningKind::SpecialValuePlusQuantile,
            edges: Vec::new(),
            n_quantiles,
            special_values,
            log_scale: false,
        }
    }

    /// Twelve monthly intervals on `[0, 1]` plus a singleton bin for a full
    /// year of exposure.
    pub fn monthly_exposure() -> Self {
        Self {
            kind: BinningKind::MonthlyExposure,
            edges: (0..=12).map(|k| k as f64 / 12.0).collect(),
            n_quantiles: 0,
            special_values: vec![1.0],
            log_scale: false,
        }
    }

    /// Deciles of the natural logarithm.
    pub fn log_decile() -> Self {
        Self {
            kind: BinningKind::LogDecile,
            edges: Vec::new(),
            n_quantiles: 10,
            special_values: Vec::new(),
            log_scale: true,
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.edges.len() >= 2
    }

    fn transform(&self, x: f64) -> f64 {
        if self.log_scale {
            x.ln()
        } else {
            x
        }
    }

    fn inverse(&self, t: f64) -> f64 {
        if self.log_scale {
            t.exp()
        } else {
            t
        }
    }

    /// Completes the rule from training values: computes quantile edges
    /// where required and replaces infinite explicit edges by the observed
    /// extremes.
    pub fn fit(&self, values: &[f64]) -> Result<BinningRule> {
        let mut rule = self.clone();
        let regular: Vec<f64> = values
            .iter()
            .copied()
            .filter(|v| !self.special_values.contains(v))
            .map(|v| self.transform(v))
            .filter(|v| v.is_finite())
            .collect();
        match self.kind {
            BinningKind::ExplicitEdges | BinningKind::MonthlyExposure => {
                if self.edges.len() < 2 {
                    return Err(Error::Config("explicit binning needs at least two edges".into()));
                }
                let lo = regular.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = regular.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let k = rule.edges.len();
                if rule.edges[0].is_infinite() {
                    rule.edges[0] = if lo < rule.edges[1] { lo } else { rule.edges[1] - 1.0 };
                }
                if rule.edges[k - 1].is_infinite() {
                    rule.edges[k - 1] = if hi > rule.edges[k - 2] {
                        hi
                    } else {
                        rule.edges[k - 2] + 1.0
                    };
                }
            }
            BinningKind::Quantile | BinningKind::SpecialValuePlusQuantile | BinningKind::LogDecile => {
                if self.n_quantiles == 0 {
                    return Err(Error::Config("quantile binning needs n_quantiles >= 1".into()));
                }
                if regular.is_empty() {
                    return Err(Error::Config("quantile binning needs at least one value".into()));
                }
                let mut sorted = regular;
                sorted.sort_by(f64::total_cmp);
                let mut edges: Vec<f64> = (0..=self.n_quantiles)
                    .map(|k| quantile_sorted(&sorted, k as f64 / self.n_quantiles as f64))
                    .collect();
                edges.dedup_by(|a, b| a == b);
                if edges.len() == 1 {
                    let v = edges[0];
                    edges = vec![v - 0.5, v + 0.5];
                }
                rule.edges = edges;
            }
        }
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_fitted() {
            return Err(Error::Config(format!(
                "{:?} binning rule has not been fitted",
                self.kind
            )));
        }
        if self.edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("bin edges must be strictly increasing".into()));
        }
        let specials: BTreeSet<u64> = self.special_values.iter().map(|v| v.to_bits()).collect();
        if specials.len() != self.special_values.len() {
            return Err(Error::Config("duplicate special values".into()));
        }
        Ok(())
    }

    /// Bins in index order: intervals in ascending order, with each
    /// singleton placed by its value (before an interval starting at the
    /// same point).
    pub fn bins(&self) -> Vec<Bin> {
        let n_intervals = self.edges.len().saturating_sub(1);
        let mut keyed: Vec<(f64, u8, Bin)> = Vec::with_capacity(n_intervals + self.special_values.len());
        for &s in &self.special_values {
            keyed.push((self.transform(s), 0, Bin::Special(s)));
        }
        for i in 0..n_intervals {
            keyed.push((self.edges[i], 1, Bin::Interval(self.edges[i], self.edges[i + 1])));
        }
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        keyed.into_iter().map(|(_, _, b)| b).collect()
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len().saturating_sub(1) + self.special_values.len()
    }

    /// Numeric value that stands for a bin when decoding: the special value
    /// itself, or the interval midpoint (in the rule's scale).
    pub fn representative(&self, bin: usize) -> f64 {
        match self.bins()[bin] {
            Bin::Special(v) => v,
            Bin::Interval(lo, hi) => self.inverse(0.5 * (lo + hi)),
        }
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Index of the bin containing `value`. Values outside the edge range are
/// clamped to the end intervals.
pub fn apply_binning(value: f64, rule: &BinningRule) -> Result<usize> {
    if !rule.is_fitted() {
        return Err(Error::Config("binning rule has not been fitted".into()));
    }
    if value.is_nan() {
        return Err(Error::Domain("cannot bin NaN".into()));
    }
    let bins = rule.bins();
    if let Some(pos) = bins.iter().position(|b| matches!(b, Bin::Special(s) if *s == value)) {
        return Ok(pos);
    }
    let t = rule.transform(value);
    let interior = &rule.edges[1..rule.edges.len() - 1];
    let interval = interior.partition_point(|&e| e <= t);
    let mut seen = 0;
    for (i, b) in bins.iter().enumerate() {
        if let Bin::Interval(..) = b {
            if seen == interval {
                return Ok(i);
            }
            seen += 1;
        }
    }
    unreachable!("interval index within range")
}

/// Label of bin `i`; zero-padded so that lexicographic order is bin order.
pub fn bin_label(i: usize) -> String {
    format!("bin{i:02}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<String>,
    /// Observed `(min, max)` of the raw values for numeric or binned
    /// variables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_range: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binning: Option<BinningRule>,
}

impl VariableSpec {
    pub fn categorical(name: impl Into<String>, levels: Vec<String>) -> Self {
        Self {
            name: name.into(),
            kind: VariableKind::Categorical,
            levels,
            value_range: None,
            binning: None,
        }
    }

    pub fn numeric(name: impl Into<String>, min: f64, max: f64) -> Self {
        Self {
            name: name.into(),
            kind: VariableKind::Numeric,
            levels: Vec::new(),
            value_range: Some((min, max)),
            binning: None,
        }
    }

    /// True when raw values are numbers (plain numeric or binned numeric).
    pub fn raw_is_numeric(&self) -> bool {
        self.kind == VariableKind::Numeric || self.binning.is_some()
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_index(&self, label: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == label)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            VariableKind::Categorical => {
                if self.levels.is_empty() {
                    return Err(Error::Config(format!("variable `{}` has no levels", self.name)));
                }
                let unique: BTreeSet<&String> = self.levels.iter().collect();
                if unique.len() != self.levels.len() {
                    return Err(Error::Config(format!("variable `{}` has duplicate levels", self.name)));
                }
                if let Some(rule) = &self.binning {
                    rule.validate()?;
                    if rule.n_bins() != self.levels.len() {
                        return Err(Error::Config(format!(
                            "variable `{}` has {} levels but {} bins",
                            self.name,
                            self.levels.len(),
                            rule.n_bins()
                        )));
                    }
                }
            }
            VariableKind::Numeric => match self.value_range {
                Some((lo, hi)) if lo < hi => {}
                _ => {
                    return Err(Error::Config(format!(
                        "numeric variable `{}` needs a range with min < max",
                        self.name
                    )))
                }
            },
        }
        Ok(())
    }
}

/// Which numeric variables are discretized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Configuration {
    #[default]
    Baseline,
    AllCat,
    Bin,
}

impl Configuration {
    pub fn binned_variables(self) -> &'static [&'static str] {
        match self {
            Configuration::Baseline => &[],
            Configuration::AllCat => &["Exposure", "Density"],
            Configuration::Bin => &["DriverAge", "CarAge", "Exposure", "Density"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Configuration::Baseline => "baseline",
            Configuration::AllCat => "all_cat",
            Configuration::Bin => "bin",
        }
    }
}

impl std::str::FromStr for Configuration {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Configuration::Baseline),
            "all_cat" | "all-cat" => Ok(Configuration::AllCat),
            "bin" => Ok(Configuration::Bin),
            other => Err(Error::Config(format!("unknown configuration `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub configuration: Configuration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_name: Option<String>,
    pub variables: Vec<VariableSpec>,
}

/// Levels of the claim-count target.
pub const CLAIM_LEVELS: [&str; 5] = ["0", "1", "2", "3", "4"];

/// Default rules for the four numeric MTPL variables.
///
/// DriverAge edges are a stand-in: ten bins, narrower at young ages.
pub fn default_binning_rules() -> BTreeMap<String, BinningRule> {
    let mut rules = BTreeMap::new();
    rules.insert(
        "DriverAge".to_string(),
        BinningRule::explicit(vec![
            18.0,
            21.0,
            24.0,
            27.0,
            30.0,
            35.0,
            41.0,
            48.0,
            57.0,
            68.0,
            f64::INFINITY,
        ]),
    );
    rules.insert("CarAge".to_string(), BinningRule::special_plus_quantile(vec![0.0], 10));
    rules.insert("Exposure".to_string(), BinningRule::monthly_exposure());
    rules.insert("Density".to_string(), BinningRule::log_decile());
    rules
}

impl DatasetSchema {
    pub fn variable(&self, name: &str) -> Option<&VariableSpec> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn variable_names(&self) -> Vec<&str> {
        self.variables.iter().map(|v| v.name.as_str()).collect()
    }

    pub fn categorical_variables(&self) -> impl Iterator<Item = &VariableSpec> {
        self.variables.iter().filter(|v| v.kind == VariableKind::Categorical)
    }

    pub fn all_categorical(&self) -> bool {
        self.variables.iter().all(|v| v.kind == VariableKind::Categorical)
    }

    pub fn validate(&self) -> Result<()> {
        for v in &self.variables {
            v.validate()?;
        }
        let names: BTreeSet<&str> = self.variables.iter().map(|v| v.name.as_str()).collect();
        if names.len() != self.variables.len() {
            return Err(Error::Config("duplicate variable names".into()));
        }
        if let Some(t) = &self.target_name {
            let spec = self
                .variable(t)
                .ok_or_else(|| Error::Config(format!("target `{t}` is not a variable")))?;
            if spec.kind != VariableKind::Categorical {
                return Err(Error::Config(format!("target `{t}` must be categorical")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let schema: DatasetSchema = toml::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Builds a schema from (training) data.
///
/// Columns keep the table's order. Categorical levels are sorted
/// lexicographically; the `ClaimNb` target always carries levels `0..=4`.
/// Numeric columns named by the configuration are binned with the rule
/// supplied for them, fitted on this table.
pub fn infer_schema(
    table: &RawTable,
    configuration: Configuration,
    binning_rules: &BTreeMap<String, BinningRule>,
) -> Result<DatasetSchema> {
    let binned = configuration.binned_variables();
    let mut variables = Vec::with_capacity(table.n_columns());
    for col in table.columns() {
        let spec = match &col.data {
            ColumnData::Categorical(values) => {
                let mut levels: BTreeSet<String> = values.iter().cloned().collect();
                if col.name == CLAIM_NB {
                    levels.extend(CLAIM_LEVELS.iter().map(|s| s.to_string()));
                }
                VariableSpec::categorical(col.name.clone(), levels.into_iter().collect())
            }
            ColumnData::Numeric(values) => {
                let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if binned.contains(&col.name.as_str()) {
                    let rule = binning_rules.get(&col.name).ok_or_else(|| {
                        Error::Config(format!(
                            "configuration `{}` bins `{}` but no binning rule was given",
                            configuration.as_str(),
                            col.name
                        ))
                    })?;
                    let fitted = rule.fit(values)?;
                    VariableSpec {
                        name: col.name.clone(),
                        kind: VariableKind::Categorical,
                        levels: (0..fitted.n_bins()).map(bin_label).collect(),
                        value_range: Some((lo, hi)),
                        binning: Some(fitted),
                    }
                } else {
                    VariableSpec::numeric(col.name.clone(), lo, hi)
                }
            }
        };
        spec.validate()?;
        variables.push(spec);
    }
    let target_name = table.column_names().contains(&CLAIM_NB).then(|| CLAIM_NB.to_string());
    let schema = DatasetSchema {
        configuration,
        target_name,
        variables,
    };
    schema.validate()?;
    Ok(schema)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{read_raw_dataset, FREMTPL_COLUMNS};
    use proptest::prelude::*;

    fn table() -> RawTable {
        let csv = "ClaimNb,Exposure,Power,CarAge,DriverAge,Brand,Gas,Region,Density\n\
                   0,0.5,f,0,46,B,Diesel,R72,76\n\
                   1,1.0,g,2,38,A,Regular,R31,3003\n\
                   0,0.25,e,10,22,F,Regular,R24,37\n\
                   0,0.75,e,5,70,F,Diesel,R24,1200\n";
        read_raw_dataset(csv.as_bytes(), &FREMTPL_COLUMNS).unwrap()
    }

    #[test]
    fn baseline_keeps_four_numerics() {
        let s = infer_schema(&table(), Configuration::Baseline, &default_binning_rules()).unwrap();
        let numeric: Vec<&str> = s
            .variables
            .iter()
            .filter(|v| v.kind == VariableKind::Numeric)
            .map(|v| v.name.as_str())
            .collect();
        assert_eq!(numeric, ["Exposure", "CarAge", "DriverAge", "Density"]);
        assert_eq!(s.variable("ClaimNb").unwrap().levels, CLAIM_LEVELS);
        assert_eq!(s.variable("Gas").unwrap().levels, ["Diesel", "Regular"]);
    }

    #[test]
    fn all_cat_bins_exposure_and_density() {
        let s = infer_schema(&table(), Configuration::AllCat, &default_binning_rules()).unwrap();
        for name in ["Exposure", "Density"] {
            assert_eq!(s.variable(name).unwrap().kind, VariableKind::Categorical);
        }
        for name in ["DriverAge", "CarAge"] {
            assert_eq!(s.variable(name).unwrap().kind, VariableKind::Numeric);
        }
    }

    #[test]
    fn bin_config_is_all_categorical() {
        let s = infer_schema(&table(), Configuration::Bin, &default_binning_rules()).unwrap();
        assert!(s.all_categorical());
        assert_eq!(s.variables.len(), 9);
    }

    #[test]
    fn missing_rule_is_a_config_error() {
        let mut rules = default_binning_rules();
        rules.remove("Density");
        assert!(matches!(
            infer_schema(&table(), Configuration::AllCat, &rules),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn monthly_exposure_has_singleton_top_bin() {
        let rule = BinningRule::monthly_exposure().fit(&[0.1, 1.0]).unwrap();
        assert_eq!(rule.n_bins(), 13);
        assert_eq!(apply_binning(1.0, &rule).unwrap(), 12);
        assert_eq!(rule.representative(12), 1.0);
        assert_eq!(apply_binning(0.99, &rule).unwrap(), 11);
        assert_eq!(apply_binning(0.0, &rule).unwrap(), 0);
        assert_eq!(apply_binning(1.0 / 12.0, &rule).unwrap(), 1);
    }

    #[test]
    fn car_age_zero_gets_singleton_first_bin() {
        let values: Vec<f64> = (0..200).map(|i| (i % 20) as f64).collect();
        let rule = BinningRule::special_plus_quantile(vec![0.0], 10).fit(&values).unwrap();
        assert_eq!(apply_binning(0.0, &rule).unwrap(), 0);
        assert_eq!(rule.representative(0), 0.0);
        assert!(apply_binning(1.0, &rule).unwrap() >= 1);
    }

    #[test]
    fn log_deciles_are_roughly_uniform() {
        let values: Vec<f64> = (1..=10_000)
            .map(|i| (i as f64 * 0.37).exp().min(1e6) + i as f64)
            .collect();
        let rule = BinningRule::log_decile().fit(&values).unwrap();
        assert_eq!(rule.n_bins(), 10);
        let mut counts = [0usize; 10];
        for &v in &values {
            counts[apply_binning(v, &rule).unwrap()] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), values.len());
        for c in counts {
            assert!((c as f64 - 1000.0).abs() <= 20.0, "{counts:?}");
        }
    }

    #[test]
    fn out_of_range_values_clamp_to_end_bins() {
        let rule = BinningRule::explicit(vec![18.0, 30.0, 50.0, f64::INFINITY])
            .fit(&[20.0, 90.0])
            .unwrap();
        assert_eq!(apply_binning(5.0, &rule).unwrap(), 0);
        assert_eq!(apply_binning(1000.0, &rule).unwrap(), 2);
        assert_eq!(rule.edges[3], 90.0);
    }

    #[test]
    fn schema_toml_roundtrip_is_exact() {
        let s = infer_schema(&table(), Configuration::Bin, &default_binning_rules()).unwrap();
        let back = DatasetSchema::from_toml(&s.to_toml().unwrap()).unwrap();
        assert_eq!(s, back);
    }

    proptest! {
        #[test]
        fn every_finite_value_maps_to_one_bin(values in prop::collection::vec(-100.0f64..100.0, 2..200), probe in -1e6f64..1e6) {
            let rule = BinningRule::quantile(7).fit(&values).unwrap();
            let b = apply_binning(probe, &rule).unwrap();
            prop_assert!(b < rule.n_bins());
            let mut total = 0;
            let mut counts = vec![0usize; rule.n_bins()];
            for &v in &values {
                counts[apply_binning(v, &rule).unwrap()] += 1;
                total += 1;
            }
            prop_assert_eq!(counts.iter().sum::<usize>(), total);
        }

        #[test]
        fn representatives_fall_in_their_own_bin(values in prop::collection::vec(0.5f64..5000.0, 2..100)) {
            for rule in [BinningRule::log_decile(), BinningRule::special_plus_quantile(vec![1.0], 5)] {
                let fitted = rule.fit(&values).unwrap();
                for b in 0..fitted.n_bins() {
                    prop_assert_eq!(apply_binning(fitted.representative(b), &fitted).unwrap(), b);
                }
            }
        }
    }
}
