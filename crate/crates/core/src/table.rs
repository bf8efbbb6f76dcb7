//! Raw tabular data: CSV ingestion, typed columns and the exposure filter.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a raw CSV column is parsed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ColumnKind {
        match self {
            ColumnData::Numeric(_) => ColumnKind::Numeric,
            ColumnData::Categorical(_) => ColumnKind::Categorical,
        }
    }

    fn select(&self, rows: &[usize]) -> ColumnData {
        match self {
            ColumnData::Numeric(v) => ColumnData::Numeric(rows.iter().map(|&r| v[r]).collect()),
            ColumnData::Categorical(v) => ColumnData::Categorical(rows.iter().map(|&r| v[r].clone()).collect()),
        }
    }

    fn cell(&self, row: usize) -> String {
        match self {
            ColumnData::Numeric(v) => format_number(v[row]),
            ColumnData::Categorical(v) => v[row].clone(),
        }
    }
}

fn format_number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Column {
    pub name: String,
    pub data: ColumnData,
}

/// Rows × typed columns, in a fixed column order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RawTable {
    columns: Vec<Column>,
}

/// Column layout of the French MTPL frequency data, in canonical order.
pub const FREMTPL_COLUMNS: [(&str, ColumnKind); 9] = [
    ("ClaimNb", ColumnKind::Categorical),
    ("Exposure", ColumnKind::Numeric),
    ("Power", ColumnKind::Categorical),
    ("CarAge", ColumnKind::Numeric),
    ("DriverAge", ColumnKind::Numeric),
    ("Brand", ColumnKind::Categorical),
    ("Gas", ColumnKind::Categorical),
    ("Region", ColumnKind::Categorical),
    ("Density", ColumnKind::Numeric),
];

pub const EXPOSURE: &str = "Exposure";
pub const CLAIM_NB: &str = "ClaimNb";

impl RawTable {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        if let Some(first) = columns.first() {
            let n = first.data.len();
            if let Some(bad) = columns.iter().find(|c| c.data.len() != n) {
                return Err(Error::Contract(format!(
                    "column `{}` has {} rows, expected {n}",
                    bad.name,
                    bad.data.len()
                )));
            }
        }
        Ok(Self { columns })
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map(|c| c.data.len()).unwrap_or(0)
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match &self.column(name)?.data {
            ColumnData::Numeric(v) => Ok(v),
            ColumnData::Categorical(_) => Err(Error::Contract(format!("column `{name}` is not numeric"))),
        }
    }

    pub fn categorical(&self, name: &str) -> Result<&[String]> {
        match &self.column(name)?.data {
            ColumnData::Categorical(v) => Ok(v),
            ColumnData::Numeric(_) => Err(Error::Contract(format!("column `{name}` is not categorical"))),
        }
    }

    /// New table with the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> RawTable {
        RawTable {
            columns: self
                .columns
                .iter()
                .map(|c| Column {
                    name: c.name.clone(),
                    data: c.data.select(rows),
                })
                .collect(),
        }
    }

    /// Writes the table as a headed, comma-separated file.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        self.write_to(&mut w)?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    fn write_to<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))?;
        for r in 0..self.n_rows() {
            w.write_record(self.columns.iter().map(|c| c.data.cell(r)))?;
        }
        Ok(())
    }
}

/// Reads a headed CSV, keeping exactly the `expected` columns in the given
/// order. Extra columns (such as `PolicyID`) are dropped.
pub fn load_raw_dataset(path: impl AsRef<Path>, expected: &[(&str, ColumnKind)]) -> Result<RawTable> {
    let file = std::fs::File::open(path)?;
    read_raw_dataset(file, expected)
}

pub fn read_raw_dataset<R: std::io::Read>(reader: R, expected: &[(&str, ColumnKind)]) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let mut positions = Vec::with_capacity(expected.len());
    for (name, _) in expected {
        let pos = header
            .iter()
            .position(|h| h.trim() == *name)
            .ok_or_else(|| Error::MissingColumn((*name).to_string()))?;
        positions.push(pos);
    }

    let mut data: Vec<ColumnData> = expected
        .iter()
        .map(|(_, k)| match k {
            ColumnKind::Numeric => ColumnData::Numeric(Vec::new()),
            ColumnKind::Categorical => ColumnData::Categorical(Vec::new()),
        })
        .collect();

    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Row {
            row,
            message: e.to_string(),
        })?;
        for ((col, &pos), (name, _)) in data.iter_mut().zip(&positions).zip(expected) {
            let cell = record.get(pos).ok_or_else(|| Error::Row {
                row,
                message: format!("missing cell for `{name}`"),
            })?;
            let cell = cell.trim();
            match col {
                ColumnData::Numeric(v) => {
                    let x: f64 = cell.parse().map_err(|_| Error::Row {
                        row,
                        message: format!("cannot parse `{cell}` as a number in column `{name}`"),
                    })?;
                    if !x.is_finite() {
                        return Err(Error::Row {
                            row,
                            message: format!("non-finite value in column `{name}`"),
                        });
                    }
                    v.push(x);
                }
                ColumnData::Categorical(v) => v.push(cell.to_string()),
            }
        }
    }

    RawTable::new(
        expected
            .iter()
            .zip(data)
            .map(|((name, _), data)| Column {
                name: (*name).to_string(),
                data,
            })
            .collect(),
    )
}

/// Result of [`filter_exposure`].
#[derive(Clone, Debug)]
pub struct FilterOutcome {
    pub table: RawTable,
    pub removed: usize,
}

/// Drops every row whose exposure exceeds `cap`. Rows exactly at the cap
/// are kept.
pub fn filter_exposure(table: &RawTable, cap: f64) -> Result<FilterOutcome> {
    let exposure = table.numeric(EXPOSURE)?;
    let keep: Vec<usize> = (0..table.n_rows()).filter(|&r| exposure[r] <= cap).collect();
    let removed = table.n_rows() - keep.len();
    let table = if removed == 0 {
        table.clone()
    } else {
        table.select_rows(&keep)
    };
    Ok(FilterOutcome { table, removed })
}

/// Random partition of `0..n` into a leading fraction and the rest.
pub fn split_indices<R: Rng + ?Sized>(n: usize, fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let cut = ((n as f64) * fraction).round() as usize;
    let rest = idx.split_off(cut.min(n));
    (idx, rest)
}

/// Level counts of a categorical column, keyed by label.
pub fn level_counts(values: &[String]) -> BTreeMap<&str, usize> {
    let mut counts = BTreeMap::new();
    for v in values {
        *counts.entry(v.as_str()).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "PolicyID,ClaimNb,Exposure,Power,CarAge,DriverAge,Brand,Gas,Region,Density\n";

    fn sample() -> String {
        format!(
            "{HEADER}1,0,0.5,f,0,46,Japanese (except Nissan) or Korean,Diesel,R72,76\n\
             2,1,1.0,g,2,38,\"Renault, Nissan or Citroen\",Regular,R31,3003\n\
             3,0,1.2,e,10,52,Fiat,Regular,R24,37\n"
        )
    }

    #[test]
    fn loads_typed_rows_and_drops_policy_id() {
        let t = read_raw_dataset(sample().as_bytes(), &FREMTPL_COLUMNS).unwrap();
        assert_eq!(t.n_rows(), 3);
        assert_eq!(t.column_names()[0], "ClaimNb");
        assert!(t.column("PolicyID").is_err());
        assert_eq!(t.numeric("Exposure").unwrap(), &[0.5, 1.0, 1.2]);
        assert_eq!(t.categorical("Brand").unwrap()[1], "Renault, Nissan or Citroen");
    }

    #[test]
    fn header_only_gives_empty_table() {
        let t = read_raw_dataset(HEADER.as_bytes(), &FREMTPL_COLUMNS).unwrap();
        assert_eq!(t.n_rows(), 0);
        assert_eq!(t.n_columns(), 9);
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "ClaimNb,Power,CarAge,DriverAge,Brand,Gas,Region,Density\n";
        match read_raw_dataset(csv.as_bytes(), &FREMTPL_COLUMNS) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "Exposure"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unparseable_cell_reports_row() {
        let csv = format!("{HEADER}1,0,abc,f,0,46,B,Diesel,R72,76\n");
        match read_raw_dataset(csv.as_bytes(), &FREMTPL_COLUMNS) {
            Err(Error::Row { row, .. }) => assert_eq!(row, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn exposure_filter_keeps_boundary() {
        let t = read_raw_dataset(sample().as_bytes(), &FREMTPL_COLUMNS).unwrap();
        let out = filter_exposure(&t, 1.0).unwrap();
        assert_eq!(out.table.n_rows(), 2);
        assert_eq!(out.removed, 1);
        let again = filter_exposure(&out.table, 1.0).unwrap();
        assert_eq!(again.removed, 0);
        assert_eq!(again.table, out.table);
    }

    #[test]
    fn csv_roundtrip() {
        let t = read_raw_dataset(sample().as_bytes(), &FREMTPL_COLUMNS).unwrap();
        let text = t.to_csv_string().unwrap();
        let back = read_raw_dataset(text.as_bytes(), &FREMTPL_COLUMNS).unwrap();
        assert_eq!(t, back);
    }
}
