//! Encoding between raw tables and `[0,1]^n` matrices.
//!
//! Categorical (and binned) variables become one-hot blocks with one column
//! per level; numeric variables become a single min-max scaled column.

use ndarray::{s, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{apply_binning, DatasetSchema, VariableKind, VariableSpec};
use crate::table::{Column, ColumnData, RawTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    OneHot,
    MinMax,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub variable: String,
    pub offset: usize,
    pub width: usize,
    pub kind: BlockKind,
}

/// Column blocks of an encoded matrix, contiguous and in schema order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingLayout {
    pub blocks: Vec<Block>,
    pub total_dim: usize,
}

impl EncodingLayout {
    pub fn from_schema(schema: &DatasetSchema) -> Self {
        let mut offset = 0;
        let blocks = schema
            .variables
            .iter()
            .map(|v| {
                let (kind, width) = match v.kind {
                    VariableKind::Categorical => (BlockKind::OneHot, v.n_levels()),
                    VariableKind::Numeric => (BlockKind::MinMax, 1),
                };
                let b = Block {
                    variable: v.name.clone(),
                    offset,
                    width,
                    kind,
                };
                offset += width;
                b
            })
            .collect();
        Self {
            blocks,
            total_dim: offset,
        }
    }

    /// Builds a layout directly from `(name, kind, width)` triples.
    pub fn from_blocks(spec: &[(&str, BlockKind, usize)]) -> Self {
        let mut offset = 0;
        let blocks = spec
            .iter()
            .map(|&(name, kind, width)| {
                let b = Block {
                    variable: name.to_string(),
                    offset,
                    width,
                    kind,
                };
                offset += width;
                b
            })
            .collect();
        Self {
            blocks,
            total_dim: offset,
        }
    }

    pub fn onehot_blocks(&self) -> impl Iterator<Item = &Block> {
        self.blocks.iter().filter(|b| b.kind == BlockKind::OneHot)
    }

    pub fn numeric_blocks(&self) -> impl Iterator<Item = &Block> {
        self.blocks.iter().filter(|b| b.kind == BlockKind::MinMax)
    }

    /// Number of min-max columns.
    pub fn n_numeric(&self) -> usize {
        self.numeric_blocks().map(|b| b.width).sum()
    }

    pub fn block(&self, variable: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.variable == variable)
    }
}

/// Encoded rows with their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedMatrix {
    pub values: Array2<f64>,
    pub layout: EncodingLayout,
}

impl EncodedMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn select_rows(&self, rows: &[usize]) -> EncodedMatrix {
        EncodedMatrix {
            values: self.values.select(ndarray::Axis(0), rows),
            layout: self.layout.clone(),
        }
    }
}

fn level_of(spec: &VariableSpec, data: &ColumnData, row: usize) -> Result<usize> {
    match (data, &spec.binning) {
        (ColumnData::Numeric(v), Some(rule)) => apply_binning(v[row], rule),
        (ColumnData::Categorical(v), None) => spec.level_index(&v[row]).ok_or_else(|| Error::UnknownLevel {
            variable: spec.name.clone(),
            value: v[row].clone(),
        }),
        (ColumnData::Numeric(_), None) => Err(Error::Contract(format!(
            "variable `{}` is categorical in the schema but numeric in the table",
            spec.name
        ))),
        (ColumnData::Categorical(_), Some(_)) => Err(Error::Contract(format!(
            "binned variable `{}` must be numeric in the table",
            spec.name
        ))),
    }
}

/// Encodes every row of `table` under `schema`.
pub fn encode(table: &RawTable, schema: &DatasetSchema) -> Result<EncodedMatrix> {
    let layout = EncodingLayout::from_schema(schema);
    let n = table.n_rows();
    let mut values = Array2::zeros((n, layout.total_dim));
    for (spec, block) in schema.variables.iter().zip(&layout.blocks) {
        let col = &table.column(&spec.name)?.data;
        match spec.kind {
            VariableKind::Categorical => {
                for r in 0..n {
                    let level = level_of(spec, col, r)?;
                    values[[r, block.offset + level]] = 1.0;
                }
            }
            VariableKind::Numeric => {
                let ColumnData::Numeric(v) = col else {
                    return Err(Error::Contract(format!("variable `{}` must be numeric", spec.name)));
                };
                let (lo, hi) = spec
                    .value_range
                    .ok_or_else(|| Error::Config(format!("`{}` has no range", spec.name)))?;
                for r in 0..n {
                    let x = v[r];
                    if !x.is_finite() {
                        return Err(Error::Row {
                            row: r,
                            message: format!("non-finite value in `{}`", spec.name),
                        });
                    }
                    values[[r, block.offset]] = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(EncodedMatrix { values, layout })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Inverts [`encode`]: one-hot blocks by argmax, min-max columns clamped to
/// `[0,1]` and rescaled, binned variables to their bin representatives.
pub fn decode(matrix: &EncodedMatrix, schema: &DatasetSchema) -> Result<RawTable> {
    let layout = EncodingLayout::from_schema(schema);
    if layout != matrix.layout {
        return Err(Error::Contract("matrix layout does not match schema".into()));
    }
    if let Some(bad) = matrix.values.iter().position(|x| !x.is_finite()) {
        return Err(Error::Decode(format!(
            "non-finite entry at row {}",
            bad / layout.total_dim.max(1)
        )));
    }
    let n = matrix.n_rows();
    let mut columns = Vec::with_capacity(schema.variables.len());
    for (spec, block) in schema.variables.iter().zip(&layout.blocks) {
        let view = matrix.values.slice(s![.., block.offset..block.offset + block.width]);
        let data = match spec.kind {
            VariableKind::Categorical => {
                let idx: Vec<usize> = view.rows().into_iter().map(argmax).collect();
                match &spec.binning {
                    Some(rule) => {
                        let reps: Vec<f64> = (0..rule.n_bins()).map(|b| rule.representative(b)).collect();
                        ColumnData::Numeric(idx.iter().map(|&i| reps[i]).collect())
                    }
                    None => ColumnData::Categorical(idx.iter().map(|&i| spec.levels[i].clone()).collect()),
                }
            }
            VariableKind::Numeric => {
                let (lo, hi) = spec
                    .value_range
                    .ok_or_else(|| Error::Config(format!("`{}` has no range", spec.name)))?;
                ColumnData::Numeric((0..n).map(|r| lo + view[[r, 0]].clamp(0.0, 1.0) * (hi - lo)).collect())
            }
        };
        columns.push(Column {
            name: spec.name.clone(),
            data,
        });
    }
    RawTable::new(columns)
}
