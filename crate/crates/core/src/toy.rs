//! A small ground-truth table of two dependent categorical variables, used
//! to check that the synthesizers recover a known joint distribution.

use ndarray::{array, Array2};
use rand::Rng;

use crate::error::Result;
use crate::schema::{Configuration, DatasetSchema, VariableSpec};
use crate::table::{Column, ColumnData, RawTable};

pub const TOY_A: &str = "A";
pub const TOY_B: &str = "B";

/// `P(A = a_i, B = b_j)`; rows are the three levels of `A`, columns the
/// four levels of `B`.
pub fn toy_joint() -> Array2<f64> {
    array![
        [0.20, 0.05, 0.05, 0.02],
        [0.03, 0.15, 0.04, 0.08],
        [0.02, 0.04, 0.10, 0.22],
    ]
}

pub fn toy_levels_a() -> Vec<String> {
    (0..3).map(|i| format!("a{i}")).collect()
}

pub fn toy_levels_b() -> Vec<String> {
    (0..4).map(|j| format!("b{j}")).collect()
}

pub fn toy_schema() -> DatasetSchema {
    DatasetSchema {
        configuration: Configuration::Baseline,
        target_name: None,
        variables: vec![
            VariableSpec::categorical(TOY_A, toy_levels_a()),
            VariableSpec::categorical(TOY_B, toy_levels_b()),
        ],
    }
}

/// Draws `rows` independent records from [`toy_joint`].
pub fn toy_table<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> RawTable {
    let joint = toy_joint();
    let cells: Vec<(usize, usize, f64)> = joint.indexed_iter().map(|((i, j), &p)| (i, j, p)).collect();
    let la = toy_levels_a();
    let lb = toy_levels_b();
    let mut a = Vec::with_capacity(rows);
    let mut b = Vec::with_capacity(rows);
    for _ in 0..rows {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = cells[cells.len() - 1];
        for &cell in &cells {
            acc += cell.2;
            if u < acc {
                pick = cell;
                break;
            }
        }
        a.push(la[pick.0].clone());
        b.push(lb[pick.1].clone());
    }
    RawTable::new(vec![
        Column {
            name: TOY_A.into(),
            data: ColumnData::Categorical(a),
        },
        Column {
            name: TOY_B.into(),
            data: ColumnData::Categorical(b),
        },
    ])
    .expect("columns have equal length")
}

/// Empirical joint frequencies of `(A, B)` in `table`, shaped like
/// [`toy_joint`].
pub fn empirical_joint(table: &RawTable) -> Result<Array2<f64>> {
    let a = table.categorical(TOY_A)?;
    let b = table.categorical(TOY_B)?;
    let la = toy_levels_a();
    let lb = toy_levels_b();
    let mut counts = Array2::<f64>::zeros((la.len(), lb.len()));
    for (x, y) in a.iter().zip(b) {
        let i = la.iter().position(|l| l == x);
        let j = lb.iter().position(|l| l == y);
        if let (Some(i), Some(j)) = (i, j) {
            counts[[i, j]] += 1.0;
        }
    }
    let n = table.n_rows().max(1) as f64;
    Ok(counts / n)
}
