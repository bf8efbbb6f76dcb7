//! A synthetic table in the format of the French MTPL claim-frequency data.
//!
//! It has the same columns, level sets and row counts as the public table,
//! and its claim counts follow a Poisson model with a log-exposure offset, so
//! every pipeline stage (filtering, binning, training, GLM refits) can run
//! when the real file is not available. Its marginals are plausible shapes,
//! not estimates of the real ones.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Beta, Distribution, LogNormal, Normal, Poisson};

use crate::table::{Column, ColumnData, RawTable, FREMTPL_COLUMNS};

/// Rows of the public table with `Exposure ≤ 1`.
pub const FREMTPL_ROWS_WITHIN_CAP: usize = 412_748;
/// Rows of the public table with `Exposure > 1`.
pub const FREMTPL_ROWS_OVER_CAP: usize = 421;

pub const POWER_LEVELS: [&str; 12] = ["d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o"];
const POWER_WEIGHTS: [f64; 12] = [22.0, 19.0, 19.0, 17.0, 6.0, 4.5, 4.3, 2.5, 1.2, 0.9, 0.7, 0.9];
const POWER_EFFECT: [f64; 12] = [0.0, 0.05, 0.08, 0.06, 0.12, 0.15, 0.14, 0.2, 0.2, 0.22, 0.25, 0.3];

pub const BRAND_LEVELS: [&str; 7] = [
    "Fiat",
    "Japanese (except Nissan) or Korean",
    "Mercedes, Chrysler or BMW",
    "Opel, General Motors or Ford",
    "Renault, Nissan or Citroen",
    "Volkswagen, Audi, Skoda or Seat",
    "other",
];
const BRAND_WEIGHTS: [f64; 7] = [4.5, 19.0, 4.8, 9.7, 52.6, 6.5, 2.9];
const BRAND_EFFECT: [f64; 7] = [0.05, -0.15, 0.05, 0.02, 0.0, 0.03, -0.05];

pub const GAS_LEVELS: [&str; 2] = ["Diesel", "Regular"];
const GAS_WEIGHTS: [f64; 2] = [49.6, 50.4];
const GAS_EFFECT: [f64; 2] = [0.08, 0.0];

pub const REGION_LEVELS: [&str; 10] = ["R11", "R23", "R24", "R25", "R31", "R52", "R53", "R54", "R72", "R74"];
const REGION_WEIGHTS: [f64; 10] = [16.3, 3.3, 38.5, 3.9, 4.9, 9.6, 10.3, 6.4, 5.1, 1.7];
const REGION_EFFECT: [f64; 10] = [0.1, 0.05, 0.0, 0.02, 0.04, -0.02, -0.05, 0.03, 0.06, 0.12];

/// Baseline annual claim frequency.
const BASE_FREQUENCY: f64 = 0.068;

/// Draws `within_cap` rows with `Exposure ≤ 1` and `over_cap` rows with
/// `Exposure > 1`, shuffled together. Columns follow
/// [`FREMTPL_COLUMNS`]; `ClaimNb` is capped at 4.
pub fn fremtpl_standin<R: Rng + ?Sized>(within_cap: usize, over_cap: usize, rng: &mut R) -> RawTable {
    let n = within_cap + over_cap;
    let mut over: Vec<bool> = (0..n).map(|i| i < over_cap).collect();
    rand::seq::SliceRandom::shuffle(over.as_mut_slice(), rng);

    let power_d = WeightedIndex::new(POWER_WEIGHTS).expect("positive weights");
    let brand_d = WeightedIndex::new(BRAND_WEIGHTS).expect("positive weights");
    let gas_d = WeightedIndex::new(GAS_WEIGHTS).expect("positive weights");
    let region_d = WeightedIndex::new(REGION_WEIGHTS).expect("positive weights");
    let exposure_d: Beta<f64> = Beta::new(1.3, 1.1).expect("valid shape");
    let driver_d: Normal<f64> = Normal::new(45.0, 14.0).expect("valid scale");
    let density_d: LogNormal<f64> = LogNormal::new(6.2, 1.6).expect("valid scale");

    let mut claim = Vec::with_capacity(n);
    let mut exposure = Vec::with_capacity(n);
    let mut power = Vec::with_capacity(n);
    let mut car_age = Vec::with_capacity(n);
    let mut driver_age = Vec::with_capacity(n);
    let mut brand = Vec::with_capacity(n);
    let mut gas = Vec::with_capacity(n);
    let mut region = Vec::with_capacity(n);
    let mut density = Vec::with_capacity(n);

    for &is_over in &over {
        let e: f64 = if is_over {
            (1.0 + rng.random::<f64>()).min(1.99) + 0.01
        } else if rng.random::<f64>() < 0.3 {
            1.0
        } else {
            ((exposure_d.sample(rng) * 100.0).ceil() / 100.0).clamp(0.01, 1.0)
        };
        let p = power_d.sample(rng);
        let ca = if rng.random::<f64>() < 0.04 {
            0.0
        } else {
            (-(1.0 - rng.random::<f64>()).ln() * 7.5).floor().min(100.0) + 1.0
        };
        let da = driver_d.sample(rng).round().clamp(18.0, 99.0);
        let b = brand_d.sample(rng);
        let g = gas_d.sample(rng);
        let r = region_d.sample(rng);
        let dens = density_d.sample(rng).round().clamp(2.0, 27_000.0);

        let young = if da < 26.0 { 0.6 * (26.0 - da) / 8.0 } else { 0.0 };
        let old = if da > 70.0 { 0.01 * (da - 70.0) } else { 0.0 };
        let eta =
            BASE_FREQUENCY.ln() + POWER_EFFECT[p] + BRAND_EFFECT[b] + GAS_EFFECT[g] + REGION_EFFECT[r] + young + old
                - 0.01 * ca.min(20.0)
                + 0.08 * (dens.ln() - 6.2);
        let lambda = e * eta.exp();
        let k = Poisson::new(lambda).expect("positive rate").sample(rng).min(4.0) as u8;

        claim.push(k.to_string());
        exposure.push(e);
        power.push(POWER_LEVELS[p].to_string());
        car_age.push(ca);
        driver_age.push(da);
        brand.push(BRAND_LEVELS[b].to_string());
        gas.push(GAS_LEVELS[g].to_string());
        region.push(REGION_LEVELS[r].to_string());
        density.push(dens);
    }

    let data = vec![
        ColumnData::Categorical(claim),
        ColumnData::Numeric(exposure),
        ColumnData::Categorical(power),
        ColumnData::Numeric(car_age),
        ColumnData::Numeric(driver_age),
        ColumnData::Categorical(brand),
        ColumnData::Categorical(gas),
        ColumnData::Categorical(region),
        ColumnData::Numeric(density),
    ];
    let columns = FREMTPL_COLUMNS
        .iter()
        .zip(data)
        .map(|((name, _), data)| Column {
            name: (*name).to_string(),
            data,
        })
        .collect();
    RawTable::new(columns).expect("columns have equal length")
}
