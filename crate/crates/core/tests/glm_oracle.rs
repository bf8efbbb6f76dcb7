mod common;

use common::oracles::poisson_newton_qr;
use rand::SeedableRng;
use ratesynth::eval::glm::fit_with_design;
use ratesynth::eval::{GlmDesign, GlmOptions};
use ratesynth::nn::SynthRng;
use ratesynth::schema::{default_binning_rules, infer_schema, Configuration};
use ratesynth::standin::fremtpl_standin;
use ratesynth::table::filter_exposure;

fn check(configuration: Configuration, exposure_offset: bool) {
    let raw = fremtpl_standin(20_000, 0, &mut SynthRng::seed_from_u64(11));
    let table = filter_exposure(&raw, 1.0).unwrap().table;
    let schema = infer_schema(&table, configuration, &default_binning_rules()).unwrap();
    let options = GlmOptions {
        exposure_offset,
        ..GlmOptions::default()
    };
    let design = GlmDesign::from_schema(&schema, &options);
    let fit = fit_with_design(&table, &design, &options).unwrap();
    assert!(fit.converged);
    assert!(fit.dropped.is_empty(), "unexpected aliasing: {:?}", fit.dropped);

    let x = design.matrix(&table).unwrap();
    let y = design.response(&table).unwrap();
    let offset = design.offset_values(&table).unwrap();
    let rows: Vec<Vec<f64>> = x.outer_iter().map(|r| r.to_vec()).collect();
    let oracle = poisson_newton_qr(&rows, y.as_slice().unwrap(), offset.as_slice().unwrap());
    for (c, o) in fit.coefficients.iter().zip(&oracle) {
        let est = c.estimate.unwrap();
        assert!((est - o).abs() < 1e-6, "{}: {est} vs oracle {o}", c.term);
    }

    let fitted: f64 = fit.predict(&table).unwrap().sum();
    let observed: f64 = y.sum();
    assert!(((fitted - observed) / observed).abs() < 1e-6, "{fitted} vs {observed}");
}

#[test]
fn baseline_fit_matches_qr_newton_oracle() {
    check(Configuration::Baseline, false);
}

#[test]
fn binned_fit_with_offset_matches_qr_newton_oracle() {
    check(Configuration::Bin, true);
}
