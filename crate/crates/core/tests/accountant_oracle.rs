mod common;

use common::oracles::{rdp_quadrature, RDP_GRID};
use ratesynth::accountant::rdp_single;

#[test]
fn subsampled_gaussian_matches_quadrature_oracle() {
    for &(q, sigma, alpha) in &RDP_GRID {
        let lib = rdp_single(q, sigma, alpha).unwrap();
        let oracle = rdp_quadrature(q, sigma, alpha);
        let rel = (lib - oracle).abs() / oracle.abs();
        assert!(
            rel < 1e-6,
            "q {q} sigma {sigma} alpha {alpha}: {lib} vs {oracle} (rel {rel:e})"
        );
    }
}

#[test]
fn quadrature_oracle_reproduces_gaussian_closed_form() {
    for &(sigma, alpha) in &[(1.0, 2.0), (10.0, 2.0), (0.8, 7.5)] {
        let oracle = rdp_quadrature(1.0 - 1e-15, sigma, alpha);
        assert!((oracle - alpha / (2.0 * sigma * sigma)).abs() < 1e-9 * oracle.max(1.0));
    }
}
