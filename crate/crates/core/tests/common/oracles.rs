//! Oracles coded separately from the library implementations they check.

/// RDP of one subsampled Gaussian step by direct numerical integration of
/// `E_{z ~ N(0, σ²)} [((1 - q) + q exp((2z - 1) / (2σ²)))^α]`.
///
/// The integrand is smooth and decays like a Gaussian on both sides, so a
/// fine trapezoid rule over a wide window converges to machine precision.
/// Summation runs in log space so large orders do not overflow.
pub fn rdp_quadrature(q: f64, sigma: f64, alpha: f64) -> f64 {
    let lo = -40.0 * sigma - 2.0;
    let hi = alpha + 40.0 * sigma + 2.0;
    let h = sigma / 64.0;
    let n = ((hi - lo) / h).ceil() as usize;
    let log_norm = -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let log_terms: Vec<f64> = (0..=n)
        .map(|i| {
            let z = lo + i as f64 * h;
            let a = (1.0 - q).ln();
            let b = q.ln() + (2.0 * z - 1.0) / (2.0 * sigma * sigma);
            let log_ratio = a.max(b) + (-(a - b).abs()).exp().ln_1p();
            let w: f64 = if i == 0 || i == n { 0.5 } else { 1.0 };
            w.ln() + log_norm - z * z / (2.0 * sigma * sigma) + alpha * log_ratio
        })
        .collect();
    let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = log_terms.iter().map(|t| (t - max).exp()).sum();
    let log_a = max + sum.ln() + h.ln();
    log_a / (alpha - 1.0)
}

/// Poisson log-link maximum likelihood by Newton iterations, each solved as
/// the weighted least-squares problem `min ‖√W (Xβ − z)‖` through a QR
/// factorisation (no normal equations). `x` is row-major `n × p`, `offset`
/// enters the linear predictor with coefficient 1. Starts from
/// `β = (ln ȳ, 0, …)`, assuming the first column is the intercept, and stops
/// when no coefficient moves by more than `1e-13` (relative to 1 + |β|), or
/// once the moves are below `1e-9` and stop shrinking (the rounding floor of
/// a large design).
pub fn poisson_newton_qr(x: &[Vec<f64>], y: &[f64], offset: &[f64]) -> Vec<f64> {
    use nalgebra::{DMatrix, DVector};
    let n = x.len();
    let p = x[0].len();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let mut beta = vec![0.0; p];
    beta[0] = ybar.ln() - offset.iter().sum::<f64>() / n as f64;
    let mut previous = f64::INFINITY;
    for _ in 0..200 {
        let mut a = DMatrix::<f64>::zeros(n, p);
        let mut b = DVector::<f64>::zeros(n);
        for i in 0..n {
            let eta: f64 = offset[i] + x[i].iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
            let mu = eta.exp();
            let w = mu.sqrt();
            let z = eta - offset[i] + (y[i] - mu) / mu;
            for j in 0..p {
                a[(i, j)] = w * x[i][j];
            }
            b[i] = w * z;
        }
        let qr = a.qr();
        let qtb = qr.q().transpose() * b;
        let next = qr.r().solve_upper_triangular(&qtb).expect("full column rank");
        let step = next
            .iter()
            .zip(&beta)
            .map(|(n, o)| (n - o).abs() / (1.0 + o.abs()))
            .fold(0.0, f64::max);
        beta = next.iter().copied().collect();
        if step < 1e-13 || (step < 1e-9 && step >= previous) {
            break;
        }
        previous = step;
    }
    beta
}

/// Twenty `(q, σ, α)` points spanning small and large sampling rates, noise
/// levels and both integer and fractional orders.
pub const RDP_GRID: [(f64, f64, f64); 20] = [
    (0.01, 1.1, 2.0),
    (0.01, 1.1, 1.5),
    (0.01, 1.1, 32.0),
    (0.001, 0.8, 4.0),
    (0.001, 0.8, 1.25),
    (0.001, 4.0, 256.0),
    (0.05, 1.0, 8.0),
    (0.05, 1.0, 1.75),
    (0.05, 2.0, 64.0),
    (0.1, 0.7, 3.0),
    (0.1, 3.0, 128.0),
    (0.2, 1.5, 5.5),
    (0.2, 1.5, 16.0),
    (0.3, 5.0, 2.5),
    (0.5, 1.2, 10.0),
    (0.5, 8.0, 40.0),
    (0.75, 2.0, 1.25),
    (0.9, 1.0, 6.0),
    (0.02, 0.9, 12.5),
    (0.005, 1.3, 24.0),
];
