//! Rényi-DP accounting for DP-SGD with Poisson-subsampled Gaussian noise.
//!
//! Each training phase contributes `steps` applications of the subsampled
//! Gaussian mechanism with sampling rate `q` and noise multiplier `σ`. RDP
//! values compose additively over steps and phases; the total is converted
//! to an `(ε, δ)` guarantee by minimising over a grid of orders.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Default `δ` used when a run does not specify one.
pub const DEFAULT_DELTA: f64 = 1e-6;

/// Lower and upper ends of the search interval for [`solve_sigma`].
pub const SIGMA_RANGE: (f64, f64) = (1e-3, 1e3);

/// Relative tolerance on `ε` reached by [`solve_sigma`].
pub const SIGMA_TOLERANCE: f64 = 1e-3;

/// Default order grid: 1.25, 1.5, 1.75, every integer 2..=64, 128 and 256.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5, 1.75];
    orders.extend((2..=64).map(f64::from));
    orders.extend([128.0, 256.0]);
    orders
}

/// `ln(e^a + e^b)` without overflow.
fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(e^a - e^b)` for `a >= b`.
fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

/// `ln erfc(x)`, using the asymptotic expansion where `erfc` underflows.
fn log_erfc(x: f64) -> f64 {
    if x < 25.0 {
        return erfc(x).ln();
    }
    let x2 = x * x;
    let series = 1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2)
        + 105.0 / (16.0 * x2 * x2 * x2 * x2);
    -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln() + series.ln()
}

/// `ln A_α` for integer `α` via the binomial expansion.
fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let mut log_a = f64::NEG_INFINITY;
    let mut log_binom = 0.0;
    for k in 0..=alpha {
        if k > 0 {
            log_binom += ((alpha - k + 1) as f64).ln() - (k as f64).ln();
        }
        let kf = k as f64;
        let term = log_binom + kf * q.ln() + (alpha - k) as f64 * (-q).ln_1p() + (kf * kf - kf) / (2.0 * sigma * sigma);
        log_a = log_add(log_a, term);
    }
    log_a
}

/// `ln A_α` for fractional `α` via the two-sided erfc series.
fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let mut log_a0 = f64::NEG_INFINITY;
    let mut log_a1 = f64::NEG_INFINITY;
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let s2 = sigma * std::f64::consts::SQRT_2;
    let mut coef = 1.0_f64;
    let mut i = 0.0_f64;
    loop {
        let log_coef = coef.abs().ln();
        let j = alpha - i;
        let log_t0 = log_coef + i * q.ln() + j * (-q).ln_1p();
        let log_t1 = log_coef + j * q.ln() + i * (-q).ln_1p();
        let log_e0 = 0.5_f64.ln() + log_erfc((i - z0) / s2);
        let log_e1 = 0.5_f64.ln() + log_erfc((z0 - j) / s2);
        let log_s0 = log_t0 + (i * i - i) / (2.0 * sigma * sigma) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1;
        if coef > 0.0 {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        if log_s0.max(log_s1) < -30.0 && i > alpha {
            break;
        }
        coef *= (alpha - i) / (i + 1.0);
        i += 1.0;
    }
    log_add(log_a0, log_a1)
}

/// RDP of one application of the subsampled Gaussian mechanism at order
/// `alpha`. `q = 1` uses the closed form `α/(2σ²)`; `σ = ∞` gives 0.
pub fn rdp_single(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("noise multiplier must be positive, got {sigma}")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("sampling rate must lie in (0, 1], got {q}")));
    }
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::Domain(format!("RDP order must be finite and > 1, got {alpha}")));
    }
    if sigma.is_infinite() {
        return Ok(0.0);
    }
    if q == 1.0 {
        return Ok(alpha / (2.0 * sigma * sigma));
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_int(q, sigma, alpha as u64)
    } else {
        log_a_frac(q, sigma, alpha)
    };
    Ok((log_a / (alpha - 1.0)).max(0.0))
}

/// Per-order RDP of one step of the subsampled Gaussian mechanism.
pub fn rdp_of_subsampled_gaussian(q: f64, sigma: f64, orders: &[f64]) -> Result<Vec<f64>> {
    orders.iter().map(|&a| rdp_single(q, sigma, a)).collect()
}

/// Converts a total RDP curve to `ε` at `δ`. Returns `(ε, optimal order)`.
pub fn rdp_to_epsilon(orders: &[f64], rdp: &[f64], delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    if orders.is_empty() || orders.len() != rdp.len() {
        return Err(Error::Contract(
            "order grid and RDP values must be non-empty and aligned".into(),
        ));
    }
    let log_inv_delta = -delta.ln();
    let mut best = (f64::INFINITY, orders[0]);
    for (&a, &r) in orders.iter().zip(rdp) {
        let eps = r + log_inv_delta / (a - 1.0);
        if eps < best.0 {
            best = (eps, a);
        }
    }
    Ok((best.0.max(0.0), best.1))
}

/// One homogeneous stretch of DP-SGD training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyPhase {
    /// Free-form label such as `"autoencoder"` or `"latent_gan"`.
    pub name: String,
    pub steps: u64,
    pub sampling_rate: f64,
    pub noise_multiplier: f64,
    pub clip_norm: f64,
}

/// The privacy cost of a run, composed over all its phases.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub phases: Vec<PrivacyPhase>,
    pub target_delta: f64,
    pub computed_epsilon: f64,
    /// Order grid used for the conversion.
    pub orders: Vec<f64>,
    /// Per-step RDP curve of each phase, rebuilt on demand after loading.
    #[serde(skip)]
    cache: Vec<Vec<f64>>,
}

impl PartialEq for PrivacyLedger {
    fn eq(&self, other: &Self) -> bool {
        self.phases == other.phases
            && self.target_delta == other.target_delta
            && self.computed_epsilon == other.computed_epsilon
            && self.orders == other.orders
    }
}

impl PrivacyLedger {
    pub fn new(target_delta: f64) -> Self {
        PrivacyLedger {
            phases: Vec::new(),
            target_delta,
            computed_epsilon: 0.0,
            orders: default_orders(),
            cache: Vec::new(),
        }
    }

    /// Adds `steps` to the phase called `name`, creating it if needed, and
    /// refreshes `computed_epsilon`. Consecutive steps with identical
    /// parameters share one phase.
    pub fn record(
        &mut self,
        name: &str,
        steps: u64,
        sampling_rate: f64,
        noise_multiplier: f64,
        clip_norm: f64,
    ) -> Result<f64> {
        match self.phases.last_mut() {
            Some(p)
                if p.name == name
                    && p.sampling_rate == sampling_rate
                    && p.noise_multiplier == noise_multiplier
                    && p.clip_norm == clip_norm =>
            {
                p.steps += steps
            }
            _ => self.phases.push(PrivacyPhase {
                name: name.to_string(),
                steps,
                sampling_rate,
                noise_multiplier,
                clip_norm,
            }),
        }
        self.refresh()
    }

    /// Recomputes `computed_epsilon` from the phases. Equal to
    /// [`compose_and_convert`] on the same phases.
    pub fn refresh(&mut self) -> Result<f64> {
        if !(self.target_delta > 0.0 && self.target_delta < 1.0) {
            return Err(Error::Domain(format!(
                "delta must lie in (0, 1), got {}",
                self.target_delta
            )));
        }
        self.cache.truncate(self.phases.len());
        for p in &self.phases[self.cache.len()..] {
            let curve = if p.noise_multiplier.is_infinite() {
                vec![0.0; self.orders.len()]
            } else {
                rdp_of_subsampled_gaussian(p.sampling_rate, p.noise_multiplier, &self.orders)?
            };
            self.cache.push(curve);
        }
        if self
            .phases
            .iter()
            .all(|p| p.steps == 0 || p.noise_multiplier.is_infinite())
        {
            self.computed_epsilon = 0.0;
            return Ok(0.0);
        }
        let mut total = vec![0.0; self.orders.len()];
        for (p, curve) in self.phases.iter().zip(&self.cache).filter(|(p, _)| p.steps > 0) {
            for (t, r) in total.iter_mut().zip(curve) {
                *t += p.steps as f64 * r;
            }
        }
        self.computed_epsilon = rdp_to_epsilon(&self.orders, &total, self.target_delta)?.0;
        Ok(self.computed_epsilon)
    }
}

/// Total `ε` of the given phases at `δ`: per-order RDP summed linearly over
/// steps and phases, then minimised over the order grid. No phases (or no
/// steps) means no data was touched, so `ε = 0`.
pub fn compose_and_convert(phases: &[PrivacyPhase], delta: f64, orders: &[f64]) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    if phases.iter().all(|p| p.steps == 0 || p.noise_multiplier.is_infinite()) {
        return Ok(0.0);
    }
    let mut total = vec![0.0; orders.len()];
    for p in phases.iter().filter(|p| p.steps > 0) {
        let rdp = if p.noise_multiplier.is_infinite() {
            vec![0.0; orders.len()]
        } else {
            rdp_of_subsampled_gaussian(p.sampling_rate, p.noise_multiplier, orders)?
        };
        for (t, r) in total.iter_mut().zip(rdp) {
            *t += p.steps as f64 * r;
        }
    }
    Ok(rdp_to_epsilon(orders, &total, delta)?.0)
}

/// `ε` after `steps` steps at rate `q` and noise `σ`.
pub fn epsilon_for(sigma: f64, steps: u64, q: f64, delta: f64, orders: &[f64]) -> Result<f64> {
    let phase = PrivacyPhase {
        name: String::new(),
        steps,
        sampling_rate: q,
        noise_multiplier: sigma,
        clip_norm: 1.0,
    };
    compose_and_convert(std::slice::from_ref(&phase), delta, orders)
}

fn within_target(epsilon: f64, target: f64) -> bool {
    epsilon <= target && (target - epsilon) / target < SIGMA_TOLERANCE
}

/// Result of inverting the accountant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaSolution {
    pub sigma: f64,
    pub epsilon: f64,
}

/// Finds a noise multiplier whose `ε` after `steps` steps at rate `q` lies
/// in `[target·(1 − SIGMA_TOLERANCE), target]`, so the target is never
/// exceeded.
pub fn solve_sigma(target_epsilon: f64, steps: u64, q: f64, delta: f64, orders: &[f64]) -> Result<SigmaSolution> {
    let phase = PrivacyPhase {
        name: String::new(),
        steps,
        sampling_rate: q,
        noise_multiplier: 1.0,
        clip_norm: 1.0,
    };
    solve_sigma_phases(target_epsilon, std::slice::from_ref(&phase), delta, orders)
}

/// Like [`solve_sigma`] for several phases sharing one noise multiplier;
/// the phases' own `noise_multiplier` fields are ignored. Bisects on `ln σ`
/// over [`SIGMA_RANGE`], where `ε` is decreasing in `σ`.
pub fn solve_sigma_phases(
    target_epsilon: f64,
    phases: &[PrivacyPhase],
    delta: f64,
    orders: &[f64],
) -> Result<SigmaSolution> {
    if !(target_epsilon > 0.0) || !target_epsilon.is_finite() {
        return Err(Error::Domain(format!(
            "target epsilon must be positive and finite, got {target_epsilon}"
        )));
    }
    if phases.iter().all(|p| p.steps == 0) {
        return Err(Error::Range("no training steps: every sigma gives epsilon 0".into()));
    }
    let eps = |s: f64| {
        let with_sigma: Vec<PrivacyPhase> = phases
            .iter()
            .map(|p| PrivacyPhase {
                noise_multiplier: s,
                ..p.clone()
            })
            .collect();
        compose_and_convert(&with_sigma, delta, orders)
    };
    let (mut lo, mut hi) = SIGMA_RANGE;
    let (eps_lo, eps_hi) = (eps(lo)?, eps(hi)?);
    if target_epsilon > eps_lo || target_epsilon < eps_hi {
        return Err(Error::Range(format!(
            "target epsilon {target_epsilon} outside [{eps_hi}, {eps_lo}] reachable with sigma in [{lo}, {hi}]"
        )));
    }
    for bound in [(lo, eps_lo), (hi, eps_hi)] {
        if within_target(bound.1, target_epsilon) {
            return Ok(SigmaSolution {
                sigma: bound.0,
                epsilon: bound.1,
            });
        }
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        let e = eps(mid)?;
        if within_target(e, target_epsilon) {
            return Ok(SigmaSolution { sigma: mid, epsilon: e });
        }
        if e > target_epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Range(format!(
        "bisection for target epsilon {target_epsilon} did not converge"
    )))
}
