//! Poisson regression with a log link fitted by iteratively reweighted
//! least squares.

use log::warn;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::DatasetSchema;
use crate::table::{ColumnData, RawTable, CLAIM_NB, EXPOSURE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlmOptions {
    /// Enter `ln(Exposure)` as an offset instead of Exposure as a covariate.
    pub exposure_offset: bool,
    pub max_iterations: usize,
    /// Convergence threshold on `|ΔD| / (|D| + 0.1)`.
    pub tolerance: f64,
}

impl Default for GlmOptions {
    fn default() -> Self {
        Self {
            exposure_offset: false,
            max_iterations: 100,
            tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Intercept,
    Numeric(String),
    /// Indicator of `variable == level`.
    Dummy(String, String),
}

impl Term {
    pub fn label(&self) -> String {
        match self {
            Term::Intercept => "(Intercept)".into(),
            Term::Numeric(v) => v.clone(),
            Term::Dummy(v, l) => format!("{v}{l}"),
        }
    }
}

/// Fixed list of design columns, identical for every table fitted
/// against the same schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlmDesign {
    pub response: String,
    pub terms: Vec<Term>,
    pub offset: Option<String>,
}

impl GlmDesign {
    /// Intercept, every non-target variable (numerics linear, categoricals
    /// dummy-coded against their first lexicographic level).
    pub fn from_schema(schema: &DatasetSchema, options: &GlmOptions) -> Self {
        let response = schema.target_name.clone().unwrap_or_else(|| CLAIM_NB.to_string());
        let mut terms = vec![Term::Intercept];
        let mut offset = None;
        for var in &schema.variables {
            if var.name == response {
                continue;
            }
            if var.name == EXPOSURE && options.exposure_offset && var.raw_is_numeric() {
                offset = Some(var.name.clone());
            } else if var.raw_is_numeric() {
                terms.push(Term::Numeric(var.name.clone()));
            } else {
                let mut levels = var.levels.clone();
                levels.sort();
                for level in levels.into_iter().skip(1) {
                    terms.push(Term::Dummy(var.name.clone(), level));
                }
            }
        }
        Self {
            response,
            terms,
            offset,
        }
    }

    pub fn labels(&self) -> Vec<String> {
        self.terms.iter().map(Term::label).collect()
    }

    pub fn response(&self, table: &RawTable) -> Result<Array1<f64>> {
        match &table.column(&self.response)?.data {
            ColumnData::Numeric(v) => Ok(Array1::from(v.clone())),
            ColumnData::Categorical(v) => v
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Evaluation(format!("response value `{s}` is not a count")))
                })
                .collect::<Result<Vec<f64>>>()
                .map(Array1::from),
        }
    }

    pub fn matrix(&self, table: &RawTable) -> Result<Array2<f64>> {
        let n = table.n_rows();
        let mut x = Array2::zeros((n, self.terms.len()));
        for (j, term) in self.terms.iter().enumerate() {
            let mut col = x.column_mut(j);
            match term {
                Term::Intercept => col.fill(1.0),
                Term::Numeric(v) => col.assign(&ndarray::ArrayView1::from(table.numeric(v)?)),
                Term::Dummy(v, level) => {
                    for (c, cell) in col.iter_mut().zip(table.categorical(v)?) {
                        *c = (cell == level) as u8 as f64;
                    }
                }
            }
        }
        Ok(x)
    }

    pub fn offset_values(&self, table: &RawTable) -> Result<Array1<f64>> {
        match &self.offset {
            None => Ok(Array1::zeros(table.n_rows())),
            Some(v) => {
                let values = table.numeric(v)?;
                if values.iter().any(|&e| !(e > 0.0)) {
                    return Err(Error::Evaluation(format!("offset variable `{v}` must be positive")));
                }
                Ok(values.iter().map(|e| e.ln()).collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlmCoefficient {
    pub term: String,
    /// `None` when the column was aliased and dropped.
    pub estimate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub design: GlmDesign,
    pub coefficients: Vec<GlmCoefficient>,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
    /// Deviance after every iteration.
    pub deviance_trace: Vec<f64>,
    pub dropped: Vec<String>,
}

impl GlmFit {
    pub fn coefficient(&self, term: &str) -> Option<f64> {
        self.coefficients
            .iter()
            .find(|c| c.term == term)
            .and_then(|c| c.estimate)
    }

    fn beta(&self) -> Array1<f64> {
        self.coefficients.iter().map(|c| c.estimate.unwrap_or(0.0)).collect()
    }

    /// Expected counts for every row of `table`.
    pub fn predict(&self, table: &RawTable) -> Result<Array1<f64>> {
        let x = self.design.matrix(table)?;
        let off = self.design.offset_values(table)?;
        Ok((x.dot(&self.beta()) + off).mapv(f64::exp))
    }
}

/// Poisson deviance `2 Σ [y ln(y/μ) − (y − μ)]`.
pub fn poisson_deviance(y: &Array1<f64>, mu: &Array1<f64>) -> f64 {
    2.0 * y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| if y > 0.0 { y * (y / m).ln() - (y - m) } else { m })
        .sum::<f64>()
}

fn weighted_gram(x: &Array2<f64>, w: &Array1<f64>) -> Array2<f64> {
    let xw = x * &w.view().insert_axis(Axis(1));
    xw.t().dot(x)
}

/// Indices of columns that are not linear combinations of earlier ones,
/// found by Gram-Schmidt on the cross-product matrix.
pub fn independent_columns(gram: &Array2<f64>, tolerance: f64) -> Vec<usize> {
    let p = gram.nrows();
    let mut kept: Vec<usize> = Vec::new();
    // Rows of the Cholesky factor restricted to kept columns.
    let mut l: Vec<Vec<f64>> = Vec::new();
    for j in 0..p {
        let d = gram[[j, j]];
        if !(d > 0.0) {
            continue;
        }
        let mut row = Vec::with_capacity(kept.len() + 1);
        for (a, &k) in kept.iter().enumerate() {
            let dot: f64 = (0..a).map(|b| l[a][b] * row[b]).sum();
            row.push((gram[[j, k]] - dot) / l[a][a]);
        }
        let residual = d - row.iter().map(|v| v * v).sum::<f64>();
        if residual > tolerance * d {
            row.push(residual.sqrt());
            l.push(row);
            kept.push(j);
        }
    }
    kept
}

fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let p = a.nrows();
    let m = DMatrix::from_row_iterator(p, p, a.iter().copied());
    let v = DVector::from_iterator(p, b.iter().copied());
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Evaluation("IRLS normal equations are not positive definite".into()))?;
    Ok(chol.solve(&v).iter().copied().collect())
}

struct IrlsStep {
    beta: Array1<f64>,
    eta: Array1<f64>,
    mu: Array1<f64>,
    deviance: f64,
}

/// One weighted least-squares update, halved toward `beta` while the
/// deviance would increase (when `guard` is set).
#[allow(clippy::too_many_arguments)]
fn irls_step(
    x: &Array2<f64>,
    y: &Array1<f64>,
    offset: &Array1<f64>,
    eta: &Array1<f64>,
    mu: &Array1<f64>,
    beta: &Array1<f64>,
    deviance: f64,
    guard: bool,
) -> Result<IrlsStep> {
    let z = eta - offset + (y - mu) / mu;
    let xtwx = weighted_gram(x, mu);
    let xtwz = x.t().dot(&(mu * &z));
    let mut candidate = solve_spd(&xtwx, &xtwz)?;
    let mut halvings = 0;
    loop {
        let new_eta = x.dot(&candidate) + offset;
        let new_mu = new_eta.mapv(f64::exp);
        let new_dev = poisson_deviance(y, &new_mu);
        let worse = !new_dev.is_finite() || new_dev > deviance;
        if !(guard && worse) || halvings >= 50 {
            if !new_dev.is_finite() {
                return Err(Error::Evaluation("IRLS diverged".into()));
            }
            return Ok(IrlsStep {
                beta: candidate,
                eta: new_eta,
                mu: new_mu,
                deviance: new_dev,
            });
        }
        candidate = (&candidate + beta) / 2.0;
        halvings += 1;
    }
}

/// Fits `response ~ terms` by IRLS using the columns of `design`.
pub fn fit_with_design(table: &RawTable, design: &GlmDesign, options: &GlmOptions) -> Result<GlmFit> {
    let y = design.response(table)?;
    let x_full = design.matrix(table)?;
    let offset = design.offset_values(table)?;
    let n = y.len();
    if n == 0 {
        return Err(Error::Evaluation("cannot fit a GLM to an empty table".into()));
    }
    if y.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Evaluation("response must be non-negative counts".into()));
    }
    if y.sum() == 0.0 {
        return Err(Error::Evaluation("response is identically zero".into()));
    }

    let kept = independent_columns(&weighted_gram(&x_full, &Array1::ones(n)), 1e-9);
    let labels = design.labels();
    let dropped: Vec<String> = (0..labels.len())
        .filter(|j| !kept.contains(j))
        .map(|j| labels[j].clone())
        .collect();
    if !dropped.is_empty() {
        warn!("dropping aliased GLM columns: {}", dropped.join(", "));
    }
    let x = x_full.select(Axis(1), &kept);

    let mut mu = y.mapv(|v| v + 0.1);
    let mut eta = mu.mapv(f64::ln);
    let mut beta = Array1::<f64>::zeros(kept.len());
    let mut deviance = poisson_deviance(&y, &mu);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iterations {
        iterations += 1;
        let step = irls_step(&x, &y, &offset, &eta, &mu, &beta, deviance, iterations > 1)?;
        let change = (step.deviance - deviance).abs() / (step.deviance.abs() + 0.1);
        (beta, eta, mu, deviance) = (step.beta, step.eta, step.mu, step.deviance);
        trace.push(deviance);
        if iterations > 1 && change < options.tolerance {
            converged = true;
            break;
        }
    }
    if converged {
        // The stopping rule leaves an error near the square root of the
        // tolerance. Newton steps converge quadratically from here; they run
        // unguarded because at the optimum the deviance only changes by
        // rounding noise, which would trigger needless halving.
        for _ in 0..3 {
            let step = irls_step(&x, &y, &offset, &eta, &mu, &beta, deviance, false)?;
            let moved = step
                .beta
                .iter()
                .zip(&beta)
                .map(|(n, o)| (n - o).abs() / (1.0 + o.abs()))
                .fold(0.0, f64::max);
            (beta, eta, mu, deviance) = (step.beta, step.eta, step.mu, step.deviance);
            trace.push(deviance);
            iterations += 1;
            if moved < 1e-13 {
                break;
            }
        }
    }

    let mut coefficients: Vec<GlmCoefficient> = labels
        .iter()
        .map(|t| GlmCoefficient {
            term: t.clone(),
            estimate: None,
        })
        .collect();
    for (k, &j) in kept.iter().enumerate() {
        coefficients[j].estimate = Some(beta[k]);
    }
    Ok(GlmFit {
        design: design.clone(),
        coefficients,
        converged,
        iterations,
        deviance,
        deviance_trace: trace,
        dropped,
    })
}

/// Fits the Poisson GLM of the target on all other variables of `schema`.
pub fn fit_poisson_glm(table: &RawTable, schema: &DatasetSchema, options: &GlmOptions) -> Result<GlmFit> {
    fit_with_design(table, &GlmDesign::from_schema(schema, options), options)
}
