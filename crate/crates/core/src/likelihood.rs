//! Marginal likelihood over the quadrature grid, the L1 penalty, and the
//! penalized objective.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{clamped_ln, fill_category_probs, normal_log_density, ModelParams, QuadratureGrid, ResponseMatrix};

/// Respondents per work unit. Fixed so that reductions do not depend on the
/// number of worker threads.
pub(crate) const CHUNK: usize = 128;

/// Value of the penalized objective at one parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub loglik: f64,
    pub penalty: f64,
    pub penalized: f64,
    pub lambda: f64,
}

impl ObjectiveValue {
    pub fn new(loglik: f64, penalty: f64, lambda: f64) -> Self {
        Self {
            loglik,
            penalty,
            penalized: -loglik + lambda * penalty,
            lambda,
        }
    }
}

/// Relative weights of uniform and non-uniform DIF inside the penalty.
///
/// Separate tuning parameters `(lambda_u, lambda_n)` correspond to
/// `lambda = lambda_u` with `nonuniform = lambda_n / lambda_u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyWeights {
    pub uniform: f64,
    pub nonuniform: f64,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        Self {
            uniform: 1.0,
            nonuniform: 1.0,
        }
    }
}

/// `sum_j sum_{k>=1} |dint_jk| + |dslope_jk|`.
pub fn penalty_value(params: &ModelParams) -> f64 {
    let mut total = 0.0;
    for j in 0..params.n_items() {
        for k in 1..params.n_classes() {
            total += params.dif_intercept[j][k].abs();
            total += params.dif_slope[j][k].abs();
        }
    }
    total
}

pub fn weighted_penalty(params: &ModelParams, weights: PenaltyWeights) -> f64 {
    if weights == PenaltyWeights::default() {
        return penalty_value(params);
    }
    let mut uni = 0.0;
    let mut non = 0.0;
    for j in 0..params.n_items() {
        for k in 1..params.n_classes() {
            uni += params.dif_intercept[j][k].abs();
            non += params.dif_slope[j][k].abs();
        }
    }
    weights.uniform * uni + weights.nonuniform * non
}

/// Per-item log category probabilities and per-cell log prior weights.
///
/// Cells enumerate `(class, node)` pairs as `class * G + node`.
pub(crate) struct LogTables {
    pub n_cells: usize,
    /// `items[j][(category - 1) * n_cells + cell]`
    pub items: Vec<Vec<f64>>,
    /// `ln nu_k + ln w_g + ln phi(theta_g; mu_k, sd_k^2)`
    pub log_prior: Vec<f64>,
}

impl LogTables {
    pub fn build(params: &ModelParams, grid: &QuadratureGrid) -> Self {
        let n_nodes = grid.len();
        let n_classes = params.n_classes();
        let n_cells = n_nodes * n_classes;
        let mut probs = Vec::new();
        let items = (0..params.n_items())
            .map(|j| {
                let taus = &params.thresholds[j];
                let n_cat = taus.len() + 1;
                probs.resize(n_cat, 0.0);
                let mut table = vec![0.0; n_cat * n_cells];
                for k in 0..n_classes {
                    let slope = params.combined_slope(j, k);
                    let shift = params.dif_intercept[j][k];
                    for (g, &theta) in grid.nodes().iter().enumerate() {
                        fill_category_probs(taus, slope, shift, theta, &mut probs);
                        let cell = k * n_nodes + g;
                        for (c, &p) in probs.iter().enumerate() {
                            table[c * n_cells + cell] = clamped_ln(p);
                        }
                    }
                }
                table
            })
            .collect();
        let mut log_prior = vec![0.0; n_cells];
        for k in 0..n_classes {
            let ln_nu = params.class_probs[k].ln();
            for (g, (&theta, &w)) in grid.nodes().iter().zip(grid.weights()).enumerate() {
                log_prior[k * n_nodes + g] =
                    ln_nu + w.ln() + normal_log_density(theta, params.class_means[k], params.class_sds[k]);
            }
        }
        Self {
            n_cells,
            items,
            log_prior,
        }
    }

    /// Writes the log joint `ln(nu_k w_g prod_j P(y_j | theta_g, k) phi)` per cell.
    #[inline]
    pub fn log_joint(&self, row: &[u8], out: &mut [f64]) {
        out.copy_from_slice(&self.log_prior);
        let n = self.n_cells;
        for (table, &y) in self.items.iter().zip(row) {
            let start = (y as usize - 1) * n;
            for (o, &t) in out.iter_mut().zip(&table[start..start + n]) {
                *o += t;
            }
        }
    }
}

/// `ln sum exp(x)` with max-shift; `-inf` when every entry is `-inf`.
#[inline]
pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    let s: f64 = x.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

fn check_row(params: &ModelParams, row: &[u8]) -> Result<()> {
    if row.len() != params.n_items() {
        return Err(Error::Dimension(format!(
            "response row has {} items, parameters have {}",
            row.len(),
            params.n_items()
        )));
    }
    for (j, &y) in row.iter().enumerate() {
        if y == 0 || y as usize > params.thresholds[j].len() + 1 {
            return Err(Error::InvalidData(format!("response {y} out of range for item {j}")));
        }
    }
    Ok(())
}

/// Log of the marginal likelihood contribution of one response row.
pub fn respondent_loglik(params: &ModelParams, row: &[u8], grid: &QuadratureGrid) -> Result<f64> {
    params.ensure_valid()?;
    check_row(params, row)?;
    let tables = LogTables::build(params, grid);
    let mut buf = vec![0.0; tables.n_cells];
    tables.log_joint(row, &mut buf);
    let ll = log_sum_exp(&buf);
    if !ll.is_finite() {
        return Err(Error::Numerical {
            respondent: 0,
            what: format!("log-likelihood is {ll}"),
        });
    }
    Ok(ll)
}

/// Marginal likelihood contribution `L_i` of one response row.
pub fn respondent_likelihood(params: &ModelParams, row: &[u8], grid: &QuadratureGrid) -> Result<f64> {
    respondent_loglik(params, row, grid).map(f64::exp)
}

/// Runs `f` over fixed-size respondent chunks in parallel and returns the
/// results in chunk order.
pub(crate) fn map_chunks<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    let n_chunks = n.div_ceil(CHUNK);
    (0..n_chunks)
        .into_par_iter()
        .map(|c| f(c * CHUNK..((c + 1) * CHUNK).min(n)))
        .collect()
}

/// Per-respondent log-likelihoods, in row order.
pub fn respondent_logliks(params: &ModelParams, data: &ResponseMatrix, grid: &QuadratureGrid) -> Result<Vec<f64>> {
    params.ensure_valid()?;
    params.check_compatible(data)?;
    let tables = LogTables::build(params, grid);
    let parts = map_chunks(data.n_respondents(), |range| {
        let mut buf = vec![0.0; tables.n_cells];
        range
            .map(|i| {
                tables.log_joint(data.row(i), &mut buf);
                log_sum_exp(&buf)
            })
            .collect::<Vec<_>>()
    });
    let out: Vec<f64> = parts.into_iter().flatten().collect();
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            respondent: i,
            what: format!("log-likelihood is {}", out[i]),
        });
    }
    Ok(out)
}

/// `sum_i ln L_i`, summed in fixed chunk order.
pub fn marginal_loglik(params: &ModelParams, data: &ResponseMatrix, grid: &QuadratureGrid) -> Result<f64> {
    let per = respondent_logliks(params, data, grid)?;
    Ok(ordered_sum(&per))
}

/// Sums chunk partials in chunk order.
pub(crate) fn ordered_sum(values: &[f64]) -> f64 {
    values.chunks(CHUNK).map(|c| c.iter().sum::<f64>()).sum()
}

pub fn penalized_objective(
    params: &ModelParams,
    data: &ResponseMatrix,
    grid: &QuadratureGrid,
    lambda: f64,
) -> Result<ObjectiveValue> {
    penalized_objective_weighted(params, data, grid, lambda, PenaltyWeights::default())
}

pub fn penalized_objective_weighted(
    params: &ModelParams,
    data: &ResponseMatrix,
    grid: &QuadratureGrid,
    lambda: f64,
    weights: PenaltyWeights,
) -> Result<ObjectiveValue> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda must be non-negative, got {lambda}")));
    }
    let ll = marginal_loglik(params, data, grid)?;
    Ok(ObjectiveValue::new(ll, weighted_penalty(params, weights), lambda))
}
