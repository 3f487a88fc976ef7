//! Tuning-parameter paths, BIC, and the confirmatory refit on a selected
//! sparsity pattern.

use serde::{Deserialize, Serialize};

use crate::em::{fit_constrained, fit_from, DifMask, EMConfig, FitResult};
use crate::error::{Error, Result};
use crate::model::{ActiveEffect, EffectType, ModelParams, QuadratureGrid, ResponseMatrix};

/// Ten log-equally spaced values from 1e-6 to 1e-2.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..10).map(|i| 10f64.powf(-6.0 + 4.0 * i as f64 / 9.0)).collect()
}

/// Free parameters of a model with the given DIF pattern:
/// thresholds, slopes, active DIF effects and 3 structural parameters per extra class.
pub fn degrees_of_freedom(active: &[ActiveEffect], data: &ResponseMatrix, k_extra: usize) -> usize {
    let thresholds: usize = data.n_categories().iter().map(|m| m - 1).sum();
    thresholds + data.n_items() + active.len() + 3 * k_extra
}

/// `-2 loglik + ln(n) df`.
pub fn bic(loglik: f64, n: usize, df: usize) -> f64 {
    -2.0 * loglik + (n as f64).ln() * df as f64
}

/// One tuning-parameter value on a path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEntry {
    pub lambda: f64,
    pub fit: FitResult,
    pub refit: FitResult,
    pub df: usize,
    pub bic: f64,
}

impl PathEntry {
    pub fn n_active(&self, effect: EffectType) -> usize {
        self.refit.active_set.iter().filter(|e| e.effect == effect).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegPath {
    pub k_extra: usize,
    pub entries: Vec<PathEntry>,
    pub selected_index: usize,
}

impl RegPath {
    pub fn selected(&self) -> &PathEntry {
        &self.entries[self.selected_index]
    }
}

/// Unpenalized fit from the default start with DIF outside `active` pinned at zero.
pub fn confirmatory_refit(
    data: &ResponseMatrix,
    k_extra: usize,
    active: &[ActiveEffect],
    grid: &QuadratureGrid,
    config: &EMConfig,
) -> Result<FitResult> {
    let init = ModelParams::default_init(data, k_extra);
    confirmatory_refit_from(data, &init, active, grid, config)
}

/// Unpenalized fit started from `start` (typically the penalized solution).
pub fn confirmatory_refit_from(
    data: &ResponseMatrix,
    start: &ModelParams,
    active: &[ActiveEffect],
    grid: &QuadratureGrid,
    config: &EMConfig,
) -> Result<FitResult> {
    let mask = DifMask::from_active(start.n_items(), start.n_classes(), active)?;
    fit_constrained(data, start, mask, grid, config)
}

/// Index of the smallest BIC, first one on ties.
fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Penalized fits along an ascending grid, each warm-started from the
/// previous solution and followed by a confirmatory refit; selects the
/// smallest BIC.
pub fn run_path(
    data: &ResponseMatrix,
    k_extra: usize,
    lambdas: &[f64],
    grid: &QuadratureGrid,
    config: &EMConfig,
) -> Result<RegPath> {
    if lambdas.is_empty() {
        return Err(Error::InvalidConfig("empty lambda grid".into()));
    }
    if lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
        return Err(Error::InvalidConfig("lambda values must be non-negative".into()));
    }
    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|&a, &b| lambdas[a].total_cmp(&lambdas[b]));
    let mut entries = Vec::with_capacity(lambdas.len());
    let mut start = ModelParams::default_init(data, k_extra);
    let mut cfg = config.clone();
    for (pos, &idx) in order.iter().enumerate() {
        let lambda = lambdas[idx];
        let fit = fit_from(data, &start, lambda, grid, &cfg)?;
        let refit = confirmatory_refit_from(data, &fit.params, &fit.active_set, grid, config)?;
        let df = degrees_of_freedom(&refit.active_set, data, k_extra);
        let b = bic(refit.objective.loglik, data.n_respondents(), df);
        start = fit.params.clone();
        if pos == 0 {
            // later points are warm-started; extra random starts only pay off at the first
            cfg.n_starts = 1;
        }
        entries.push(PathEntry {
            lambda,
            fit,
            refit,
            df,
            bic: b,
        });
    }
    let bics: Vec<f64> = entries.iter().map(|e| e.bic).collect();
    Ok(RegPath {
        k_extra,
        selected_index: argmin_first(&bics),
        entries,
    })
}

/// Selected model for one candidate number of extra classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KComparison {
    pub k_extra: usize,
    pub path: RegPath,
}

impl KComparison {
    pub fn bic(&self) -> f64 {
        self.path.selected().bic
    }
}

/// Runs a path for every candidate K and returns them with the index of the
/// smallest selected BIC.
pub fn compare_k(
    data: &ResponseMatrix,
    k_candidates: &[usize],
    lambdas: &[f64],
    grid: &QuadratureGrid,
    config: &EMConfig,
) -> Result<(Vec<KComparison>, usize)> {
    if k_candidates.is_empty() {
        return Err(Error::InvalidConfig("no K candidates".into()));
    }
    let mut out = Vec::with_capacity(k_candidates.len());
    for &k in k_candidates {
        // a single-class model has no DIF, so its path is flat in lambda
        let grid_k: &[f64] = if k == 0 { &lambdas[..1] } else { lambdas };
        out.push(KComparison {
            k_extra: k,
            path: run_path(data, k, grid_k, grid, config)?,
        });
    }
    let bics: Vec<f64> = out.iter().map(|c| c.bic()).collect();
    let best = argmin_first(&bics);
    Ok((out, best))
}
