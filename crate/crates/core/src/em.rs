//! Penalized EM: E-step posteriors, proximal-gradient M-step with a shared
//! backtracking line search, and the outer fitting loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{log_sum_exp, map_chunks, ordered_sum, weighted_penalty, LogTables, ObjectiveValue, PenaltyWeights};
use crate::model::{
    clamped_ln, fill_category_probs, logistic, normal_log_density, project_thresholds, ActiveEffect, EffectType,
    ModelParams, QuadratureGrid, ResponseMatrix, PROB_FLOOR, SD_FLOOR, SLOPE_EPS,
};

const NORMALIZATION_TOL: f64 = 1e-10;
// keeps the diagonal scaling finite for parameters with no posterior weight
const CURVATURE_FLOOR: f64 = 1e-8;

/// Joint posterior over (class, node) for every respondent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTable {
    n_respondents: usize,
    n_classes: usize,
    n_nodes: usize,
    /// `q[(i * n_classes + k) * n_nodes + g]`
    q: Vec<f64>,
    /// `class_marginals[i * n_classes + k]`
    class_marginals: Vec<f64>,
}

impl PosteriorTable {
    /// Builds a table from raw weights without normalizing.
    pub fn from_raw(n_respondents: usize, n_classes: usize, n_nodes: usize, q: Vec<f64>) -> Result<Self> {
        if q.len() != n_respondents * n_classes * n_nodes {
            return Err(Error::Dimension("posterior weights".into()));
        }
        let class_marginals = q.chunks(n_nodes).map(|c| c.iter().sum()).collect();
        Ok(Self {
            n_respondents,
            n_classes,
            n_nodes,
            q,
            class_marginals,
        })
    }

    pub fn n_respondents(&self) -> usize {
        self.n_respondents
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    #[inline]
    pub fn q(&self, i: usize, k: usize, g: usize) -> f64 {
        self.q[(i * self.n_classes + k) * self.n_nodes + g]
    }

    /// All `(class, node)` weights of respondent `i`, class-major.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.n_classes * self.n_nodes;
        &self.q[i * w..(i + 1) * w]
    }

    pub fn class_marginals(&self, i: usize) -> &[f64] {
        &self.class_marginals[i * self.n_classes..(i + 1) * self.n_classes]
    }

    /// Class with the largest posterior probability (first on ties).
    pub fn map_class(&self, i: usize) -> usize {
        let p = self.class_marginals(i);
        let mut best = 0;
        for k in 1..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        best
    }

    pub fn map_classes(&self) -> Vec<usize> {
        (0..self.n_respondents).map(|i| self.map_class(i)).collect()
    }

    /// Fails on the first row whose weights do not sum to one.
    pub fn check_normalized(&self) -> Result<()> {
        for i in 0..self.n_respondents {
            let s: f64 = self.row(i).iter().sum();
            if (s - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::UnnormalizedPosterior { respondent: i, sum: s });
            }
        }
        Ok(())
    }

    /// Reorders classes: new class `c` is old class `order[c]`.
    pub fn permute_classes(&self, order: &[usize]) -> Self {
        let (nk, ng) = (self.n_classes, self.n_nodes);
        let mut q = vec![0.0; self.q.len()];
        for i in 0..self.n_respondents {
            for (c, &o) in order.iter().enumerate() {
                let src = (i * nk + o) * ng;
                let dst = (i * nk + c) * ng;
                q[dst..dst + ng].copy_from_slice(&self.q[src..src + ng]);
            }
        }
        let mut class_marginals = vec![0.0; self.class_marginals.len()];
        for i in 0..self.n_respondents {
            for (c, &o) in order.iter().enumerate() {
                class_marginals[i * nk + c] = self.class_marginals[i * nk + o];
            }
        }
        Self {
            q,
            class_marginals,
            ..*self
        }
    }
}

/// Initial step sizes of the M-step, one per parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    pub slope: f64,
    pub threshold: f64,
    pub dif: f64,
    pub mean: f64,
    pub sd: f64,
}

impl StepSizes {
    pub fn uniform(eta: f64) -> Self {
        Self {
            slope: eta,
            threshold: eta,
            dif: eta,
            mean: eta,
            sd: eta,
        }
    }

    fn scaled(&self, f: f64) -> Self {
        Self {
            slope: self.slope * f,
            threshold: self.threshold * f,
            dif: self.dif * f,
            mean: self.mean * f,
            sd: self.sd * f,
        }
    }

    fn all_positive(&self) -> bool {
        [self.slope, self.threshold, self.dif, self.mean, self.sd]
            .iter()
            .all(|&x| x > 0.0 && x.is_finite())
    }
}

/// How the nominal tuning parameter maps onto the weight of the penalty in
/// `-loglik + weight * penalty`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyScale {
    /// `weight = lambda * N`: lambda is a per-respondent penalty.
    PerRespondent,
    /// `weight = lambda`.
    Total,
}

impl PenaltyScale {
    pub fn weight(self, lambda: f64, n_respondents: usize) -> f64 {
        match self {
            PenaltyScale::PerRespondent => lambda * n_respondents as f64,
            PenaltyScale::Total => lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EMConfig {
    pub max_iters: usize,
    /// Convergence threshold on the absolute change of the penalized
    /// objective divided by N.
    pub tol: f64,
    /// Initial step sizes in the curvature-scaled metric.
    pub steps: StepSizes,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    pub seed: u64,
    pub n_starts: usize,
    /// Start each line search from the last accepted step sizes instead of
    /// the initial ones.
    pub carry_step_sizes: bool,
    pub penalty_scale: PenaltyScale,
    pub penalty_weights: PenaltyWeights,
    /// Proximal-gradient passes over the expected complete-data objective per
    /// M-step. The sufficient statistics are fixed within an M-step, so these
    /// passes do not touch the data.
    pub inner_iters: usize,
    /// Squared extrapolation between pairs of EM maps, kept only when it lowers
    /// the objective.
    pub accelerate: bool,
}

impl Default for EMConfig {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            tol: 1e-6,
            steps: StepSizes::uniform(1.0),
            backtrack_factor: 0.5,
            max_backtracks: 30,
            seed: 0,
            n_starts: 1,
            carry_step_sizes: false,
            penalty_scale: PenaltyScale::PerRespondent,
            penalty_weights: PenaltyWeights::default(),
            inner_iters: 5,
            accelerate: true,
        }
    }
}

impl EMConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.max_iters == 0 {
            return bad("max_iters must be positive");
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return bad("tol must be positive");
        }
        if !self.steps.all_positive() {
            return bad("step sizes must be positive");
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return bad("backtrack_factor must lie in (0, 1)");
        }
        if self.max_backtracks == 0 {
            return bad("max_backtracks must be positive");
        }
        if self.n_starts == 0 {
            return bad("n_starts must be positive");
        }
        if self.inner_iters == 0 {
            return bad("inner_iters must be positive");
        }
        let w = self.penalty_weights;
        if !(w.uniform >= 0.0 && w.nonuniform >= 0.0 && w.uniform.is_finite() && w.nonuniform.is_finite()) {
            return bad("penalty weights must be non-negative");
        }
        Ok(())
    }
}

/// Which DIF entries may move. Pinned entries are held at zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifMask {
    /// `[item][class]`
    pub uniform: Vec<Vec<bool>>,
    pub nonuniform: Vec<Vec<bool>>,
}

impl DifMask {
    /// Every non-reference entry is free.
    pub fn all_free(n_items: usize, n_classes: usize) -> Self {
        let row: Vec<bool> = (0..n_classes).map(|k| k > 0).collect();
        Self {
            uniform: vec![row.clone(); n_items],
            nonuniform: vec![row; n_items],
        }
    }

    /// Only the listed effects are free.
    pub fn from_active(n_items: usize, n_classes: usize, active: &[ActiveEffect]) -> Result<Self> {
        let mut m = Self {
            uniform: vec![vec![false; n_classes]; n_items],
            nonuniform: vec![vec![false; n_classes]; n_items],
        };
        for e in active {
            if e.item >= n_items || e.class == 0 || e.class >= n_classes {
                return Err(Error::Contract(format!("active effect {e:?} outside the model")));
            }
            match e.effect {
                EffectType::Uniform => m.uniform[e.item][e.class] = true,
                EffectType::Nonuniform => m.nonuniform[e.item][e.class] = true,
            }
        }
        Ok(m)
    }

    fn apply(&self, params: &mut ModelParams) {
        for j in 0..params.n_items() {
            for k in 0..params.n_classes() {
                if !self.uniform[j][k] {
                    params.dif_intercept[j][k] = 0.0;
                }
                if !self.nonuniform[j][k] {
                    params.dif_slope[j][k] = 0.0;
                }
            }
        }
    }
}

/// Outcome of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub objective: ObjectiveValue,
    /// Nominal tuning parameter; `objective.lambda` holds the applied weight.
    pub lambda: f64,
    pub n_iters: usize,
    pub converged: bool,
    /// Convergence was declared because no step size gave descent.
    pub stalled: bool,
    pub active_set: Vec<ActiveEffect>,
    pub posterior: PosteriorTable,
    /// Penalized objective after initialization and after every accepted iteration.
    pub trace: Vec<f64>,
}

/// Partial derivatives of Q with respect to the free parameters.
///
/// DIF and class-distribution entries are indexed by `k - 1` (non-reference classes only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QGradient {
    pub slopes: Vec<f64>,
    pub thresholds: Vec<Vec<f64>>,
    pub dif_intercept: Vec<Vec<f64>>,
    pub dif_slope: Vec<Vec<f64>>,
    pub class_means: Vec<f64>,
    pub class_sds: Vec<f64>,
}

impl QGradient {
    fn zeros(params: &ModelParams) -> Self {
        let kx = params.n_classes_extra();
        Self {
            slopes: vec![0.0; params.n_items()],
            thresholds: params.thresholds.iter().map(|t| vec![0.0; t.len()]).collect(),
            dif_intercept: vec![vec![0.0; kx]; params.n_items()],
            dif_slope: vec![vec![0.0; kx]; params.n_items()],
            class_means: vec![0.0; kx],
            class_sds: vec![0.0; kx],
        }
    }
}

/// Per-respondent log joints and log-likelihoods at one parameter vector.
pub(crate) struct Evaluation {
    n_cells: usize,
    log_joint: Vec<f64>,
    row_loglik: Vec<f64>,
    loglik: f64,
}

pub(crate) fn evaluate(params: &ModelParams, data: &ResponseMatrix, grid: &QuadratureGrid) -> Result<Evaluation> {
    let tables = LogTables::build(params, grid);
    let n_cells = tables.n_cells;
    let parts = map_chunks(data.n_respondents(), |range| {
        let mut lj = vec![0.0; range.len() * n_cells];
        let mut ll = Vec::with_capacity(range.len());
        for (r, i) in range.enumerate() {
            let out = &mut lj[r * n_cells..(r + 1) * n_cells];
            tables.log_joint(data.row(i), out);
            ll.push(log_sum_exp(out));
        }
        (lj, ll)
    });
    let mut log_joint = Vec::with_capacity(data.n_respondents() * n_cells);
    let mut row_loglik = Vec::with_capacity(data.n_respondents());
    for (lj, ll) in parts {
        log_joint.extend(lj);
        row_loglik.extend(ll);
    }
    if let Some(i) = row_loglik.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            respondent: i,
            what: format!("posterior weights are all zero or non-finite (log-likelihood {})", row_loglik[i]),
        });
    }
    let loglik = ordered_sum(&row_loglik);
    Ok(Evaluation {
        n_cells,
        log_joint,
        row_loglik,
        loglik,
    })
}

fn posterior_from(eval: &Evaluation, n_classes: usize, n_nodes: usize) -> PosteriorTable {
    let n = eval.row_loglik.len();
    let mut q = vec![0.0; eval.log_joint.len()];
    for i in 0..n {
        let ll = eval.row_loglik[i];
        let range = i * eval.n_cells..(i + 1) * eval.n_cells;
        for (dst, &lj) in q[range.clone()].iter_mut().zip(&eval.log_joint[range]) {
            *dst = (lj - ll).exp();
        }
    }
    PosteriorTable::from_raw(n, n_classes, n_nodes, q).expect("shape matches")
}

/// Posterior over (class, node) for every respondent at `params`.
pub fn e_step(params: &ModelParams, data: &ResponseMatrix, grid: &QuadratureGrid) -> Result<PosteriorTable> {
    params.ensure_valid()?;
    params.check_compatible(data)?;
    let eval = evaluate(params, data, grid)?;
    Ok(posterior_from(&eval, params.n_classes(), grid.len()))
}

/// Expected category counts per (item, category, cell) and total weight per cell.
pub(crate) struct SufficientStats {
    n_cells: usize,
    /// `counts[j][c * n_cells + cell]`
    counts: Vec<Vec<f64>>,
    cell_weight: Vec<f64>,
    n_respondents: usize,
}

impl SufficientStats {
    fn from_posterior(post: &PosteriorTable, data: &ResponseMatrix) -> Self {
        let n_cells = post.n_classes * post.n_nodes;
        let cats = data.n_categories();
        let parts = map_chunks(data.n_respondents(), |range| {
            let mut counts: Vec<Vec<f64>> = cats.iter().map(|&m| vec![0.0; m * n_cells]).collect();
            let mut cw = vec![0.0; n_cells];
            for i in range {
                let q = post.row(i);
                for (c, &v) in cw.iter_mut().zip(q) {
                    *c += v;
                }
                for (j, &y) in data.row(i).iter().enumerate() {
                    let start = (y as usize - 1) * n_cells;
                    for (c, &v) in counts[j][start..start + n_cells].iter_mut().zip(q) {
                        *c += v;
                    }
                }
            }
            (counts, cw)
        });
        let mut iter = parts.into_iter();
        let (mut counts, mut cell_weight) = iter.next().expect("at least one respondent");
        for (c, w) in iter {
            for (dst, src) in counts.iter_mut().zip(c) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            for (d, s) in cell_weight.iter_mut().zip(w) {
                *d += s;
            }
        }
        Self {
            n_cells,
            counts,
            cell_weight,
            n_respondents: data.n_respondents(),
        }
    }

    fn class_weight(&self, k: usize, n_nodes: usize) -> f64 {
        self.cell_weight[k * n_nodes..(k + 1) * n_nodes].iter().sum()
    }
}

fn q_from_stats(params: &ModelParams, stats: &SufficientStats, grid: &QuadratureGrid) -> f64 {
    let n_nodes = grid.len();
    let mut total = 0.0;
    let mut probs = Vec::new();
    for j in 0..params.n_items() {
        let taus = &params.thresholds[j];
        let n_cat = taus.len() + 1;
        probs.resize(n_cat, 0.0);
        for k in 0..params.n_classes() {
            let slope = params.combined_slope(j, k);
            let shift = params.dif_intercept[j][k];
            for (g, &theta) in grid.nodes().iter().enumerate() {
                fill_category_probs(taus, slope, shift, theta, &mut probs);
                let cell = k * n_nodes + g;
                for (c, &p) in probs.iter().enumerate() {
                    let n = stats.counts[j][c * stats.n_cells + cell];
                    if n != 0.0 {
                        total += n * clamped_ln(p);
                    }
                }
            }
        }
    }
    for k in 0..params.n_classes() {
        let ln_nu = params.class_probs[k].ln();
        for (g, &theta) in grid.nodes().iter().enumerate() {
            let w = stats.cell_weight[k * n_nodes + g];
            if w != 0.0 {
                total += w * (normal_log_density(theta, params.class_means[k], params.class_sds[k]) + ln_nu);
            }
        }
    }
    total
}

/// Expected complete-data log-likelihood `Q(params | posterior)`.
pub fn q_function(
    params: &ModelParams,
    posterior: &PosteriorTable,
    data: &ResponseMatrix,
    grid: &QuadratureGrid,
) -> Result<f64> {
    check_posterior(params, posterior, data, grid)?;
    let stats = SufficientStats::from_posterior(posterior, data);
    Ok(q_from_stats(params, &stats, grid))
}

fn check_posterior(
    params: &ModelParams,
    posterior: &PosteriorTable,
    data: &ResponseMatrix,
    grid: &QuadratureGrid,
) -> Result<()> {
    params.ensure_valid()?;
    params.check_compatible(data)?;
    if posterior.n_respondents != data.n_respondents()
        || posterior.n_classes != params.n_classes()
        || posterior.n_nodes != grid.len()
    {
        return Err(Error::Dimension("posterior table does not match data, params and grid".into()));
    }
    posterior.check_normalized()
}

/// Gradient and Fisher-information diagonal of Q in one pass.
fn gradient_and_curvature(params: &ModelParams, stats: &SufficientStats, grid: &QuadratureGrid) -> (QGradient, QGradient) {
    let n_nodes = grid.len();
    let mut grad = QGradient::zeros(params);
    let mut curv = QGradient::zeros(params);
    let mut probs = Vec::new();
    let mut s = Vec::new();
    for j in 0..params.n_items() {
        let taus = &params.thresholds[j];
        let n_cut = taus.len();
        let n_cat = n_cut + 1;
        probs.resize(n_cat, 0.0);
        s.resize(n_cut, 0.0);
        for k in 0..params.n_classes() {
            let slope = params.combined_slope(j, k);
            let shift = params.dif_intercept[j][k];
            let mut g_shift_k = 0.0;
            let mut g_slope_k = 0.0;
            let mut h_shift_k = 0.0;
            let mut h_slope_k = 0.0;
            for (g, &theta) in grid.nodes().iter().enumerate() {
                let cell = k * n_nodes + g;
                let counts = |c: usize| stats.counts[j][c * stats.n_cells + cell];
                let w_total: f64 = (0..n_cat).map(counts).sum();
                if w_total == 0.0 {
                    continue;
                }
                fill_category_probs(taus, slope, shift, theta, &mut probs);
                for (m, sm) in s.iter_mut().enumerate() {
                    let p = logistic(taus[m] + shift - slope * theta);
                    *sm = p * (1.0 - p);
                }
                // d ln pi_c / d eta_m is s_m / pi_c for the upper cut and -s_m / pi_c for the lower cut;
                // clamped probabilities have zero derivative.
                let mut u = 0.0;
                let mut info_shift = 0.0;
                for c in 0..n_cat {
                    let pc = probs[c];
                    let upper = if c < n_cut { s[c] } else { 0.0 };
                    let lower = if c > 0 { s[c - 1] } else { 0.0 };
                    let live = pc > PROB_FLOOR && pc < 1.0 - PROB_FLOOR;
                    if live {
                        let inv = 1.0 / pc;
                        let n = counts(c);
                        u += n * (upper - lower) * inv;
                        info_shift += (upper - lower) * (upper - lower) * inv;
                        if c < n_cut {
                            grad.thresholds[j][c] += n * upper * inv;
                        }
                        if c > 0 {
                            grad.thresholds[j][c - 1] -= n * lower * inv;
                        }
                    }
                }
                for m in 0..n_cut {
                    let (lo, hi) = (probs[m], probs[m + 1]);
                    let inv = if lo > PROB_FLOOR { 1.0 / lo } else { 0.0 } + if hi > PROB_FLOOR { 1.0 / hi } else { 0.0 };
                    curv.thresholds[j][m] += w_total * s[m] * s[m] * inv;
                }
                info_shift *= w_total;
                g_shift_k += u;
                g_slope_k -= theta * u;
                h_shift_k += info_shift;
                h_slope_k += theta * theta * info_shift;
            }
            grad.slopes[j] += g_slope_k;
            curv.slopes[j] += h_slope_k;
            if k > 0 {
                grad.dif_intercept[j][k - 1] = g_shift_k;
                grad.dif_slope[j][k - 1] = g_slope_k;
                curv.dif_intercept[j][k - 1] = h_shift_k;
                curv.dif_slope[j][k - 1] = h_slope_k;
            }
        }
    }
    for k in 1..params.n_classes() {
        let (mu, sd) = (params.class_means[k], params.class_sds[k]);
        let var = sd * sd;
        let mut gm = 0.0;
        let mut gs = 0.0;
        for (g, &theta) in grid.nodes().iter().enumerate() {
            let w = stats.cell_weight[k * n_nodes + g];
            let d = theta - mu;
            gm += w * d / var;
            gs += w * (-1.0 / sd + d * d / (var * sd));
        }
        let wk = stats.class_weight(k, n_nodes);
        grad.class_means[k - 1] = gm;
        grad.class_sds[k - 1] = gs;
        curv.class_means[k - 1] = wk / var;
        curv.class_sds[k - 1] = 2.0 * wk / var;
    }
    (grad, curv)
}

/// Analytic partial derivatives of [`q_function`] with respect to every free parameter.
pub fn q_gradients(
    params: &ModelParams,
    posterior: &PosteriorTable,
    data: &ResponseMatrix,
    grid: &QuadratureGrid,
) -> Result<QGradient> {
    check_posterior(params, posterior, data, grid)?;
    let stats = SufficientStats::from_posterior(posterior, data);
    Ok(gradient_and_curvature(params, &stats, grid).0)
}

/// Soft-thresholding: `sign(x) * max(|x| - threshold, 0)`.
#[inline]
pub fn prox_l1(x: f64, threshold: f64) -> f64 {
    debug_assert!(threshold >= 0.0);
    if x > threshold {
        x - threshold
    } else if x < -threshold {
        x + threshold
    } else {
        0.0
    }
}

/// Closed-form class-probability update: average posterior class membership.
fn class_prob_update(stats: &SufficientStats, n_classes: usize, n_nodes: usize) -> Vec<f64> {
    let n = stats.n_respondents as f64;
    let mut nu: Vec<f64> = (0..n_classes).map(|k| stats.class_weight(k, n_nodes) / n).collect();
    let s: f64 = nu.iter().sum();
    for v in nu.iter_mut() {
        *v /= s;
    }
    nu
}

struct Proposal<'a> {
    params: &'a ModelParams,
    grad: &'a QGradient,
    curv: &'a QGradient,
    class_probs: &'a [f64],
    mask: &'a DifMask,
    /// Applied penalty weight on uniform and non-uniform DIF.
    penalty: (f64, f64),
}

impl Proposal<'_> {
    /// One scaled gradient step (proximal for DIF) followed by projection.
    fn step(&self, eta: &StepSizes) -> ModelParams {
        let p = self.params;
        let mut out = p.clone();
        out.class_probs = self.class_probs.to_vec();
        let scaled = |g: f64, h: f64, e: f64| e * g / (h + CURVATURE_FLOOR);
        for j in 0..p.n_items() {
            out.slopes[j] = (p.slopes[j] + scaled(self.grad.slopes[j], self.curv.slopes[j], eta.slope)).max(SLOPE_EPS);
            for (m, t) in out.thresholds[j].iter_mut().enumerate() {
                *t += scaled(self.grad.thresholds[j][m], self.curv.thresholds[j][m], eta.threshold);
            }
            project_thresholds(&mut out.thresholds[j]);
            for k in 1..p.n_classes() {
                let h1 = self.curv.dif_intercept[j][k - 1] + CURVATURE_FLOOR;
                out.dif_intercept[j][k] = if self.mask.uniform[j][k] {
                    let x = p.dif_intercept[j][k] + eta.dif * self.grad.dif_intercept[j][k - 1] / h1;
                    prox_l1(x, self.penalty.0 * eta.dif / h1)
                } else {
                    0.0
                };
                let h2 = self.curv.dif_slope[j][k - 1] + CURVATURE_FLOOR;
                let mut d2 = if self.mask.nonuniform[j][k] {
                    let x = p.dif_slope[j][k] + eta.dif * self.grad.dif_slope[j][k - 1] / h2;
                    prox_l1(x, self.penalty.1 * eta.dif / h2)
                } else {
                    0.0
                };
                if out.slopes[j] + d2 < SLOPE_EPS {
                    d2 = SLOPE_EPS - out.slopes[j];
                }
                out.dif_slope[j][k] = d2;
            }
        }
        for k in 1..p.n_classes() {
            out.class_means[k] += scaled(self.grad.class_means[k - 1], self.curv.class_means[k - 1], eta.mean);
            out.class_sds[k] =
                (p.class_sds[k] + scaled(self.grad.class_sds[k - 1], self.curv.class_sds[k - 1], eta.sd)).max(SD_FLOOR);
        }
        out
    }
}

/// Result of one M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct MStepOutcome {
    pub params: ModelParams,
    pub objective: ObjectiveValue,
    pub backtracks: usize,
    /// No trial step decreased the objective; `params` is the input.
    pub stalled: bool,
    /// Step sizes of the accepted trial.
    pub steps: StepSizes,
}

struct Engine<'a> {
    data: &'a ResponseMatrix,
    grid: &'a QuadratureGrid,
    config: &'a EMConfig,
    /// Applied penalty weight (after [`PenaltyScale`]).
    weight: f64,
    mask: DifMask,
}

impl Engine<'_> {
    fn objective(&self, params: &ModelParams, eval: &Evaluation) -> ObjectiveValue {
        let w = self.config.penalty_weights;
        // fold the relative weights into the penalty so that penalized = -ll + weight * penalty
        ObjectiveValue::new(eval.loglik, weighted_penalty(params, w), self.weight)
    }

    fn penalties(&self) -> (f64, f64) {
        let w = self.config.penalty_weights;
        (self.weight * w.uniform, self.weight * w.nonuniform)
    }

    /// Penalized negative Q for fixed sufficient statistics.
    fn q_objective(&self, params: &ModelParams, stats: &SufficientStats) -> f64 {
        -q_from_stats(params, stats, self.grid) + self.weight * weighted_penalty(params, self.config.penalty_weights)
    }

    /// Repeated proximal-gradient passes on the penalized Q, each with its own
    /// backtracking. Returns `None` if the first pass made no progress.
    fn inner_m_step(
        &self,
        params: &ModelParams,
        stats: &SufficientStats,
        class_probs: &[f64],
        start: StepSizes,
    ) -> Option<ModelParams> {
        let mut cur = params.clone();
        cur.class_probs = class_probs.to_vec();
        let mut cur_val = self.q_objective(&cur, stats);
        let mut moved = false;
        for _ in 0..self.config.inner_iters {
            let (grad, curv) = gradient_and_curvature(&cur, stats, self.grid);
            let proposal = Proposal {
                params: &cur,
                grad: &grad,
                curv: &curv,
                class_probs,
                mask: &self.mask,
                penalty: self.penalties(),
            };
            let mut eta = start;
            let mut next = None;
            for _ in 0..=self.config.max_backtracks {
                let trial = proposal.step(&eta);
                let v = self.q_objective(&trial, stats);
                if v < cur_val {
                    next = Some((trial, v));
                    break;
                }
                eta = eta.scaled(self.config.backtrack_factor);
            }
            let Some((trial, v)) = next else { break };
            let gain = cur_val - v;
            cur = trial;
            cur_val = v;
            moved = true;
            if gain <= 1e-12 * (1.0 + v.abs()) {
                break;
            }
        }
        moved.then_some(cur)
    }

    fn m_step(
        &self,
        params: &ModelParams,
        stats: &SufficientStats,
        current: f64,
        start: StepSizes,
    ) -> (MStepOutcome, Option<Evaluation>) {
        let class_probs = class_prob_update(stats, params.n_classes(), self.grid.len());
        if self.config.inner_iters > 1 {
            if let Some(trial) = self.inner_m_step(params, stats, &class_probs, start) {
                if let Ok(eval) = evaluate(&trial, self.data, self.grid) {
                    let obj = self.objective(&trial, &eval);
                    if obj.penalized < current {
                        return (
                            MStepOutcome {
                                params: trial,
                                objective: obj,
                                backtracks: 0,
                                stalled: false,
                                steps: start,
                            },
                            Some(eval),
                        );
                    }
                }
            }
        }
        let (grad, curv) = gradient_and_curvature(params, stats, self.grid);
        let proposal = Proposal {
            params,
            grad: &grad,
            curv: &curv,
            class_probs: &class_probs,
            mask: &self.mask,
            penalty: self.penalties(),
        };
        let mut eta = start;
        for b in 0..=self.config.max_backtracks {
            let trial = proposal.step(&eta);
            if let Ok(eval) = evaluate(&trial, self.data, self.grid) {
                let obj = self.objective(&trial, &eval);
                if obj.penalized < current {
                    return (
                        MStepOutcome {
                            params: trial,
                            objective: obj,
                            backtracks: b,
                            stalled: false,
                            steps: eta,
                        },
                        Some(eval),
                    );
                }
            }
            eta = eta.scaled(self.config.backtrack_factor);
        }
        let eval = evaluate(params, self.data, self.grid).ok();
        let objective = eval
            .as_ref()
            .map(|e| self.objective(params, e))
            .unwrap_or(ObjectiveValue::new(f64::NAN, f64::NAN, self.weight));
        (
            MStepOutcome {
                params: params.clone(),
                objective,
                backtracks: self.config.max_backtracks,
                stalled: true,
                steps: start,
            },
            eval,
        )
    }

    /// E-step at `params` followed by an M-step.
    fn em_map(
        &self,
        params: &ModelParams,
        eval: &Evaluation,
        current: f64,
        start: StepSizes,
    ) -> (MStepOutcome, Option<Evaluation>) {
        let post = posterior_from(eval, params.n_classes(), self.grid.len());
        let stats = SufficientStats::from_posterior(&post, self.data);
        self.m_step(params, &stats, current, start)
    }

    /// Maps an extrapolated vector back into the feasible set.
    fn project(&self, params: &mut ModelParams) {
        for j in 0..params.n_items() {
            project_thresholds(&mut params.thresholds[j]);
            params.slopes[j] = params.slopes[j].max(SLOPE_EPS);
        }
        self.mask.apply(params);
        for j in 0..params.n_items() {
            for k in 1..params.n_classes() {
                if params.slopes[j] + params.dif_slope[j][k] < SLOPE_EPS {
                    params.dif_slope[j][k] = SLOPE_EPS - params.slopes[j];
                }
            }
        }
        for v in params.class_probs.iter_mut() {
            *v = v.max(1e-8);
        }
        let s: f64 = params.class_probs.iter().sum();
        for v in params.class_probs.iter_mut() {
            *v /= s;
        }
        for k in 1..params.n_classes() {
            params.class_sds[k] = params.class_sds[k].max(SD_FLOOR);
        }
    }

    /// Squared extrapolation from `x0` through two EM maps ending at `x2`.
    /// Returns a point with a lower objective than `f2`, if one is found.
    fn extrapolate(
        &self,
        x0: &ModelParams,
        x1: &ModelParams,
        x2: &ModelParams,
        f2: f64,
        start: StepSizes,
    ) -> Option<(ModelParams, ObjectiveValue, Evaluation)> {
        let (v0, v1, v2) = (flatten(x0), flatten(x1), flatten(x2));
        let r: Vec<f64> = v1.iter().zip(&v0).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = v2.iter().zip(&v1).zip(&r).map(|((a, b), c)| a - b - c).collect();
        let nr = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(nv > 0.0) || !nr.is_finite() {
            return None;
        }
        let mut alpha = -nr / nv;
        for _ in 0..4 {
            if alpha >= -1.0 {
                return None;
            }
            let xv: Vec<f64> = v0
                .iter()
                .zip(&r)
                .zip(&v)
                .map(|((x, r), v)| x - 2.0 * alpha * r + alpha * alpha * v)
                .collect();
            let mut trial = unflatten(x0, &xv);
            self.project(&mut trial);
            if trial.validate().is_empty() {
                if let Ok(eval) = evaluate(&trial, self.data, self.grid) {
                    let obj = self.objective(&trial, &eval);
                    if obj.penalized.is_finite() {
                        // one stabilizing EM map restores exact zeros from the proximal step
                        let (out, new_eval) = self.em_map(&trial, &eval, obj.penalized, start);
                        let (cand, cand_obj, cand_eval) = if out.stalled {
                            (trial, obj, eval)
                        } else {
                            (out.params, out.objective, new_eval.expect("accepted trial has an evaluation"))
                        };
                        if cand_obj.penalized < f2 {
                            return Some((cand, cand_obj, cand_eval));
                        }
                    }
                }
            }
            alpha = (alpha - 1.0) / 2.0;
        }
        None
    }

    fn run(&self, init: ModelParams, lambda: f64, relabel: bool) -> Result<FitResult> {
        let mut params = init;
        self.mask.apply(&mut params);
        params.ensure_valid()?;
        params.check_compatible(self.data)?;
        let n = self.data.n_respondents() as f64;
        let mut eval = evaluate(&params, self.data, self.grid)?;
        let mut objective = self.objective(&params, &eval);
        let mut trace = vec![objective.penalized];
        let mut converged = false;
        let mut stalled = false;
        let mut n_iters = 0;
        let mut steps = self.config.steps;
        'outer: while n_iters < self.config.max_iters {
            let cycle_start = objective.penalized;
            let x0 = params.clone();
            let maps = if self.config.accelerate { 2 } else { 1 };
            let mut x1 = None;
            for step in 0..maps {
                let start = if self.config.carry_step_sizes { steps } else { self.config.steps };
                let (outcome, new_eval) = self.em_map(&params, &eval, objective.penalized, start);
                if outcome.stalled {
                    converged = true;
                    stalled = true;
                    break 'outer;
                }
                params = outcome.params;
                objective = outcome.objective;
                steps = outcome.steps;
                eval = new_eval.expect("accepted trial has an evaluation");
                trace.push(objective.penalized);
                n_iters += 1;
                if n_iters >= self.config.max_iters {
                    break 'outer;
                }
                if step == 0 {
                    x1 = Some(params.clone());
                }
            }
            if let (true, Some(x1)) = (self.config.accelerate, x1) {
                let start = if self.config.carry_step_sizes { steps } else { self.config.steps };
                if let Some((p, obj, e)) = self.extrapolate(&x0, &x1, &params, objective.penalized, start) {
                    params = p;
                    objective = obj;
                    eval = e;
                    trace.push(objective.penalized);
                    n_iters += 1;
                }
            }
            if (cycle_start - objective.penalized).abs() / n < self.config.tol {
                converged = true;
                break;
            }
        }
        let mut posterior = posterior_from(&eval, params.n_classes(), self.grid.len());
        if relabel && params.n_classes() > 2 {
            let mut order: Vec<usize> = (1..params.n_classes()).collect();
            order.sort_by(|&a, &b| params.class_means[a].total_cmp(&params.class_means[b]));
            order.insert(0, 0);
            params = params.permute_classes(&order)?;
            posterior = posterior.permute_classes(&order);
        }
        Ok(FitResult {
            active_set: params.active_set(),
            params,
            objective,
            lambda,
            n_iters,
            converged,
            stalled,
            posterior,
            trace,
        })
    }
}

/// Free parameters as one vector, in a fixed order.
fn flatten(p: &ModelParams) -> Vec<f64> {
    let mut v = Vec::new();
    for t in &p.thresholds {
        v.extend_from_slice(t);
    }
    v.extend_from_slice(&p.slopes);
    for j in 0..p.n_items() {
        v.extend_from_slice(&p.dif_intercept[j][1..]);
        v.extend_from_slice(&p.dif_slope[j][1..]);
    }
    v.extend_from_slice(&p.class_probs);
    v.extend_from_slice(&p.class_means[1..]);
    v.extend_from_slice(&p.class_sds[1..]);
    v
}

/// Inverse of [`flatten`], using `template` for shapes and fixed entries.
fn unflatten(template: &ModelParams, v: &[f64]) -> ModelParams {
    let mut p = template.clone();
    let mut it = v.iter().copied();
    let mut next = || it.next().expect("vector matches template");
    for t in p.thresholds.iter_mut() {
        for x in t.iter_mut() {
            *x = next();
        }
    }
    for a in p.slopes.iter_mut() {
        *a = next();
    }
    let nc = p.n_classes();
    for j in 0..p.n_items() {
        for k in 1..nc {
            p.dif_intercept[j][k] = next();
        }
        for k in 1..nc {
            p.dif_slope[j][k] = next();
        }
    }
    for x in p.class_probs.iter_mut() {
        *x = next();
    }
    for k in 1..nc {
        p.class_means[k] = next();
    }
    for k in 1..nc {
        p.class_sds[k] = next();
    }
    p
}

/// One M-step from `params` given its E-step posterior.
///
/// `lambda` is the applied penalty weight (no [`PenaltyScale`] conversion).
pub fn m_step(
    params: &ModelParams,
    posterior: &PosteriorTable,
    data: &ResponseMatrix,
    grid: &QuadratureGrid,
    lambda: f64,
    config: &EMConfig,
    current_objective: &ObjectiveValue,
) -> Result<MStepOutcome> {
    config.validate()?;
    check_posterior(params, posterior, data, grid)?;
    let engine = Engine {
        data,
        grid,
        config,
        weight: lambda,
        mask: DifMask::all_free(params.n_items(), params.n_classes()),
    };
    let stats = SufficientStats::from_posterior(posterior, data);
    Ok(engine.m_step(params, &stats, current_objective.penalized, config.steps).0)
}

/// Perturbed starting values for multi-start fits.
fn perturbed_start(base: &ModelParams, seed: u64, start: usize) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (start as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut p = base.clone();
    for k in 1..p.n_classes() {
        p.class_means[k] += rng.random_range(-0.25..0.25);
    }
    for a in p.slopes.iter_mut() {
        *a += rng.random_range(-0.2..0.2);
    }
    p
}

/// Penalized fit with `k_extra` non-reference classes from the default start.
pub fn fit(
    data: &ResponseMatrix,
    k_extra: usize,
    lambda: f64,
    grid: &QuadratureGrid,
    config: &EMConfig,
) -> Result<FitResult> {
    let init = ModelParams::default_init(data, k_extra);
    fit_from(data, &init, lambda, grid, config)
}

/// Penalized fit from explicit starting values. With `n_starts > 1` the
/// additional starts perturb class means and slopes; the lowest penalized
/// objective wins.
pub fn fit_from(
    data: &ResponseMatrix,
    init: &ModelParams,
    lambda: f64,
    grid: &QuadratureGrid,
    config: &EMConfig,
) -> Result<FitResult> {
    config.validate()?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda must be non-negative, got {lambda}")));
    }
    let engine = Engine {
        data,
        grid,
        config,
        weight: config.penalty_scale.weight(lambda, data.n_respondents()),
        mask: DifMask::all_free(init.n_items(), init.n_classes()),
    };
    let mut best = engine.run(init.clone(), lambda, true)?;
    for s in 1..config.n_starts {
        let start = perturbed_start(init, config.seed, s);
        if let Ok(r) = engine.run(start, lambda, true) {
            if r.objective.penalized < best.objective.penalized {
                best = r;
            }
        }
    }
    Ok(best)
}

/// Fit with `lambda = 0` and DIF entries outside `mask` pinned at zero.
/// Class labels are kept as given.
pub fn fit_constrained(
    data: &ResponseMatrix,
    init: &ModelParams,
    mask: DifMask,
    grid: &QuadratureGrid,
    config: &EMConfig,
) -> Result<FitResult> {
    config.validate()?;
    if mask.uniform.len() != init.n_items() || mask.uniform.iter().any(|r| r.len() != init.n_classes()) {
        return Err(Error::Dimension("DIF mask does not match parameters".into()));
    }
    let engine = Engine {
        data,
        grid,
        config,
        weight: 0.0,
        mask,
    };
    engine.run(init.clone(), 0.0, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::{marginal_loglik, penalized_objective};

    fn small_data() -> ResponseMatrix {
        ResponseMatrix::new(
            6,
            2,
            vec![3, 3],
            vec![1, 1, 2, 3, 3, 3, 2, 2, 1, 2, 3, 1],
        )
        .unwrap()
    }

    fn two_class_params() -> ModelParams {
        ModelParams {
            thresholds: vec![vec![-0.7, 0.6], vec![-0.2, 1.1]],
            slopes: vec![1.1, 0.8],
            dif_intercept: vec![vec![0.0, 0.4], vec![0.0, 0.0]],
            dif_slope: vec![vec![0.0, -0.2], vec![0.0, 0.3]],
            class_probs: vec![0.7, 0.3],
            class_means: vec![0.0, 0.6],
            class_sds: vec![1.0, 0.8],
        }
    }

    #[test]
    fn prox_examples() {
        assert!((prox_l1(1.2, 0.5) - 0.7).abs() < 1e-15);
        assert_eq!(prox_l1(0.3, 0.5), 0.0);
        assert_eq!(prox_l1(-1.0, 0.5), -0.5);
        assert_eq!(prox_l1(0.5, 0.5), 0.0);
        assert_eq!(prox_l1(-3.0, 0.0), -3.0);
    }

    #[test]
    fn posterior_rows_normalized() {
        let data = small_data();
        let grid = QuadratureGrid::default();
        let post = e_step(&two_class_params(), &data, &grid).unwrap();
        post.check_normalized().unwrap();
        for i in 0..data.n_respondents() {
            let s: f64 = post.class_marginals(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_class_weight_gives_zero_block() {
        let data = small_data();
        let grid = QuadratureGrid::default();
        let mut p = two_class_params();
        p.class_probs = vec![1.0, 0.0];
        let post = e_step(&p, &data, &grid).unwrap();
        for i in 0..data.n_respondents() {
            for g in 0..grid.len() {
                assert_eq!(post.q(i, 1, g), 0.0);
            }
        }
        // Q stays finite with an empty class
        assert!(q_function(&p, &post, &data, &grid).unwrap().is_finite());
        let grad = q_gradients(&p, &post, &data, &grid).unwrap();
        assert_eq!(grad.class_means[0], 0.0);
        assert_eq!(grad.class_sds[0], 0.0);
        assert_eq!(grad.dif_intercept[0][0], 0.0);
    }

    #[test]
    fn flat_likelihood_gives_uniform_posterior() {
        // a single node per class with equal priors and identical class distributions
        let grid = QuadratureGrid::from_parts(vec![-0.5, 0.5], vec![1.0, 1.0]).unwrap();
        let p = ModelParams {
            thresholds: vec![vec![0.0]],
            slopes: vec![SLOPE_EPS],
            dif_intercept: vec![vec![0.0, 0.0]],
            dif_slope: vec![vec![0.0, 0.0]],
            class_probs: vec![0.5, 0.5],
            class_means: vec![0.0, 0.0],
            class_sds: vec![1.0, 1.0],
        };
        let data = ResponseMatrix::new(2, 1, vec![2], vec![1, 2]).unwrap();
        // slopes at the floor are not exactly flat; remove the trait effect with a tiny check instead
        let post = e_step(&p, &data, &grid).unwrap();
        for i in 0..2 {
            for k in 0..2 {
                for g in 0..2 {
                    assert!((post.q(i, k, g) - 0.25).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn unnormalized_posterior_rejected() {
        let data = small_data();
        let grid = QuadratureGrid::default();
        let p = two_class_params();
        let post = e_step(&p, &data, &grid).unwrap();
        let scaled = PosteriorTable::from_raw(
            post.n_respondents(),
            post.n_classes(),
            post.n_nodes(),
            post.q.iter().map(|v| v * 2.0).collect(),
        )
        .unwrap();
        assert!(matches!(
            q_function(&p, &scaled, &data, &grid),
            Err(Error::UnnormalizedPosterior { .. })
        ));
    }

    #[test]
    fn point_mass_posterior_gives_complete_data_loglik() {
        let data = small_data();
        let grid = QuadratureGrid::default();
        let p = two_class_params();
        let n_cells = 2 * grid.len();
        let assign: Vec<(usize, usize)> = (0..6).map(|i| (i % 2, 20 + 3 * i)).collect();
        let mut q = vec![0.0; 6 * n_cells];
        for (i, &(k, g)) in assign.iter().enumerate() {
            q[i * n_cells + k * grid.len() + g] = 1.0;
        }
        let post = PosteriorTable::from_raw(6, 2, grid.len(), q).unwrap();
        let got = q_function(&p, &post, &data, &grid).unwrap();
        let mut want = 0.0;
        for (i, &(k, g)) in assign.iter().enumerate() {
            let theta = grid.nodes()[g];
            for j in 0..2 {
                let probs = p.category_prob(j, k, theta).unwrap();
                want += probs[data.get(i, j) as usize - 1].ln();
            }
            want += normal_log_density(theta, p.class_means[k], p.class_sds[k]) + p.class_probs[k].ln();
        }
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn m_step_class_probability_update() {
        let data = small_data();
        let grid = QuadratureGrid::default();
        let p = two_class_params();
        let post = e_step(&p, &data, &grid).unwrap();
        let obj = penalized_objective(&p, &data, &grid, 0.0).unwrap();
        let out = m_step(&p, &post, &data, &grid, 0.0, &EMConfig::default(), &obj).unwrap();
        assert!(!out.stalled);
        let want: f64 = (0..6).map(|i| post.class_marginals(i)[1]).sum::<f64>() / 6.0;
        assert!((out.params.class_probs[1] - want).abs() < 1e-12);
        assert!(out.objective.penalized < obj.penalized);
        assert!(out.params.validate().is_empty());
    }

    #[test]
    fn class_probability_update_arithmetic() {
        // two respondents with class-1 mass 0.2 and 0.6
        let q = vec![0.8, 0.2, 0.4, 0.6];
        let post = PosteriorTable::from_raw(2, 2, 1, q).unwrap();
        let data = ResponseMatrix::new(2, 1, vec![2], vec![1, 2]).unwrap();
        let stats = SufficientStats::from_posterior(&post, &data);
        let nu = class_prob_update(&stats, 2, 1);
        assert!((nu[1] - 0.4).abs() < 1e-15);
        let q = vec![1.0, 0.0, 1.0, 0.0];
        let post = PosteriorTable::from_raw(2, 2, 1, q).unwrap();
        let stats = SufficientStats::from_posterior(&post, &data);
        assert_eq!(class_prob_update(&stats, 2, 1), vec![1.0, 0.0]);
    }

    #[test]
    fn huge_lambda_zeroes_dif() {
        let data = small_data();
        let grid = QuadratureGrid::default();
        let p = two_class_params();
        let post = e_step(&p, &data, &grid).unwrap();
        let obj = penalized_objective(&p, &data, &grid, 1e3).unwrap();
        let out = m_step(&p, &post, &data, &grid, 1e3, &EMConfig::default(), &obj).unwrap();
        assert!(!out.stalled);
        assert!(out.params.active_set().is_empty());
    }

    #[test]
    fn fit_is_monotone_and_valid() {
        let data = small_data();
        let grid = QuadratureGrid::default();
        let cfg = EMConfig {
            max_iters: 50,
            ..EMConfig::default()
        };
        let r = fit(&data, 1, 0.01, &grid, &cfg).unwrap();
        assert!(r.trace.windows(2).all(|w| w[1] < w[0] + 1e-10));
        assert!(r.params.validate().is_empty());
        assert_eq!(r.active_set, r.params.active_set());
        let ll = marginal_loglik(&r.params, &data, &grid).unwrap();
        assert!((ll - r.objective.loglik).abs() < 1e-9);
    }

    #[test]
    fn constrained_fit_keeps_pins() {
        let data = small_data();
        let grid = QuadratureGrid::default();
        let mask = DifMask::from_active(
            2,
            2,
            &[ActiveEffect {
                item: 0,
                class: 1,
                effect: EffectType::Uniform,
            }],
        )
        .unwrap();
        let cfg = EMConfig {
            max_iters: 30,
            ..EMConfig::default()
        };
        let r = fit_constrained(&data, &two_class_params(), mask, &grid, &cfg).unwrap();
        assert_eq!(r.params.dif_slope[0][1], 0.0);
        assert_eq!(r.params.dif_slope[1][1], 0.0);
        assert_eq!(r.params.dif_intercept[1][1], 0.0);
        assert_eq!(r.objective.lambda, 0.0);
    }

    #[test]
    fn config_validation() {
        let mut c = EMConfig::default();
        c.backtrack_factor = 1.0;
        assert!(c.validate().is_err());
        let mut c = EMConfig::default();
        c.steps.dif = 0.0;
        assert!(c.validate().is_err());
        assert!(EMConfig::default().validate().is_ok());
    }
}
