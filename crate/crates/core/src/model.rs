//! Data and parameter containers plus the proportional-odds response kernel.
//!
//! The cumulative link for item `j`, class `k` and trait value `theta` is
//!
//! ```text
//! logit P(Y <= m) = tau_jm - (a_j + dslope_jk) * theta + dint_jk
//! ```
//!
//! Class 0 is the reference: its DIF shifts are zero and its trait
//! distribution is standard normal.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum spacing between consecutive thresholds of an item.
pub const GAP_EPS: f64 = 1e-3;
/// Floor for baseline and combined slopes.
pub const SLOPE_EPS: f64 = 1e-3;
/// Floor for non-reference class standard deviations.
pub const SD_FLOOR: f64 = 0.1;
/// Category probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before logs.
pub const PROB_FLOOR: f64 = 1e-12;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
// slack for floating-point rounding in projected constraints
const CONSTRAINT_SLACK: f64 = 1e-12;

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Log density of `N(mean, sd^2)` at `x`.
#[inline]
pub fn normal_log_density(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -LN_SQRT_2PI - sd.ln() - 0.5 * z * z
}

#[inline]
pub fn normal_density(x: f64, mean: f64, sd: f64) -> f64 {
    normal_log_density(x, mean, sd).exp()
}

/// Category probabilities for one item at a given linear predictor.
///
/// `out` must have `thresholds.len() + 1` slots. Entries are exact differences
/// of cumulative logistic probabilities (no clamping).
#[inline]
pub fn fill_category_probs(thresholds: &[f64], slope: f64, shift: f64, theta: f64, out: &mut [f64]) {
    let base = shift - slope * theta;
    let n_cut = thresholds.len();
    debug_assert_eq!(out.len(), n_cut + 1);
    let mut prev_eta = f64::NEG_INFINITY;
    let mut prev_p = 0.0;
    for (m, &tau) in thresholds.iter().enumerate() {
        let eta = tau + base;
        let p = logistic(eta);
        // When both cutpoints sit in the upper tail, differencing the
        // complements keeps relative precision.
        out[m] = if prev_eta > 0.0 {
            logistic(-prev_eta) - logistic(-eta)
        } else {
            p - prev_p
        };
        prev_eta = eta;
        prev_p = p;
    }
    out[n_cut] = if prev_eta > 0.0 {
        logistic(-prev_eta)
    } else {
        1.0 - prev_p
    };
}

#[inline]
pub fn clamped_ln(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln()
}

/// An N x J matrix of ordinal responses coded `1..=M_j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseMatrix {
    n_respondents: usize,
    n_items: usize,
    n_categories: Vec<usize>,
    /// Row-major, 1-based category codes.
    values: Vec<u8>,
    item_names: Vec<String>,
}

impl ResponseMatrix {
    /// Builds and validates a response matrix from row-major codes.
    pub fn new(
        n_respondents: usize,
        n_items: usize,
        n_categories: Vec<usize>,
        values: Vec<u8>,
    ) -> Result<Self> {
        let names = (1..=n_items).map(|j| format!("item{j}")).collect();
        Self::with_names(n_respondents, n_items, n_categories, values, names)
    }

    pub fn with_names(
        n_respondents: usize,
        n_items: usize,
        n_categories: Vec<usize>,
        values: Vec<u8>,
        item_names: Vec<String>,
    ) -> Result<Self> {
        if n_respondents == 0 || n_items == 0 {
            return Err(Error::InvalidData("empty response matrix".into()));
        }
        if n_categories.len() != n_items || item_names.len() != n_items {
            return Err(Error::InvalidData(format!(
                "expected {n_items} category counts and item names, got {} and {}",
                n_categories.len(),
                item_names.len()
            )));
        }
        if values.len() != n_respondents * n_items {
            return Err(Error::InvalidData(format!(
                "expected {} values, got {}",
                n_respondents * n_items,
                values.len()
            )));
        }
        for (j, &m) in n_categories.iter().enumerate() {
            if !(2..=u8::MAX as usize).contains(&m) {
                return Err(Error::InvalidData(format!(
                    "item {} must have between 2 and 255 categories, got {m}",
                    j + 1
                )));
            }
        }
        let mut seen = vec![vec![false; 0]; n_items];
        for (j, s) in seen.iter_mut().enumerate() {
            *s = vec![false; n_categories[j] + 1];
        }
        for (idx, &v) in values.iter().enumerate() {
            let (i, j) = (idx / n_items, idx % n_items);
            let m = n_categories[j];
            if v == 0 || v as usize > m {
                return Err(Error::InvalidData(format!(
                    "value {v} outside 1..={m} at row {}, column {}",
                    i + 1,
                    j + 1
                )));
            }
            seen[j][v as usize] = true;
        }
        for (j, s) in seen.iter().enumerate() {
            if s.iter().filter(|&&b| b).count() < 2 {
                return Err(Error::InvalidData(format!(
                    "degenerate item {} ({}): fewer than 2 distinct categories observed",
                    j + 1,
                    item_names[j]
                )));
            }
        }
        Ok(Self {
            n_respondents,
            n_items,
            n_categories,
            values,
            item_names,
        })
    }

    pub fn n_respondents(&self) -> usize {
        self.n_respondents
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_categories(&self) -> &[usize] {
        &self.n_categories
    }

    pub fn item_names(&self) -> &[String] {
        &self.item_names
    }

    /// Response of respondent `i` to item `j`, coded `1..=M_j`.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.values[i * self.n_items + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u8] {
        &self.values[i * self.n_items..(i + 1) * self.n_items]
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    /// Returns a copy with rows reordered so that new row `r` is old row `order[r]`.
    pub fn permute_rows(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.n_respondents {
            return Err(Error::Dimension("row permutation length".into()));
        }
        let mut values = Vec::with_capacity(self.values.len());
        for &r in order {
            values.extend_from_slice(self.row(r));
        }
        Self::with_names(
            self.n_respondents,
            self.n_items,
            self.n_categories.clone(),
            values,
            self.item_names.clone(),
        )
    }

    /// Number of responses in each category for item `j` (index 0 is category 1).
    pub fn category_counts(&self, j: usize) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_categories[j]];
        for i in 0..self.n_respondents {
            counts[self.get(i, j) as usize - 1] += 1;
        }
        counts
    }
}

/// Type of a DIF effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectType {
    /// Intercept shift.
    Uniform,
    /// Slope shift.
    Nonuniform,
}

impl fmt::Display for EffectType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EffectType::Uniform => write!(f, "uniform"),
            EffectType::Nonuniform => write!(f, "nonuniform"),
        }
    }
}

/// One nonzero DIF parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActiveEffect {
    pub item: usize,
    pub class: usize,
    pub effect: EffectType,
}

/// Full parameter vector of the mixture model.
///
/// DIF matrices are indexed `[item][class]` and include the (zero) reference column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub thresholds: Vec<Vec<f64>>,
    pub slopes: Vec<f64>,
    pub dif_intercept: Vec<Vec<f64>>,
    pub dif_slope: Vec<Vec<f64>>,
    pub class_probs: Vec<f64>,
    pub class_means: Vec<f64>,
    pub class_sds: Vec<f64>,
}

/// A violated parameter invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    Shape(String),
    NonFinite { what: String },
    ThresholdOrder { item: usize, index: usize },
    SlopeFloor { item: usize },
    CombinedSlopeFloor { item: usize, class: usize },
    ReferenceDif { item: usize },
    ReferenceScale,
    Simplex,
    NonPositiveSd { class: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(s) => write!(f, "shape mismatch: {s}"),
            Violation::NonFinite { what } => write!(f, "non-finite value in {what}"),
            Violation::ThresholdOrder { item, index } => {
                write!(f, "threshold ordering, item {item} (threshold {index})")
            }
            Violation::SlopeFloor { item } => write!(f, "slope floor, item {item}"),
            Violation::CombinedSlopeFloor { item, class } => {
                write!(f, "combined slope floor, item {item}, class {class}")
            }
            Violation::ReferenceDif { item } => {
                write!(f, "reference class DIF must be zero, item {item}")
            }
            Violation::ReferenceScale => write!(f, "reference class must have mean 0 and sd 1"),
            Violation::Simplex => write!(f, "simplex: class probabilities"),
            Violation::NonPositiveSd { class } => write!(f, "non-positive sd, class {class}"),
        }
    }
}

impl ModelParams {
    /// Number of latent classes including the reference (K + 1).
    pub fn n_classes(&self) -> usize {
        self.class_probs.len()
    }

    /// Number of non-reference classes (K).
    pub fn n_classes_extra(&self) -> usize {
        self.class_probs.len().saturating_sub(1)
    }

    pub fn n_items(&self) -> usize {
        self.slopes.len()
    }

    /// Data-informed starting values: unit slopes, thresholds from empirical
    /// cumulative logits, no DIF, uniform class weights and separated means.
    pub fn default_init(data: &ResponseMatrix, k_extra: usize) -> Self {
        let n_items = data.n_items();
        let n = data.n_respondents() as f64;
        let n_classes = k_extra + 1;
        let thresholds = (0..n_items)
            .map(|j| {
                let counts = data.category_counts(j);
                let mut cum = 0usize;
                let mut taus: Vec<f64> = counts[..counts.len() - 1]
                    .iter()
                    .map(|&c| {
                        cum += c;
                        let p = (cum as f64 / n).clamp(1e-6, 1.0 - 1e-6);
                        logit(p).clamp(-4.0, 4.0)
                    })
                    .collect();
                project_thresholds(&mut taus);
                taus
            })
            .collect();
        Self {
            thresholds,
            slopes: vec![1.0; n_items],
            dif_intercept: vec![vec![0.0; n_classes]; n_items],
            dif_slope: vec![vec![0.0; n_classes]; n_items],
            class_probs: vec![1.0 / n_classes as f64; n_classes],
            class_means: (0..n_classes).map(|k| -0.5 * k as f64).collect(),
            class_sds: vec![1.0; n_classes],
        }
    }

    #[inline]
    pub fn combined_slope(&self, item: usize, class: usize) -> f64 {
        self.slopes[item] + self.dif_slope[item][class]
    }

    fn check_index(&self, item: usize, class: usize) -> Result<()> {
        if item >= self.n_items() {
            return Err(Error::ItemIndex {
                item,
                n_items: self.n_items(),
            });
        }
        if class >= self.n_classes() {
            return Err(Error::ClassIndex {
                class,
                n_classes: self.n_classes(),
            });
        }
        Ok(())
    }

    /// Cumulative probabilities `P(Y <= m)` for `m = 1..M_j-1`.
    pub fn cumulative_prob(&self, item: usize, class: usize, theta: f64) -> Result<Vec<f64>> {
        self.check_index(item, class)?;
        let slope = self.combined_slope(item, class);
        let shift = self.dif_intercept[item][class];
        Ok(self.thresholds[item]
            .iter()
            .map(|&tau| logistic(tau - slope * theta + shift))
            .collect())
    }

    /// Category probabilities `P(Y = m)` for `m = 1..M_j`.
    pub fn category_prob(&self, item: usize, class: usize, theta: f64) -> Result<Vec<f64>> {
        self.check_index(item, class)?;
        let mut out = vec![0.0; self.thresholds[item].len() + 1];
        fill_category_probs(
            &self.thresholds[item],
            self.combined_slope(item, class),
            self.dif_intercept[item][class],
            theta,
            &mut out,
        );
        Ok(out)
    }

    /// Lists every violated invariant. An empty list means the parameters are valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n_items = self.slopes.len();
        let n_classes = self.class_probs.len();
        if n_classes == 0 {
            out.push(Violation::Shape("no classes".into()));
            return out;
        }
        if self.thresholds.len() != n_items
            || self.dif_intercept.len() != n_items
            || self.dif_slope.len() != n_items
        {
            out.push(Violation::Shape("per-item vectors disagree on item count".into()));
            return out;
        }
        if self.class_means.len() != n_classes || self.class_sds.len() != n_classes {
            out.push(Violation::Shape("per-class vectors disagree on class count".into()));
            return out;
        }
        for j in 0..n_items {
            if self.dif_intercept[j].len() != n_classes || self.dif_slope[j].len() != n_classes {
                out.push(Violation::Shape(format!("DIF row of item {j}")));
                return out;
            }
            if self.thresholds[j].is_empty() {
                out.push(Violation::Shape(format!("item {j} has no thresholds")));
                return out;
            }
        }
        let all_finite = self.slopes.iter().all(|x| x.is_finite())
            && self.thresholds.iter().flatten().all(|x| x.is_finite())
            && self.dif_intercept.iter().flatten().all(|x| x.is_finite())
            && self.dif_slope.iter().flatten().all(|x| x.is_finite())
            && self.class_probs.iter().all(|x| x.is_finite())
            && self.class_means.iter().all(|x| x.is_finite())
            && self.class_sds.iter().all(|x| x.is_finite());
        if !all_finite {
            out.push(Violation::NonFinite {
                what: "parameter vector".into(),
            });
            return out;
        }
        for j in 0..n_items {
            for (m, w) in self.thresholds[j].windows(2).enumerate() {
                if w[1] - w[0] < GAP_EPS - CONSTRAINT_SLACK {
                    out.push(Violation::ThresholdOrder { item: j, index: m + 1 });
                }
            }
            if self.slopes[j] < SLOPE_EPS - CONSTRAINT_SLACK {
                out.push(Violation::SlopeFloor { item: j });
            }
            for k in 0..n_classes {
                if self.combined_slope(j, k) < SLOPE_EPS - CONSTRAINT_SLACK {
                    out.push(Violation::CombinedSlopeFloor { item: j, class: k });
                }
            }
            if self.dif_intercept[j][0] != 0.0 || self.dif_slope[j][0] != 0.0 {
                out.push(Violation::ReferenceDif { item: j });
            }
        }
        if self.class_means[0] != 0.0 || self.class_sds[0] != 1.0 {
            out.push(Violation::ReferenceScale);
        }
        let total: f64 = self.class_probs.iter().sum();
        if self.class_probs.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
            out.push(Violation::Simplex);
        }
        for (k, &sd) in self.class_sds.iter().enumerate() {
            if sd <= 0.0 {
                out.push(Violation::NonPositiveSd { class: k });
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(v))
        }
    }

    /// Checks that the parameter shapes agree with the data.
    pub fn check_compatible(&self, data: &ResponseMatrix) -> Result<()> {
        if self.n_items() != data.n_items() {
            return Err(Error::Dimension(format!(
                "parameters have {} items, data has {}",
                self.n_items(),
                data.n_items()
            )));
        }
        for j in 0..self.n_items() {
            if self.thresholds[j].len() + 1 != data.n_categories()[j] {
                return Err(Error::Dimension(format!(
                    "item {j}: {} thresholds for {} categories",
                    self.thresholds[j].len(),
                    data.n_categories()[j]
                )));
            }
        }
        Ok(())
    }

    /// Sorted list of nonzero DIF entries in non-reference classes.
    pub fn active_set(&self) -> Vec<ActiveEffect> {
        let mut out = Vec::new();
        for j in 0..self.n_items() {
            for k in 1..self.n_classes() {
                if self.dif_intercept[j][k] != 0.0 {
                    out.push(ActiveEffect {
                        item: j,
                        class: k,
                        effect: EffectType::Uniform,
                    });
                }
                if self.dif_slope[j][k] != 0.0 {
                    out.push(ActiveEffect {
                        item: j,
                        class: k,
                        effect: EffectType::Nonuniform,
                    });
                }
            }
        }
        out
    }

    /// Reorders classes so that new class `c` is old class `order[c]`.
    ///
    /// `order[0]` must be 0; use [`ModelParams::rereference`] to change the reference.
    pub fn permute_classes(&self, order: &[usize]) -> Result<Self> {
        let n_classes = self.n_classes();
        let mut seen = vec![false; n_classes];
        if order.len() != n_classes || order[0] != 0 {
            return Err(Error::Contract("class permutation must keep class 0 first".into()));
        }
        for &o in order {
            if o >= n_classes || seen[o] {
                return Err(Error::Contract("class order is not a permutation".into()));
            }
            seen[o] = true;
        }
        let pick = |v: &Vec<f64>| order.iter().map(|&o| v[o]).collect::<Vec<_>>();
        Ok(Self {
            thresholds: self.thresholds.clone(),
            slopes: self.slopes.clone(),
            dif_intercept: self.dif_intercept.iter().map(pick).collect(),
            dif_slope: self.dif_slope.iter().map(pick).collect(),
            class_probs: pick(&self.class_probs),
            class_means: pick(&self.class_means),
            class_sds: pick(&self.class_sds),
        })
    }

    /// Re-expresses the same distribution with class `order[0]` as the reference.
    ///
    /// The new trait scale is standardized on the new reference class, so the
    /// marginal likelihood is unchanged. Exact zeros in DIF entries stay
    /// zero when the old and new reference columns are both zero for an item.
    pub fn rereference(&self, order: &[usize]) -> Result<Self> {
        let n_classes = self.n_classes();
        let mut seen = vec![false; n_classes];
        if order.len() != n_classes {
            return Err(Error::Contract("class order has wrong length".into()));
        }
        for &o in order {
            if o >= n_classes || seen[o] {
                return Err(Error::Contract("class order is not a permutation".into()));
            }
            seen[o] = true;
        }
        let r = order[0];
        let (mu_r, sd_r) = (self.class_means[r], self.class_sds[r]);
        let mut out = self.clone();
        for j in 0..self.n_items() {
            let d1r = self.dif_intercept[j][r];
            let d2r = self.dif_slope[j][r];
            let base_slope = self.slopes[j] + d2r;
            out.slopes[j] = base_slope * sd_r;
            let shift = -base_slope * mu_r + d1r;
            for t in out.thresholds[j].iter_mut() {
                *t += shift;
            }
            for (c, &o) in order.iter().enumerate() {
                let dd2 = self.dif_slope[j][o] - d2r;
                out.dif_slope[j][c] = dd2 * sd_r;
                out.dif_intercept[j][c] = self.dif_intercept[j][o] - d1r - dd2 * mu_r;
            }
            out.dif_slope[j][0] = 0.0;
            out.dif_intercept[j][0] = 0.0;
        }
        for (c, &o) in order.iter().enumerate() {
            out.class_probs[c] = self.class_probs[o];
            out.class_means[c] = (self.class_means[o] - mu_r) / sd_r;
            out.class_sds[c] = self.class_sds[o] / sd_r;
        }
        out.class_means[0] = 0.0;
        out.class_sds[0] = 1.0;
        Ok(out)
    }
}

/// Left-to-right isotonic clip enforcing `tau[m] >= tau[m-1] + GAP_EPS`.
pub fn project_thresholds(taus: &mut [f64]) {
    for m in 1..taus.len() {
        let floor = taus[m - 1] + GAP_EPS;
        if taus[m] < floor {
            taus[m] = floor;
        }
    }
}

/// Integration nodes and weights for the latent trait.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureGrid {
    pub const DEFAULT_NODES: usize = 61;
    pub const DEFAULT_SPAN: f64 = 8.0;

    /// Equally spaced nodes on `[-span, span]` with rectangle-rule weights.
    ///
    /// The grid integrates the class trait densities directly, so it must
    /// cover every plausible class distribution; construction fails otherwise.
    pub fn uniform(n_nodes: usize, span: f64) -> Result<Self> {
        if n_nodes < 2 || !(span.is_finite() && span > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 nodes and a positive span (got {n_nodes}, {span})"
            )));
        }
        let step = 2.0 * span / (n_nodes - 1) as f64;
        let nodes = (0..n_nodes).map(|g| -span + g as f64 * step).collect();
        let grid = Self {
            nodes,
            weights: vec![step; n_nodes],
        };
        grid.check_coverage()?;
        Ok(grid)
    }

    /// Arbitrary grid; only ordering and positivity are checked.
    pub fn from_parts(nodes: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() || nodes.len() != weights.len() {
            return Err(Error::InvalidGrid("nodes and weights must be non-empty and equal length".into()));
        }
        if nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("nodes must be strictly increasing".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidGrid("weights must be positive".into()));
        }
        Ok(Self { nodes, weights })
    }

    /// Verifies that the grid integrates `N(mu, sd^2)` to 1 within 1e-3 for
    /// `mu` in [-3, 3] and `sd` in [0.5, 1.5].
    pub fn check_coverage(&self) -> Result<()> {
        for mi in 0..=12 {
            let mu = -3.0 + 0.5 * mi as f64;
            for si in 0..=10 {
                let sd = 0.5 + 0.1 * si as f64;
                let mass = self.density_mass(mu, sd);
                if (mass - 1.0).abs() > 1e-3 {
                    return Err(Error::InvalidGrid(format!(
                        "grid integrates N({mu}, {sd}^2) to {mass}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `sum_g w_g * phi(theta_g; mu, sd^2)`.
    pub fn density_mass(&self, mu: f64, sd: f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * normal_density(t, mu, sd))
            .sum()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        Self::uniform(Self::DEFAULT_NODES, Self::DEFAULT_SPAN).expect("default grid is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_item(taus: Vec<f64>, a: f64, d1: f64, d2: f64) -> ModelParams {
        ModelParams {
            thresholds: vec![taus],
            slopes: vec![a],
            dif_intercept: vec![vec![0.0, d1]],
            dif_slope: vec![vec![0.0, d2]],
            class_probs: vec![0.5, 0.5],
            class_means: vec![0.0, 0.0],
            class_sds: vec![1.0, 1.0],
        }
    }

    #[test]
    fn cumulative_prob_at_zero_logit() {
        let p = single_item(vec![0.0], 1.0, 0.0, 0.0);
        let c = p.cumulative_prob(0, 0, 0.0).unwrap();
        assert_eq!(c, vec![0.5]);
    }

    #[test]
    fn cumulative_prob_symmetric_thresholds() {
        let p = single_item(vec![-1.0, 1.0], 1.0, 0.0, 0.0);
        let c = p.cumulative_prob(0, 0, 0.0).unwrap();
        assert!((c[0] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((c[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn cumulative_prob_with_dif() {
        // 0 - (1 + 0.25) * 2 + 0.5 = -2
        let p = single_item(vec![0.0], 1.0, 0.5, 0.25);
        let c = p.cumulative_prob(0, 1, 2.0).unwrap();
        assert!((c[0] - 1.0 / (1.0 + 2f64.exp())).abs() < 1e-15);
        // 0 - (1 + 0.5) * 2 + 0.5 = -2.5
        let p = single_item(vec![0.0], 1.0, 0.5, 0.5);
        let c = p.cumulative_prob(0, 1, 2.0).unwrap();
        assert!((c[0] - 1.0 / (1.0 + 2.5f64.exp())).abs() < 1e-15);
        // the reference class ignores the shifts
        let c = p.cumulative_prob(0, 0, 2.0).unwrap();
        assert!((c[0] - 1.0 / (1.0 + 2f64.exp())).abs() < 1e-15);
    }

    #[test]
    fn index_errors() {
        let p = single_item(vec![0.0], 1.0, 0.0, 0.0);
        assert!(matches!(p.cumulative_prob(1, 0, 0.0), Err(Error::ItemIndex { .. })));
        assert!(matches!(p.category_prob(0, 2, 0.0), Err(Error::ClassIndex { .. })));
    }

    #[test]
    fn category_prob_differencing() {
        // logistic(tau) = 0.2 and 0.7
        let p = single_item(vec![logit(0.2), logit(0.7)], 1.0, 0.0, 0.0);
        let c = p.category_prob(0, 0, 0.0).unwrap();
        for (got, want) in c.iter().zip([0.2, 0.5, 0.3]) {
            assert!((got - want).abs() < 1e-14);
        }
        let p = single_item(vec![0.0], 1.0, 0.0, 0.0);
        assert_eq!(p.category_prob(0, 0, 0.0).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn upper_tail_categories_keep_precision() {
        let p = single_item(vec![30.0, 31.0], 1.0, 0.0, 0.0);
        let c = p.category_prob(0, 0, 0.0).unwrap();
        // 1 - logistic(30) = logistic(-30)
        assert!((c[2] / logistic(-31.0) - 1.0).abs() < 1e-12);
        assert!(c[1] > 0.0);
    }

    #[test]
    fn validate_reports_violations() {
        let p = single_item(vec![0.0, 1.0], 1.0, 0.0, 0.0);
        assert!(p.validate().is_empty());

        let mut bad = p.clone();
        bad.thresholds[0] = vec![1.0, 0.0];
        let v = bad.validate();
        assert_eq!(v, vec![Violation::ThresholdOrder { item: 0, index: 1 }]);
        assert!(v[0].to_string().contains("threshold ordering, item 0"));

        let mut bad = p.clone();
        bad.class_probs = vec![0.6, 0.6];
        let v = bad.validate();
        assert_eq!(v, vec![Violation::Simplex]);
        assert!(v[0].to_string().contains("simplex"));

        let mut bad = p.clone();
        bad.dif_slope[0][1] = -2.0;
        bad.dif_intercept[0][0] = 0.1;
        bad.class_means[0] = 0.3;
        let v = bad.validate();
        assert!(v.contains(&Violation::CombinedSlopeFloor { item: 0, class: 1 }));
        assert!(v.contains(&Violation::ReferenceDif { item: 0 }));
        assert!(v.contains(&Violation::ReferenceScale));
    }

    fn toy_data() -> ResponseMatrix {
        ResponseMatrix::new(
            6,
            2,
            vec![3, 4],
            vec![1, 1, 2, 2, 3, 4, 3, 4, 1, 2, 2, 2],
        )
        .unwrap()
    }

    #[test]
    fn default_init_is_valid() {
        let data = toy_data();
        for k in 0..3 {
            let p = ModelParams::default_init(&data, k);
            assert!(p.validate().is_empty(), "{:?}", p.validate());
            assert!(p.check_compatible(&data).is_ok());
            assert_eq!(p.n_classes(), k + 1);
        }
        // category 3 of item 2 is never observed: equal cumulative logits get spread by the gap
        let p = ModelParams::default_init(&data, 1);
        let t = &p.thresholds[1];
        assert!(t[2] - t[1] >= GAP_EPS - 1e-12);
    }

    #[test]
    fn response_matrix_rejects_bad_input() {
        assert!(ResponseMatrix::new(2, 1, vec![3], vec![0, 1]).is_err());
        assert!(ResponseMatrix::new(2, 1, vec![3], vec![4, 1]).is_err());
        let err = ResponseMatrix::new(3, 1, vec![3], vec![2, 2, 2]).unwrap_err();
        assert!(err.to_string().contains("degenerate item"));
        assert!(ResponseMatrix::new(2, 1, vec![3], vec![1]).is_err());
    }

    #[test]
    fn uniform_grid_properties() {
        let g = QuadratureGrid::default();
        assert_eq!(g.len(), 61);
        assert!(g.nodes().windows(2).all(|w| w[1] > w[0]));
        assert!((g.density_mass(0.0, 1.0) - 1.0).abs() < 1e-10);
        // the unwidened grid cannot hold a shifted wide class
        assert!(QuadratureGrid::uniform(61, 5.0).is_err());
        assert!(QuadratureGrid::from_parts(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(QuadratureGrid::from_parts(vec![0.0], vec![-1.0]).is_err());
    }

    #[test]
    fn rereference_maps_zeros_to_zeros() {
        let mut p = single_item(vec![-0.5, 0.7], 1.2, 0.0, 0.0);
        p.class_means[1] = 0.9;
        p.class_sds[1] = 0.8;
        let q = p.rereference(&[1, 0]).unwrap();
        assert!(q.validate().is_empty());
        assert_eq!(q.dif_intercept[0][1], 0.0);
        assert_eq!(q.dif_slope[0][1], 0.0);
        assert!((q.class_means[1] + 0.9 / 0.8).abs() < 1e-12);
        assert!((q.class_sds[1] - 1.0 / 0.8).abs() < 1e-12);
        // cumulative probabilities at matching trait values coincide
        let theta_old = 0.9 + 0.8 * 0.3;
        let a = p.cumulative_prob(0, 1, theta_old).unwrap();
        let b = q.cumulative_prob(0, 0, 0.3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    prop_compose! {
        fn arb_item()(taus in prop::collection::vec(-4.0f64..4.0, 1..6),
                      a in 0.05f64..3.0,
                      d1 in -2.0f64..2.0,
                      d2 in -0.04f64..2.0,
                      theta in -6.0f64..6.0)
                      -> (Vec<f64>, f64, f64, f64, f64) {
            let mut taus = taus;
            taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
            project_thresholds(&mut taus);
            (taus, a, d1, d2, theta)
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn category_probs_sum_to_one((taus, a, d1, d2, theta) in arb_item()) {
            let p = single_item(taus, a, d1, d2);
            for k in 0..2 {
                let c = p.category_prob(0, k, theta).unwrap();
                let s: f64 = c.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(c.iter().all(|&x| x >= 0.0));
                let cum = p.cumulative_prob(0, k, theta).unwrap();
                prop_assert!(cum.windows(2).all(|w| w[1] > w[0]));
                prop_assert!(cum.iter().all(|&x| x > 0.0 && x < 1.0) || theta.abs() > 5.0);
            }
        }
    }

    proptest! {
        #[test]
        fn cumulative_decreasing_in_theta((taus, a, d1, d2, _t) in arb_item()) {
            let p = single_item(taus, a, d1, d2);
            for k in 0..2 {
                let mut prev = p.cumulative_prob(0, k, -4.0).unwrap();
                for step in 1..=80 {
                    let theta = -4.0 + 0.1 * step as f64;
                    let cur = p.cumulative_prob(0, k, theta).unwrap();
                    for (c, q) in cur.iter().zip(&prev) {
                        prop_assert!(c <= q);
                    }
                    prev = cur;
                }
            }
        }

        #[test]
        fn zero_dif_matches_reference((taus, a, _d1, _d2, theta) in arb_item()) {
            let p = single_item(taus, a, 0.0, 0.0);
            prop_assert_eq!(p.category_prob(0, 1, theta).unwrap(), p.category_prob(0, 0, theta).unwrap());
        }
    }
}
