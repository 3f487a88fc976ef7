//! Data generation, oracle classification, recovery metrics, and the
//! replication harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{e_step, EMConfig, FitResult, PosteriorTable};
use crate::error::{Error, Result};
use crate::model::{fill_category_probs, ModelParams, QuadratureGrid, ResponseMatrix, GAP_EPS};
use crate::selection::{run_path, RegPath};

/// Generating design for one simulation condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n: usize,
    pub j: usize,
    pub k_extra: usize,
    /// Categories per item.
    pub m: usize,
    /// Mixing proportions of all K+1 classes (reference first).
    pub class_probs: Vec<f64>,
    pub class_means: Vec<f64>,
    pub class_sds: Vec<f64>,
    pub n_dif_items: usize,
    pub dif_uniform_range: (f64, f64),
    pub dif_nonuniform_range: (f64, f64),
    /// Range of both DIF effects for the second non-reference class.
    pub dif_third_class_range: (f64, f64),
    pub slope_range: (f64, f64),
    pub threshold_range: (f64, f64),
    pub seed: u64,
    pub n_reps: usize,
}

/// Number of DIF items used for the standard test lengths.
pub fn default_dif_items(j: usize) -> usize {
    match j {
        15 => 5,
        25 => 10,
        50 => 20,
        _ => (j * 2).div_ceil(5),
    }
}

impl SimulationConfig {
    /// Two classes with focal proportion `pi`, focal trait `N(1, 0.8^2)`.
    pub fn two_class(n: usize, j: usize, pi: f64) -> Self {
        Self {
            n,
            j,
            k_extra: 1,
            m: 4,
            class_probs: vec![1.0 - pi, pi],
            class_means: vec![0.0, 1.0],
            class_sds: vec![1.0, 0.8],
            n_dif_items: default_dif_items(j),
            dif_uniform_range: (1.0, 1.5),
            dif_nonuniform_range: (0.5, 1.0),
            dif_third_class_range: (0.5, 1.0),
            slope_range: (0.5, 1.5),
            threshold_range: (-2.0, 2.0),
            seed: 1,
            n_reps: 20,
        }
    }

    /// Three classes with proportions (0.5, 0.3, 0.2).
    pub fn three_class(n: usize, j: usize) -> Self {
        Self {
            k_extra: 2,
            class_probs: vec![0.5, 0.3, 0.2],
            class_means: vec![0.0, 1.0, 1.5],
            class_sds: vec![1.0, 0.8, 0.75],
            ..Self::two_class(n, j, 0.3)
        }
    }

    /// Short label used in metric tables, e.g. `K1_N1000_J15_pi0.3`.
    pub fn label(&self) -> String {
        if self.k_extra == 1 {
            format!("K1_N{}_J{}_pi{}", self.n, self.j, self.class_probs[1])
        } else {
            format!("K{}_N{}_J{}", self.k_extra, self.n, self.j)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let nc = self.k_extra + 1;
        if self.n == 0 || self.j == 0 || self.m < 2 || self.n_reps == 0 {
            return bad("n, j, n_reps must be positive and m >= 2".into());
        }
        if self.class_probs.len() != nc || self.class_means.len() != nc || self.class_sds.len() != nc {
            return bad(format!("class vectors must have {nc} entries"));
        }
        if self.class_probs.iter().any(|&p| !(0.0..=1.0).contains(&p))
            || (self.class_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("class proportions must form a simplex".into());
        }
        if self.class_sds.iter().any(|&s| s <= 0.0) {
            return bad("class sds must be positive".into());
        }
        if self.n_dif_items > self.j {
            return bad("more DIF items than items".into());
        }
        for (name, (lo, hi)) in [
            ("dif_uniform_range", self.dif_uniform_range),
            ("dif_nonuniform_range", self.dif_nonuniform_range),
            ("dif_third_class_range", self.dif_third_class_range),
            ("slope_range", self.slope_range),
            ("threshold_range", self.threshold_range),
        ] {
            if !(lo <= hi) {
                return bad(format!("{name} is not ordered"));
            }
        }
        if self.slope_range.0 <= 0.0 {
            return bad("slopes must be positive".into());
        }
        Ok(())
    }
}

/// One generated data set with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedDataset {
    pub responses: ResponseMatrix,
    pub true_params: ModelParams,
    pub true_classes: Vec<usize>,
    pub true_thetas: Vec<f64>,
    pub dif_item_indices: Vec<usize>,
}

/// SplitMix64 finalizer, used to derive independent per-replication seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws item parameters, class memberships, traits and responses.
pub fn generate(config: &SimulationConfig, rep_seed: u64) -> Result<SimulatedDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
    let nc = config.k_extra + 1;
    let slopes: Vec<f64> = (0..config.j).map(|_| uniform(&mut rng, config.slope_range)).collect();
    let thresholds: Vec<Vec<f64>> = (0..config.j)
        .map(|_| loop {
            let mut t: Vec<f64> = (0..config.m - 1)
                .map(|_| uniform(&mut rng, config.threshold_range))
                .collect();
            t.sort_by(f64::total_cmp);
            if t.windows(2).all(|w| w[1] - w[0] >= GAP_EPS) {
                break t;
            }
        })
        .collect();
    let mut dif_intercept = vec![vec![0.0; nc]; config.j];
    let mut dif_slope = vec![vec![0.0; nc]; config.j];
    for j in 0..config.n_dif_items {
        for k in 1..nc {
            let (r1, r2) = if k == 1 {
                (config.dif_uniform_range, config.dif_nonuniform_range)
            } else {
                (config.dif_third_class_range, config.dif_third_class_range)
            };
            dif_intercept[j][k] = uniform(&mut rng, r1);
            dif_slope[j][k] = uniform(&mut rng, r2);
        }
    }
    let true_params = ModelParams {
        thresholds,
        slopes,
        dif_intercept,
        dif_slope,
        class_probs: config.class_probs.clone(),
        class_means: config.class_means.clone(),
        class_sds: config.class_sds.clone(),
    };
    true_params.ensure_valid()?;

    let normals: Vec<Normal<f64>> = (0..nc)
        .map(|k| Normal::new(config.class_means[k], config.class_sds[k]).expect("positive sd"))
        .collect();
    let mut true_classes = Vec::with_capacity(config.n);
    let mut true_thetas = Vec::with_capacity(config.n);
    let mut values = Vec::with_capacity(config.n * config.j);
    let mut probs = vec![0.0; config.m];
    for _ in 0..config.n {
        let u: f64 = rng.random();
        let mut k = 0;
        let mut acc = config.class_probs[0];
        while u >= acc && k + 1 < nc {
            k += 1;
            acc += config.class_probs[k];
        }
        let theta = normals[k].sample(&mut rng);
        for j in 0..config.j {
            fill_category_probs(
                &true_params.thresholds[j],
                true_params.combined_slope(j, k),
                true_params.dif_intercept[j][k],
                theta,
                &mut probs,
            );
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut y = config.m;
            for (c, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    y = c + 1;
                    break;
                }
            }
            values.push(y as u8);
        }
        true_classes.push(k);
        true_thetas.push(theta);
    }
    let responses = ResponseMatrix::new(config.n, config.j, vec![config.m; config.j], values)?;
    Ok(SimulatedDataset {
        responses,
        true_params,
        true_classes,
        true_thetas,
        dif_item_indices: (0..config.n_dif_items).collect(),
    })
}

/// E-step at the generating parameters.
pub fn oracle_posterior(dataset: &SimulatedDataset, grid: &QuadratureGrid) -> Result<PosteriorTable> {
    e_step(&dataset.true_params, &dataset.responses, grid)
}

/// Estimation error of one parameter group: mean error and root mean squared error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamError {
    pub bias: f64,
    pub rmse: f64,
}

impl ParamError {
    fn from_pairs(pairs: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let (mut n, mut s, mut s2) = (0usize, 0.0, 0.0);
        for (est, truth) in pairs {
            let e = est - truth;
            n += 1;
            s += e;
            s2 += e * e;
        }
        if n == 0 {
            return Self {
                bias: f64::NAN,
                rmse: f64::NAN,
            };
        }
        Self {
            bias: s / n as f64,
            rmse: (s2 / n as f64).sqrt(),
        }
    }
}

/// Recovery metrics for one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub slope: ParamError,
    pub threshold: ParamError,
    pub dif_intercept: ParamError,
    pub dif_slope: ParamError,
    /// Non-reference class proportions.
    pub class_prob: ParamError,
    pub class_mean: ParamError,
    pub class_sd: ParamError,
    pub classification_error: f64,
    /// One-vs-rest, per non-reference class.
    pub auc: Vec<f64>,
    pub tpr_uniform: Vec<f64>,
    pub fpr_uniform: Vec<f64>,
    pub tpr_nonuniform: Vec<f64>,
    pub fpr_nonuniform: Vec<f64>,
    pub oracle_classification_error: f64,
    pub oracle_auc: Vec<f64>,
    /// Fitted class `c` corresponds to true class `alignment[c]`.
    pub alignment: Vec<usize>,
    pub selected_lambda: f64,
}

impl MetricsReport {
    /// Flat `(name, value)` list in a fixed order. Names ending in `_rmse`
    /// aggregate as a root mean square, everything else as a mean.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (name, e) in [
            ("a", self.slope),
            ("tau", self.threshold),
            ("delta1", self.dif_intercept),
            ("delta2", self.dif_slope),
            ("pi", self.class_prob),
            ("mu", self.class_mean),
            ("sigma", self.class_sd),
        ] {
            out.push((format!("{name}_bias"), e.bias));
            out.push((format!("{name}_rmse"), e.rmse));
        }
        out.push(("classification_error".into(), self.classification_error));
        out.push(("oracle_classification_error".into(), self.oracle_classification_error));
        let per_class = [
            ("auc", &self.auc),
            ("oracle_auc", &self.oracle_auc),
            ("tpr_uniform", &self.tpr_uniform),
            ("fpr_uniform", &self.fpr_uniform),
            ("tpr_nonuniform", &self.tpr_nonuniform),
            ("fpr_nonuniform", &self.fpr_nonuniform),
        ];
        for (name, v) in per_class {
            for (k, &x) in v.iter().enumerate() {
                out.push((format!("{name}_{}", k + 1), x));
            }
        }
        out.push(("selected_lambda".into(), self.selected_lambda));
        out
    }
}

/// Area under the ROC curve of `scores` against `labels` (Mann-Whitney form,
/// ties count one half). `NaN` when either group is empty.
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return f64::NAN;
    }
    // midranks over tied groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&t| labels[t]).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    (rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

/// Class relabeling of a fit that best agrees with the true memberships:
/// `order[c]` is the fitted class playing true class `c`. Ties keep the
/// lexicographically first order, so the identity wins when it is optimal.
pub fn align_classes(fitted_map: &[usize], true_classes: &[usize], n_classes: usize) -> Vec<usize> {
    let mut table = vec![vec![0usize; n_classes]; n_classes];
    for (&f, &t) in fitted_map.iter().zip(true_classes) {
        table[t][f] += 1;
    }
    let mut best = (0..n_classes).collect::<Vec<_>>();
    let mut best_hits = None;
    for p in permutations(n_classes) {
        let hits: usize = (0..n_classes).map(|c| table[c][p[c]]).sum();
        if best_hits.is_none_or(|b| hits > b) {
            best_hits = Some(hits);
            best = p;
        }
    }
    best
}

fn rates(flags: impl Iterator<Item = (bool, bool)>) -> (f64, f64) {
    let (mut tp, mut p, mut fp, mut n) = (0usize, 0usize, 0usize, 0usize);
    for (truth, flagged) in flags {
        if truth {
            p += 1;
            tp += flagged as usize;
        } else {
            n += 1;
            fp += flagged as usize;
        }
    }
    let div = |a: usize, b: usize| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
    (div(tp, p), div(fp, n))
}

fn classification(post: &PosteriorTable, truth: &[usize]) -> (f64, Vec<f64>) {
    let map = post.map_classes();
    let err = map.iter().zip(truth).filter(|(a, b)| a != b).count() as f64 / truth.len() as f64;
    let aucs = (1..post.n_classes())
        .map(|k| {
            let scores: Vec<f64> = (0..truth.len()).map(|i| post.class_marginals(i)[k]).collect();
            let labels: Vec<bool> = truth.iter().map(|&t| t == k).collect();
            auc(&scores, &labels)
        })
        .collect();
    (err, aucs)
}

/// Compares a confirmatory refit with the generating truth.
///
/// The fit's classes are first matched to the true classes by MAP agreement;
/// if the match moves the reference class, the refit is re-expressed with the
/// matched class as reference, which leaves its likelihood unchanged.
pub fn evaluate(
    dataset: &SimulatedDataset,
    fit: &FitResult,
    refit: &FitResult,
    grid: &QuadratureGrid,
) -> Result<MetricsReport> {
    let truth = &dataset.true_params;
    let nc = truth.n_classes();
    if fit.params.n_classes() != nc || refit.params.n_classes() != nc {
        return Err(Error::Contract(format!(
            "fit has {} classes, truth has {nc}",
            refit.params.n_classes()
        )));
    }
    if refit.posterior.n_respondents() != dataset.true_classes.len() {
        return Err(Error::Contract("fit and dataset differ in respondents".into()));
    }
    let order = align_classes(&refit.posterior.map_classes(), &dataset.true_classes, nc);
    let est = refit.params.rereference(&order)?;
    let post = refit.posterior.permute_classes(&order);

    let pairs2 = |e: &Vec<Vec<f64>>, t: &Vec<Vec<f64>>| -> Vec<(f64, f64)> {
        e.iter()
            .zip(t)
            .flat_map(|(a, b)| a[1..].iter().copied().zip(b[1..].iter().copied()))
            .collect()
    };
    let thresholds: Vec<(f64, f64)> = est
        .thresholds
        .iter()
        .zip(&truth.thresholds)
        .flat_map(|(a, b)| a.iter().copied().zip(b.iter().copied()))
        .collect();
    let tail = |e: &[f64], t: &[f64]| -> Vec<(f64, f64)> { e[1..].iter().copied().zip(t[1..].iter().copied()).collect() };

    let (classification_error, auc_fit) = classification(&post, &dataset.true_classes);
    let oracle = oracle_posterior(dataset, grid)?;
    let (oracle_err, oracle_auc) = classification(&oracle, &dataset.true_classes);

    let is_dif: Vec<bool> = (0..truth.n_items()).map(|j| dataset.dif_item_indices.contains(&j)).collect();
    let mut tpr_u = Vec::new();
    let mut fpr_u = Vec::new();
    let mut tpr_n = Vec::new();
    let mut fpr_n = Vec::new();
    for k in 1..nc {
        let (t, f) = rates(is_dif.iter().enumerate().map(|(j, &d)| (d, est.dif_intercept[j][k] != 0.0)));
        tpr_u.push(t);
        fpr_u.push(f);
        let (t, f) = rates(is_dif.iter().enumerate().map(|(j, &d)| (d, est.dif_slope[j][k] != 0.0)));
        tpr_n.push(t);
        fpr_n.push(f);
    }
    Ok(MetricsReport {
        slope: ParamError::from_pairs(est.slopes.iter().copied().zip(truth.slopes.iter().copied())),
        threshold: ParamError::from_pairs(thresholds),
        dif_intercept: ParamError::from_pairs(pairs2(&est.dif_intercept, &truth.dif_intercept)),
        dif_slope: ParamError::from_pairs(pairs2(&est.dif_slope, &truth.dif_slope)),
        class_prob: ParamError::from_pairs(tail(&est.class_probs, &truth.class_probs)),
        class_mean: ParamError::from_pairs(tail(&est.class_means, &truth.class_means)),
        class_sd: ParamError::from_pairs(tail(&est.class_sds, &truth.class_sds)),
        classification_error,
        auc: auc_fit,
        tpr_uniform: tpr_u,
        fpr_uniform: fpr_u,
        tpr_nonuniform: tpr_n,
        fpr_nonuniform: fpr_n,
        oracle_classification_error: oracle_err,
        oracle_auc,
        alignment: order,
        selected_lambda: fit.lambda,
    })
}

/// Settings shared by every replication of a condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSettings {
    pub lambdas: Vec<f64>,
    pub grid: QuadratureGrid,
    pub em: EMConfig,
}

/// Outcome of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub condition: String,
    pub n_reps: usize,
    pub n_failed: usize,
    /// Aggregated metrics over successful replications, in report order.
    pub metrics: Vec<(String, f64)>,
    pub records: Vec<ReplicationRecord>,
}

impl ReplicationSummary {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

/// Means over replications (root mean squares for `_rmse` entries), in
/// replication order. Non-finite values are skipped per metric.
pub fn aggregate(reports: &[&MetricsReport]) -> Vec<(String, f64)> {
    let Some(first) = reports.first() else {
        return Vec::new();
    };
    let names: Vec<String> = first.entries().into_iter().map(|(n, _)| n).collect();
    let all: Vec<Vec<(String, f64)>> = reports.iter().map(|r| r.entries()).collect();
    names
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let rms = name.ends_with("_rmse");
            let (mut s, mut n) = (0.0, 0usize);
            for e in &all {
                let v = e[i].1;
                if v.is_finite() {
                    s += if rms { v * v } else { v };
                    n += 1;
                }
            }
            let m = if n == 0 { f64::NAN } else { s / n as f64 };
            (name, if rms { m.sqrt() } else { m })
        })
        .collect()
}

fn run_one(config: &SimulationConfig, settings: &ReplicationSettings, seed: u64) -> Result<MetricsReport> {
    let ds = generate(config, seed)?;
    let path: RegPath = run_path(&ds.responses, config.k_extra, &settings.lambdas, &settings.grid, &settings.em)?;
    let sel = path.selected();
    evaluate(&ds, &sel.fit, &sel.refit, &settings.grid)
}

/// generate, select along the path, and evaluate, once per replication.
/// Replications run in parallel; results are collected in replication order.
pub fn replicate(config: &SimulationConfig, settings: &ReplicationSettings) -> Result<ReplicationSummary> {
    config.validate()?;
    let records: Vec<ReplicationRecord> = (0..config.n_reps)
        .into_par_iter()
        .map(|rep| {
            let seed = derive_seed(config.seed, rep as u64);
            match run_one(config, settings, seed) {
                Ok(r) => ReplicationRecord {
                    rep,
                    seed,
                    report: Some(r),
                    error: None,
                },
                Err(e) => ReplicationRecord {
                    rep,
                    seed,
                    report: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let ok: Vec<&MetricsReport> = records.iter().filter_map(|r| r.report.as_ref()).collect();
    Ok(ReplicationSummary {
        condition: config.label(),
        n_reps: config.n_reps,
        n_failed: config.n_reps - ok.len(),
        metrics: aggregate(&ok),
        records,
    })
}
