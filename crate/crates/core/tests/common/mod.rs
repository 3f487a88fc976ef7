//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use ordif::em::{q_function, PosteriorTable};
use ordif::model::{ModelParams, QuadratureGrid, ResponseMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Category probabilities written out from the cumulative logits, no shortcuts.
pub fn naive_category_probs(p: &ModelParams, j: usize, k: usize, theta: f64) -> Vec<f64> {
    let cum: Vec<f64> = p.thresholds[j]
        .iter()
        .map(|&t| {
            let eta = t - (p.slopes[j] + p.dif_slope[j][k]) * theta + p.dif_intercept[j][k];
            1.0 / (1.0 + (-eta).exp())
        })
        .collect();
    let m = cum.len() + 1;
    (0..m)
        .map(|c| {
            let upper = if c < m - 1 { cum[c] } else { 1.0 };
            let lower = if c > 0 { cum[c - 1] } else { 0.0 };
            upper - lower
        })
        .collect()
}

pub fn naive_normal(x: f64, mu: f64, sd: f64) -> f64 {
    let z = (x - mu) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

/// Random valid parameters and matching responses for small instances.
pub fn random_instance(r: &mut ChaCha8Rng, max_n: usize, max_j: usize, max_k: usize) -> (ModelParams, ResponseMatrix) {
    let n = r.random_range(2..=max_n);
    let j = r.random_range(1..=max_j);
    let k_extra = r.random_range(0..=max_k);
    let nc = k_extra + 1;
    let cats: Vec<usize> = (0..j).map(|_| r.random_range(2..=5)).collect();
    let thresholds: Vec<Vec<f64>> = cats
        .iter()
        .map(|&m| {
            let mut t: Vec<f64> = (0..m - 1).map(|_| r.random_range(-2.0..2.0)).collect();
            t.sort_by(f64::total_cmp);
            for i in 1..t.len() {
                if t[i] < t[i - 1] + 0.05 {
                    t[i] = t[i - 1] + 0.05;
                }
            }
            t
        })
        .collect();
    let slopes: Vec<f64> = (0..j).map(|_| r.random_range(0.5..1.8)).collect();
    let mut dif_intercept = vec![vec![0.0; nc]; j];
    let mut dif_slope = vec![vec![0.0; nc]; j];
    for jj in 0..j {
        for k in 1..nc {
            dif_intercept[jj][k] = r.random_range(-1.0..1.0);
            dif_slope[jj][k] = r.random_range(-0.4..0.4);
        }
    }
    let mut class_probs: Vec<f64> = (0..nc).map(|_| r.random_range(0.2..1.0)).collect();
    let s: f64 = class_probs.iter().sum();
    class_probs.iter_mut().for_each(|v| *v /= s);
    let mut class_means = vec![0.0];
    let mut class_sds = vec![1.0];
    for _ in 1..nc {
        class_means.push(r.random_range(-1.0..1.0));
        class_sds.push(r.random_range(0.7..1.3));
    }
    let params = ModelParams {
        thresholds,
        slopes,
        dif_intercept,
        dif_slope,
        class_probs,
        class_means,
        class_sds,
    };
    let mut values = vec![0u8; n * j];
    for i in 0..n {
        for jj in 0..j {
            values[i * j + jj] = match i {
                0 => 1,
                1 => 2,
                _ => r.random_range(1..=cats[jj]) as u8,
            };
        }
    }
    let data = ResponseMatrix::new(n, j, cats, values).unwrap();
    (params, data)
}

/// Marginal log-likelihood by the composite trapezoid rule on `[lo, hi]`.
pub fn trapezoid_loglik(p: &ModelParams, data: &ResponseMatrix, lo: f64, hi: f64, g: usize) -> f64 {
    let h = (hi - lo) / (g - 1) as f64;
    let mut total = 0.0;
    for i in 0..data.n_respondents() {
        let mut li = 0.0;
        for k in 0..p.n_classes() {
            let mut integral = 0.0;
            for node in 0..g {
                let theta = lo + node as f64 * h;
                let mut f = naive_normal(theta, p.class_means[k], p.class_sds[k]);
                for j in 0..data.n_items() {
                    f *= naive_category_probs(p, j, k, theta)[data.get(i, j) as usize - 1];
                }
                let w = if node == 0 || node == g - 1 { 0.5 } else { 1.0 };
                integral += w * h * f;
            }
            li += p.class_probs[k] * integral;
        }
        total += li.ln();
    }
    total
}

/// Posterior over (class, node) from the defining ratio, no log-space tricks.
pub fn brute_posterior(p: &ModelParams, data: &ResponseMatrix, grid: &QuadratureGrid) -> Vec<Vec<f64>> {
    (0..data.n_respondents())
        .map(|i| {
            let mut row = Vec::new();
            for k in 0..p.n_classes() {
                for (g, &theta) in grid.nodes().iter().enumerate() {
                    let mut f = p.class_probs[k] * grid.weights()[g] * naive_normal(theta, p.class_means[k], p.class_sds[k]);
                    for j in 0..data.n_items() {
                        f *= naive_category_probs(p, j, k, theta)[data.get(i, j) as usize - 1];
                    }
                    row.push(f);
                }
            }
            let s: f64 = row.iter().sum();
            row.iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Central finite-difference gradient of Q, laid out like `QGradient`
/// (slopes, thresholds, dif_intercept, dif_slope, means, sds), flattened.
pub fn fd_gradient(p: &ModelParams, post: &PosteriorTable, data: &ResponseMatrix, grid: &QuadratureGrid, h: f64) -> Vec<f64> {
    let q = |pp: &ModelParams| q_function(pp, post, data, grid).unwrap();
    let mut out = Vec::new();
    let mut diff = |f: &dyn Fn(&mut ModelParams, f64)| {
        let mut a = p.clone();
        let mut b = p.clone();
        f(&mut a, h);
        f(&mut b, -h);
        out.push((q(&a) - q(&b)) / (2.0 * h));
    };
    for j in 0..p.n_items() {
        diff(&|x: &mut ModelParams, d| x.slopes[j] += d);
    }
    for j in 0..p.n_items() {
        for m in 0..p.thresholds[j].len() {
            diff(&|x: &mut ModelParams, d| x.thresholds[j][m] += d);
        }
    }
    for j in 0..p.n_items() {
        for k in 1..p.n_classes() {
            diff(&|x: &mut ModelParams, d| x.dif_intercept[j][k] += d);
        }
    }
    for j in 0..p.n_items() {
        for k in 1..p.n_classes() {
            diff(&|x: &mut ModelParams, d| x.dif_slope[j][k] += d);
        }
    }
    for k in 1..p.n_classes() {
        diff(&|x: &mut ModelParams, d| x.class_means[k] += d);
    }
    for k in 1..p.n_classes() {
        diff(&|x: &mut ModelParams, d| x.class_sds[k] += d);
    }
    out
}

pub fn flatten_gradient(g: &ordif::em::QGradient) -> Vec<f64> {
    let mut v = g.slopes.clone();
    g.thresholds.iter().for_each(|t| v.extend_from_slice(t));
    g.dif_intercept.iter().for_each(|t| v.extend_from_slice(t));
    g.dif_slope.iter().for_each(|t| v.extend_from_slice(t));
    v.extend_from_slice(&g.class_means);
    v.extend_from_slice(&g.class_sds);
    v
}

/// Worst relative gradient error over `n_cases` random instances.
pub fn gradient_check(n_cases: usize, seed: u64) -> f64 {
    let grid = QuadratureGrid::default();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n_cases {
        let (p, data) = random_instance(&mut r, 20, 5, 2);
        let post = ordif::em::e_step(&p, &data, &grid).unwrap();
        // evaluate the gradient away from the posterior's own parameters
        let mut at = p.clone();
        // slopes stay at or above 0.5 so that a + delta2 remains positive
        for a in at.slopes.iter_mut() {
            *a = (*a + r.random_range(-0.2..0.2)).max(0.5);
        }
        for k in 1..at.n_classes() {
            at.class_means[k] += r.random_range(-0.3..0.3);
        }
        let analytic = flatten_gradient(&ordif::em::q_gradients(&at, &post, &data, &grid).unwrap());
        let numeric = fd_gradient(&at, &post, &data, &grid, 1e-5);
        assert_eq!(analytic.len(), numeric.len());
        for (a, b) in analytic.iter().zip(&numeric) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Worst relative likelihood error against the fine trapezoid rule.
pub fn likelihood_check(n_cases: usize, seed: u64) -> f64 {
    let grid = QuadratureGrid::default();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n_cases {
        let (p, data) = random_instance(&mut r, 10, 4, 2);
        let ours = ordif::likelihood::marginal_loglik(&p, &data, &grid).unwrap();
        let oracle = trapezoid_loglik(&p, &data, -12.0, 12.0, 4001);
        worst = worst.max((ours - oracle).abs() / oracle.abs());
    }
    worst
}
