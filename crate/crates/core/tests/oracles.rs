mod common;

use common::*;
use ordif::em::{e_step, fit, fit_from, prox_l1, EMConfig};
use ordif::likelihood::{marginal_loglik, penalty_value, respondent_logliks};
use ordif::model::{ModelParams, QuadratureGrid};
use ordif::simulation::{auc, derive_seed, generate, SimulationConfig};
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn analytic_gradient_matches_finite_differences() {
    let worst = gradient_check(60, 11);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn likelihood_matches_fine_trapezoid() {
    let worst = likelihood_check(20, 12);
    assert!(worst < 1e-6, "worst relative error {worst}");
}

#[test]
fn e_step_matches_brute_force() {
    let grid = QuadratureGrid::default();
    let mut r = rng(13);
    for _ in 0..20 {
        let (p, data) = random_instance(&mut r, 8, 4, 2);
        let post = e_step(&p, &data, &grid).unwrap();
        let brute = brute_posterior(&p, &data, &grid);
        for (i, row) in brute.iter().enumerate() {
            for (a, b) in post.row(i).iter().zip(row) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn category_probs_match_naive() {
    let mut r = rng(14);
    for _ in 0..50 {
        let (p, _) = random_instance(&mut r, 3, 5, 2);
        let theta = r.random_range(-4.0..4.0);
        for j in 0..p.n_items() {
            for k in 0..p.n_classes() {
                let ours = p.category_prob(j, k, theta).unwrap();
                let naive = naive_category_probs(&p, j, k, theta);
                for (a, b) in ours.iter().zip(&naive) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn loglik_invariant_to_row_order() {
    let grid = QuadratureGrid::default();
    let mut r = rng(15);
    let (p, data) = random_instance(&mut r, 20, 5, 2);
    let mut order: Vec<usize> = (0..data.n_respondents()).collect();
    order.shuffle(&mut r);
    let shuffled = data.permute_rows(&order).unwrap();
    let a = marginal_loglik(&p, &data, &grid).unwrap();
    let b = marginal_loglik(&p, &shuffled, &grid).unwrap();
    assert!((a - b).abs() <= 1e-10 * a.abs());
    let per_a = respondent_logliks(&p, &data, &grid).unwrap();
    let per_b = respondent_logliks(&p, &shuffled, &grid).unwrap();
    for (new, &old) in order.iter().enumerate() {
        assert_eq!(per_b[new], per_a[old]);
    }
}

#[test]
fn rereferencing_preserves_likelihood() {
    let mut r = rng(16);
    let mut done = 0;
    while done < 10 {
        let (p, data) = random_instance(&mut r, 12, 4, 2);
        if p.n_classes() < 2 {
            continue;
        }
        let mut order: Vec<usize> = (0..p.n_classes()).collect();
        order.swap(0, 1);
        let q = p.rereference(&order).unwrap();
        assert!(q.validate().is_empty() || q.slopes.iter().any(|&a| a < 1e-3));
        let a = trapezoid_loglik(&p, &data, -14.0, 14.0, 4001);
        let b = trapezoid_loglik(&q, &data, -14.0, 14.0, 4001);
        assert!((a - b).abs() < 1e-8 * a.abs(), "{a} vs {b}");
        done += 1;
    }
}

#[test]
fn prox_is_soft_thresholding() {
    let mut r = rng(17);
    for _ in 0..1000 {
        let x: f64 = r.random_range(-5.0..5.0);
        let t: f64 = r.random_range(0.0..3.0);
        let expected = if x > t {
            x - t
        } else if x < -t {
            x + t
        } else {
            0.0
        };
        assert_eq!(prox_l1(x, t), expected);
    }
}

#[test]
fn penalty_matches_absolute_sum() {
    let mut r = rng(18);
    for _ in 0..200 {
        let (mut p, _) = random_instance(&mut r, 3, 6, 2);
        let mut direct = 0.0;
        for j in 0..p.n_items() {
            for k in 1..p.n_classes() {
                if r.random_bool(0.5) {
                    p.dif_intercept[j][k] = 0.0;
                }
                if r.random_bool(0.5) {
                    p.dif_slope[j][k] = 0.0;
                }
                direct += p.dif_intercept[j][k].abs();
                direct += p.dif_slope[j][k].abs();
            }
        }
        assert_eq!(penalty_value(&p), direct);
    }
}

#[test]
fn fit_traces_decrease() {
    let cfg = SimulationConfig::two_class(300, 8, 0.3);
    let ds = generate(&cfg, derive_seed(5, 0)).unwrap();
    let grid = QuadratureGrid::default();
    for lambda in [0.0, 1e-3, 1e-2] {
        let f = fit(&ds.responses, 1, lambda, &grid, &EMConfig::default()).unwrap();
        assert!(f.trace.windows(2).all(|w| w[1] < w[0] + 1e-10), "lambda {lambda}");
        assert!(f.params.validate().is_empty());
    }
}

#[test]
fn truth_start_improves_likelihood() {
    let cfg = SimulationConfig::two_class(400, 10, 0.5);
    let ds = generate(&cfg, derive_seed(6, 0)).unwrap();
    let grid = QuadratureGrid::default();
    let f = fit_from(&ds.responses, &ds.true_params, 0.0, &grid, &EMConfig::default()).unwrap();
    let at_truth = marginal_loglik(&ds.true_params, &ds.responses, &grid).unwrap();
    assert!(f.objective.loglik >= at_truth);
}

#[test]
fn auc_matches_pair_counting() {
    let mut r = rng(19);
    for _ in 0..50 {
        let n = r.random_range(2..60);
        // coarse scores to create ties
        let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0..8) as f64) / 8.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        let a = auc(&scores, &labels);
        if den == 0.0 {
            assert!(a.is_nan());
        } else {
            assert!((a - num / den).abs() < 1e-12);
        }
    }
}

#[test]
fn random_scores_give_half_auc() {
    let mut r = rng(20);
    let scores: Vec<f64> = (0..20000).map(|_| r.random()).collect();
    let labels: Vec<bool> = (0..20000).map(|_| r.random_bool(0.3)).collect();
    assert!((auc(&scores, &labels) - 0.5).abs() < 0.05);
    let sep: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    assert_eq!(auc(&sep, &labels), 1.0);
}

#[test]
fn reference_only_generation_matches_marginal_probs() {
    let mut cfg = SimulationConfig::two_class(5000, 3, 0.0);
    cfg.n_dif_items = 0;
    let ds = generate(&cfg, 99).unwrap();
    assert!(ds.true_classes.iter().all(|&k| k == 0));
    let p: &ModelParams = &ds.true_params;
    // marginal category probabilities under N(0, 1) by fine quadrature
    for j in 0..3 {
        let mut expected = [0.0; 4];
        let h = 0.01;
        for s in 0..=1600 {
            let t = -8.0 + s as f64 * h;
            let w = naive_normal(t, 0.0, 1.0) * h;
            for (c, v) in naive_category_probs(p, j, 0, t).iter().enumerate() {
                expected[c] += w * v;
            }
        }
        let counts = ds.responses.category_counts(j);
        for c in 0..4 {
            let pe = expected[c];
            let se = (pe * (1.0 - pe) / 5000.0).sqrt();
            let obs = counts[c] as f64 / 5000.0;
            assert!((obs - pe).abs() < 3.0 * se + 1e-9, "item {j} cat {c}: {obs} vs {pe}");
        }
    }
}
