mod common;

use std::f64::consts::PI;

use common::gradcheck::max_relative_error;
use hst_core::model::GmmPrediction;
use hst_core::numerics::{Graph, Tensor};
use hst_core::objective::*;
use hst_core::scene::GroundTruth;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

type R = rand_chacha::ChaCha8Rng;

/// Prediction with the same mean and scale at every step of each mode.
fn constant_modes(agents: usize, steps: usize, means: &[[f64; 2]], sigma: [f64; 2], logits: Vec<f64>) -> GmmPrediction {
    let modes = means.len();
    let mut mu = Vec::new();
    let mut sg = Vec::new();
    for _ in 0..agents * steps {
        for m in means {
            mu.extend_from_slice(m);
            sg.extend_from_slice(&sigma);
        }
    }
    GmmPrediction::new(agents, steps, modes, mu, sg, logits).unwrap()
}

fn gt_of(points: Vec<Vec<[f64; 2]>>) -> GroundTruth {
    let valid = points.iter().map(|r| vec![true; r.len()]).collect();
    GroundTruth { position: points, valid }
}

fn random_instance(rng: &mut R, agents: usize, steps: usize, modes: usize) -> (GmmPrediction, GroundTruth) {
    let n = agents * steps * modes * 2;
    let mu = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let sigma = (0..n).map(|_| rng.random_range(0.2..1.5)).collect();
    let logits = (0..modes).map(|_| rng.random_range(-1.0..1.0)).collect();
    let pred = GmmPrediction::new(agents, steps, modes, mu, sigma, logits).unwrap();
    let mut gt = GroundTruth::empty(agents, steps);
    for i in 0..agents {
        for t in 0..steps {
            gt.position[i][t] = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            gt.valid[i][t] = rng.random_bool(0.8);
        }
        let t = rng.random_range(0..steps);
        gt.valid[i][t] = true;
    }
    (pred, gt)
}

/// Straight-line density: weighted product of 1D normal pdfs.
fn mixture_density(pred: &GmmPrediction, x: [f64; 2], i: usize, t: usize) -> f64 {
    let z: f64 = pred.logits.iter().map(|l| l.exp()).sum();
    (0..pred.modes)
        .map(|m| {
            let w = pred.logits[m].exp() / z;
            let mu = pred.mean(i, t, m);
            let s = pred.scale(i, t, m);
            let pdf = |d: usize| (-(x[d] - mu[d]).powi(2) / (2.0 * s[d] * s[d])).exp() / ((2.0 * PI).sqrt() * s[d]);
            w * pdf(0) * pdf(1)
        })
        .sum()
}

fn brute_ade(pred: &GmmPrediction, gt: &GroundTruth, i: usize, m: usize) -> Option<f64> {
    let d: Vec<f64> = (0..pred.steps)
        .filter(|&t| gt.valid[i][t])
        .map(|t| {
            let p = pred.mean(i, t, m);
            let q = gt.position[i][t];
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
        })
        .collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

#[test]
fn unit_gaussian_peak_and_offset() {
    let pred = constant_modes(1, 1, &[[0.5, -0.25]], [1.0, 1.0], vec![0.0]);
    let lp = gmm_log_prob(&pred, [0.5, -0.25], 0, 0);
    assert!((lp + (2.0 * PI).ln()).abs() < 1e-12);
    assert!((lp + 1.837877).abs() < 1e-6);
    let off = gmm_log_prob(&pred, [1.5, -0.25], 0, 0);
    assert!((off - (-(2.0 * PI).ln() - 0.5)).abs() < 1e-12);
}

#[test]
fn two_component_mixture_matches_direct_sum() {
    let pred = constant_modes(1, 1, &[[1.0, 0.0], [-1.0, 0.0]], [1.0, 1.0], vec![0.0, 0.0]);
    let direct = 0.5 * (-0.5f64).exp() / (2.0 * PI) * 2.0;
    assert!((gmm_log_prob(&pred, [0.0, 0.0], 0, 0) - direct.ln()).abs() < 1e-12);
}

#[test]
fn single_mode_loss_is_plain_nll_sum() {
    let mut rng = R::seed_from_u64(1);
    let (pred, gt) = random_instance(&mut rng, 2, 4, 1);
    let loss = min_nll_loss(&pred, &gt).unwrap();
    assert_eq!(loss.best_mode, 0);
    assert!(loss.mode_ce.abs() < 1e-15);
    let mut sum = 0.0;
    for i in 0..2 {
        for t in 0..4 {
            if gt.valid[i][t] {
                sum -= mixture_density(&pred, gt.position[i][t], i, t).ln();
            }
        }
    }
    assert!((loss.nll - sum).abs() < 1e-10);
    assert!((loss.total - sum).abs() < 1e-10);
}

#[test]
fn exact_mode_dominates() {
    let gt = gt_of(vec![vec![[0.0, 0.0]; 3]]);
    let pred = constant_modes(1, 3, &[[0.7, 0.0], [0.0, 0.0]], [1.0, 1.0], vec![0.0, 0.0]);
    let loss = min_nll_loss(&pred, &gt).unwrap();
    assert_eq!(loss.best_mode, 1);
    assert!((loss.mode_ce - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn loss_without_ground_truth_is_an_error() {
    let pred = constant_modes(1, 2, &[[0.0, 0.0]], [1.0, 1.0], vec![0.0]);
    let gt = GroundTruth::empty(1, 2);
    assert_eq!(min_nll_loss(&pred, &gt), Err(hst_core::Error::NoGroundTruth));
    assert!(min_ade(&pred, &gt, ModeSelection::PerAgent).is_err());
}

#[test]
fn sigma_floor_caps_density() {
    let pred = constant_modes(1, 1, &[[0.0, 0.0]], [1e-9, 1e-9], vec![0.0]);
    let floor = constant_modes(1, 1, &[[0.0, 0.0]], [SIGMA_FLOOR, SIGMA_FLOOR], vec![0.0]);
    assert_eq!(gmm_log_prob(&pred, [0.0, 0.0], 0, 0), gmm_log_prob(&floor, [0.0, 0.0], 0, 0));
}

#[test]
fn mode_choice_matches_enumeration() {
    let mut rng = R::seed_from_u64(7);
    for _ in 0..500 {
        let (pred, gt) = random_instance(&mut rng, 2, 3, 3);
        let sums: Vec<f64> = (0..3)
            .map(|m| {
                let single = pred.select_modes_for_test(m);
                let mut s = 0.0;
                for i in 0..2 {
                    for t in 0..3 {
                        if gt.valid[i][t] {
                            s -= mixture_density(&single, gt.position[i][t], i, t).ln();
                        }
                    }
                }
                s
            })
            .collect();
        let best = (0..3).min_by(|&a, &b| sums[a].partial_cmp(&sums[b]).unwrap()).unwrap();
        let loss = min_nll_loss(&pred, &gt).unwrap();
        assert_eq!(loss.best_mode, best);
        assert!((loss.nll - sums[best]).abs() < 1e-9);
        for s in &sums {
            assert!(loss.nll <= s + 1e-12);
        }
    }
}

trait SingleMode {
    fn select_modes_for_test(&self, m: usize) -> GmmPrediction;
}

impl SingleMode for GmmPrediction {
    fn select_modes_for_test(&self, m: usize) -> GmmPrediction {
        let mut mu = Vec::new();
        let mut sigma = Vec::new();
        for i in 0..self.agents {
            for t in 0..self.steps {
                mu.extend_from_slice(&self.mean(i, t, m));
                sigma.extend_from_slice(&self.scale(i, t, m));
            }
        }
        GmmPrediction::new(self.agents, self.steps, 1, mu, sigma, vec![0.0]).unwrap()
    }
}

#[test]
fn most_likely_mode_tie_rule() {
    let p = |l: Vec<f64>| constant_modes(1, 1, &vec![[0.0, 0.0]; l.len()], [1.0, 1.0], l);
    assert_eq!(most_likely_mode(&p(vec![0.1, 2.0, -1.0])), 1);
    assert_eq!(most_likely_mode(&p(vec![0.3])), 0);
    assert_eq!(most_likely_mode(&p(vec![0.5; 4])), 0);
    assert_eq!(argmin(&[1.0, 1.0, 2.0]), 0);
}

#[test]
fn ade_fde_hand_examples() {
    let gt = gt_of(vec![vec![[0.0, 0.0], [1.0, 0.0]]]);
    let pred = constant_modes(1, 2, &[[0.0, 0.0], [1.0, 0.0]], [1.0, 1.0], vec![0.0, 0.0]);
    assert!((min_ade(&pred, &gt, ModeSelection::PerAgent).unwrap() - 0.5).abs() < 1e-15);

    let exact = GmmPrediction::new(1, 2, 1, vec![0.0, 0.0, 1.0, 0.0], vec![1.0; 4], vec![0.0]).unwrap();
    assert_eq!(min_ade(&exact, &gt, ModeSelection::PerAgent).unwrap(), 0.0);
    assert_eq!(min_fde(&exact, &gt, ModeSelection::PerAgent).unwrap(), 0.0);

    let gt = gt_of(vec![vec![[5.0, 5.0], [0.0, 3.0]]]);
    let pred = constant_modes(1, 2, &[[0.0, 0.0], [3.0, 4.0]], [1.0, 1.0], vec![0.0, 0.0]);
    assert!((min_fde(&pred, &gt, ModeSelection::PerAgent).unwrap() - 3.0).abs() < 1e-15);
}

#[test]
fn fde_uses_last_valid_step() {
    let mut gt = gt_of(vec![vec![[0.0, 0.0], [2.0, 0.0], [9.0, 9.0]]]);
    gt.valid[0][2] = false;
    let pred = constant_modes(1, 3, &[[2.0, 0.0]], [1.0, 1.0], vec![0.0]);
    assert_eq!(min_fde(&pred, &gt, ModeSelection::PerAgent).unwrap(), 0.0);
    assert!((min_ade(&pred, &gt, ModeSelection::PerAgent).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn joint_and_per_agent_selection_differ() {
    // agent 0 best in mode 0, agent 1 best in mode 1
    let gt = gt_of(vec![vec![[0.0, 0.0]], vec![[10.0, 0.0]]]);
    let mu = vec![0.0, 0.0, 1.0, 0.0, 9.0, 0.0, 10.0, 0.0];
    let pred = GmmPrediction::new(2, 1, 2, mu, vec![1.0; 8], vec![0.0, 0.0]).unwrap();
    assert_eq!(min_ade(&pred, &gt, ModeSelection::PerAgent).unwrap(), 0.0);
    assert!((min_ade(&pred, &gt, ModeSelection::Joint).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = R::seed_from_u64(11);
    for _ in 0..500 {
        let (pred, gt) = random_instance(&mut rng, 3, 4, 3);
        let per: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..3).map(|m| brute_ade(&pred, &gt, i, m).unwrap()).collect())
            .collect();
        let want = per.iter().map(|r| r.iter().cloned().fold(f64::MAX, f64::min)).sum::<f64>() / 3.0;
        assert!((min_ade(&pred, &gt, ModeSelection::PerAgent).unwrap() - want).abs() < 1e-12);

        let joint = (0..3).map(|m| per.iter().map(|r| r[m]).sum::<f64>() / 3.0).fold(f64::MAX, f64::min);
        assert!((min_ade(&pred, &gt, ModeSelection::Joint).unwrap() - joint).abs() < 1e-12);

        let ml = most_likely_mode(&pred);
        let want_ml = per.iter().map(|r| r[ml]).sum::<f64>() / 3.0;
        let got_ml = ml_ade(&pred, &gt).unwrap();
        assert!((got_ml - want_ml).abs() < 1e-12);
        assert!(min_ade(&pred, &gt, ModeSelection::PerAgent).unwrap() <= got_ml + 1e-15);

        let mut fde = 0.0;
        for i in 0..3 {
            let t = (0..4).rev().find(|&t| gt.valid[i][t]).unwrap();
            let q = gt.position[i][t];
            fde += (0..3)
                .map(|m| {
                    let p = pred.mean(i, t, m);
                    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
                })
                .fold(f64::MAX, f64::min);
        }
        assert!((min_fde(&pred, &gt, ModeSelection::PerAgent).unwrap() - fde / 3.0).abs() < 1e-12);

        let mut nll = 0.0;
        let mut n = 0;
        for i in 0..3 {
            for t in 0..4 {
                if gt.valid[i][t] {
                    nll -= mixture_density(&pred, gt.position[i][t], i, t).ln();
                    n += 1;
                }
            }
        }
        assert!((nll_metric(&pred, &gt).unwrap() - nll / n as f64).abs() < 1e-12);
    }
}

#[test]
fn ml_ade_equals_min_ade_for_one_mode() {
    let mut rng = R::seed_from_u64(3);
    let (pred, gt) = random_instance(&mut rng, 2, 5, 1);
    assert_eq!(ml_ade(&pred, &gt).unwrap(), min_ade(&pred, &gt, ModeSelection::PerAgent).unwrap());
}

#[test]
fn nll_metric_closed_forms() {
    let gt = gt_of(vec![vec![[1.0, 2.0]]]);
    let unit = constant_modes(1, 1, &[[1.0, 2.0]], [1.0, 1.0], vec![0.0]);
    assert!((nll_metric(&unit, &gt).unwrap() - 1.837877).abs() < 1e-6);
    let wide = constant_modes(1, 1, &[[1.0, 2.0]], [2.0, 3.0], vec![0.0]);
    let d = nll_metric(&wide, &gt).unwrap() - nll_metric(&unit, &gt).unwrap();
    assert!((d - 6f64.ln()).abs() < 1e-12);
}

#[test]
fn density_integrates_to_one() {
    let mut rng = R::seed_from_u64(5);
    for _ in 0..3 {
        let modes = 3;
        let mu: Vec<f64> = (0..modes * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sigma: Vec<f64> = (0..modes * 2).map(|_| rng.random_range(0.3..0.8)).collect();
        let logits = (0..modes).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pred = GmmPrediction::new(1, 1, modes, mu, sigma, logits).unwrap();
        let h = 0.02;
        let mut total = 0.0;
        let mut x = -6.0;
        while x < 6.0 {
            let mut y = -6.0;
            while y < 6.0 {
                total += gmm_log_prob(&pred, [x + h / 2.0, y + h / 2.0], 0, 0).exp() * h * h;
                y += h;
            }
            x += h;
        }
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }
}

#[test]
fn horizon_step_counts() {
    assert_eq!(horizon_steps(2.0, 1.0 / 3.0), 6);
    assert_eq!(horizon_steps(4.0, 1.0 / 3.0), 12);
    assert_eq!(horizon_steps(4.0, 0.4), 10);
    assert_eq!(horizon_steps(1.0, 0.4), 3);
}

#[test]
fn accumulator_averages_agent_windows() {
    let mut acc = MetricAccumulator::new(1.0 / 3.0, ModeSelection::PerAgent);
    let a = gt_of(vec![vec![[0.0, 0.0]; 12]]);
    let pa = constant_modes(1, 12, &[[1.0, 0.0]], [1.0, 1.0], vec![0.0]);
    let b = gt_of(vec![vec![[0.0, 0.0]; 12], vec![[0.0, 0.0]; 12]]);
    let pb = constant_modes(2, 12, &[[0.0, 0.0]], [1.0, 1.0], vec![0.0]);
    acc.add(&pa, &a).unwrap();
    acc.add(&pb, &b).unwrap();
    let r = acc.finish().unwrap();
    assert_eq!(r.count, 3);
    assert!((r.min_ade - 1.0 / 3.0).abs() < 1e-15);
    assert!((r.min_ade_2s - 1.0 / 3.0).abs() < 1e-15);
    assert!((r.min_fde - 1.0 / 3.0).abs() < 1e-15);
    assert!(MetricAccumulator::new(0.4, ModeSelection::Joint).finish().is_err());
}

#[test]
fn graph_loss_matches_values_and_gradients() {
    let mut rng = R::seed_from_u64(21);
    for trial in 0..5 {
        let (pred, gt) = random_instance(&mut rng, 2, 3, 3);
        let (m, n, f) = (3, 2, 3);
        let mut mu = vec![0.0; m * n * f * 2];
        let mut sg = vec![0.0; m * n * f * 2];
        for mode in 0..m {
            for i in 0..n {
                for t in 0..f {
                    let o = ((mode * n + i) * f + t) * 2;
                    mu[o..o + 2].copy_from_slice(&pred.mean(i, t, mode));
                    sg[o..o + 2].copy_from_slice(&pred.scale(i, t, mode));
                }
            }
        }
        let mut g = Graph::new();
        let vm = g.variable(Tensor::new(&[m, n, f, 2], mu.clone()).unwrap()).unwrap();
        let vs = g.variable(Tensor::new(&[m, n, f, 2], sg.clone()).unwrap()).unwrap();
        let vl = g.variable(Tensor::new(&[m], pred.logits.clone()).unwrap()).unwrap();
        let loss = min_nll_loss_graph(&mut g, vm, vs, vl, &gt).unwrap();
        let plain = min_nll_loss(&pred, &gt).unwrap();
        assert_eq!(loss.breakdown.best_mode, plain.best_mode);
        assert!((loss.breakdown.total - plain.total).abs() < 1e-10);

        let log_sigma: Vec<f64> = sg.iter().map(|s| s.ln()).collect();
        let inputs = [
            Tensor::new(&[m, n, f, 2], mu).unwrap(),
            Tensor::new(&[m, n, f, 2], log_sigma).unwrap(),
            Tensor::new(&[m], pred.logits.clone()).unwrap(),
        ];
        let gt2 = gt.clone();
        let err = max_relative_error(
            &inputs,
            move |g, v| {
                let s = g.exp(v[1])?;
                Ok(min_nll_loss_graph(g, v[0], s, v[2], &gt2)?.total)
            },
            trial,
        );
        assert!(err < 1e-4, "relative error {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nll_invariant_to_mode_permutation(seed in any::<u64>(), rot in 1usize..4) {
        let mut rng = R::seed_from_u64(seed);
        let (pred, gt) = random_instance(&mut rng, 2, 3, 4);
        let perm: Vec<usize> = (0..4).map(|m| (m + rot) % 4).collect();
        let mut mu = Vec::new();
        let mut sigma = Vec::new();
        for i in 0..2 {
            for t in 0..3 {
                for &m in &perm {
                    mu.extend_from_slice(&pred.mean(i, t, m));
                    sigma.extend_from_slice(&pred.scale(i, t, m));
                }
            }
        }
        let logits = perm.iter().map(|&m| pred.logits[m]).collect();
        let permuted = GmmPrediction::new(2, 3, 4, mu, sigma, logits).unwrap();
        let a = nll_metric(&pred, &gt).unwrap();
        let b = nll_metric(&permuted, &gt).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn loss_is_minimal_and_min_ade_bounded_by_ml_ade(seed in any::<u64>()) {
        let mut rng = R::seed_from_u64(seed);
        let (pred, gt) = random_instance(&mut rng, 3, 4, 5);
        let loss = min_nll_loss(&pred, &gt).unwrap();
        for s in mode_nll_sums(&pred, &gt).unwrap() {
            prop_assert!(loss.nll <= s);
        }
        prop_assert!(min_ade(&pred, &gt, ModeSelection::PerAgent).unwrap() <= ml_ade(&pred, &gt).unwrap() + 1e-15);
        prop_assert!(min_ade(&pred, &gt, ModeSelection::PerAgent).unwrap() <= min_ade(&pred, &gt, ModeSelection::Joint).unwrap() + 1e-15);
    }
}
