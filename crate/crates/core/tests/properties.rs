//! Invariants of transition matrices, posterior composition, attacks, and
//! AUROC, checked over random draws.

use manlab::attacks::{check_budget, fgsm, max_distance, pgd, AttackConfig, AttackMode, Norm, Objective, TargetLabel};
use manlab::detection::auroc_values;
use manlab::models::{infer_natural_posterior, Architecture, Defense, TargetClassifier, TransitionNetwork};
use manlab::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arch(d: usize, c: usize) -> Architecture {
    Architecture {
        input_width: d,
        classes: c,
        target_hidden: vec![8],
        transition_hidden: vec![8, 8],
    }
}

fn models(seed: u64, d: usize, c: usize) -> (TargetClassifier, TransitionNetwork) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = arch(d, c);
    let t = TargetClassifier::new(&a, seed, &mut rng).unwrap();
    let w = TransitionNetwork::new(&a, seed, &mut rng).unwrap();
    (t, w)
}

fn inputs(values: &[f64], d: usize) -> Tensor {
    Tensor::new(vec![values.len() / d, d], values.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn transition_rows_are_stochastic(
        seed in any::<u64>(),
        c in 2usize..6,
        x in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let (_, w) = models(seed, 3, c);
        let t = w.matrices(&inputs(&x, 3)).unwrap();
        prop_assert_eq!(t.shape(), &[1, c, c]);
        for row in t.data().chunks(c) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9, "row sum {}", s);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn composed_posterior_matches_elementwise_sum(
        seed in any::<u64>(),
        c in 2usize..6,
        x in prop::collection::vec(0.0f64..1.0, 2 * 4),
    ) {
        let (t, w) = models(seed, 2, c);
        let x = inputs(&x, 2);
        let p = t.probabilities(&x).unwrap();
        let mats = w.matrices(&x).unwrap();
        let composed = Defense::new(&t, Some(&w)).unwrap().posterior(&x).unwrap();
        let per_matrix = w.transition_matrices(&x).unwrap();
        for s in 0..x.rows() {
            let tm = mats.row(s);
            let via_fn = infer_natural_posterior(p.row(s), &per_matrix[s]).unwrap();
            for j in 0..c {
                // Summed in reverse order, so the two loops cannot share rounding.
                let mut brute = 0.0;
                for i in (0..c).rev() {
                    brute += p.row(s)[i] * tm[i * c + j];
                }
                prop_assert!((composed.at2(s, j) - brute).abs() <= 1e-12);
                prop_assert!((via_fn[j] - brute).abs() <= 1e-12);
            }
            let total: f64 = composed.row(s).iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
        }
    }
}

fn objective_strategy() -> impl Strategy<Value = Objective> {
    prop_oneof![
        Just(Objective::Combined),
        Just(Objective::Matrix),
        Just(Objective::Dual),
        Just(Objective::TargetOnly),
    ]
}

fn norm_strategy() -> impl Strategy<Value = Norm> {
    prop_oneof![Just(Norm::Linf), Just(Norm::L2)]
}

/// Inputs that often sit exactly on the box faces.
fn box_value() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0]
}

const ROWS: usize = 10;

proptest! {
    // 100 batches of 10 rows: 1000 attacked instances.
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn attacks_stay_in_budget_and_box(
        seed in any::<u64>(),
        norm in norm_strategy(),
        objective in objective_strategy(),
        eps in 0.0f64..0.6,
        steps in 1usize..8,
        targeted in any::<bool>(),
        x in prop::collection::vec(box_value(), 3 * ROWS),
        y in prop::collection::vec(0usize..4, ROWS),
    ) {
        let (t, w) = models(seed, 3, 4);
        let x = inputs(&x, 3);
        let mut cfg = AttackConfig::pgd10(norm, eps, objective);
        cfg.steps = steps;
        if targeted && objective != Objective::Matrix {
            cfg.mode = AttackMode::Targeted(TargetLabel::LeastLikely);
        }
        let trans = objective.needs_transition().then_some(&w);
        let adv = pgd(&x, &y, &cfg, &t, trans, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
        prop_assert!(max_distance(&x, &adv, norm) <= eps + 1e-9);
        prop_assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        check_budget(&x, &adv, norm, eps).unwrap();
    }

    #[test]
    fn fgsm_is_one_step_pgd_bitwise(
        seed in any::<u64>(),
        norm in norm_strategy(),
        objective in objective_strategy(),
        eps in 0.0f64..0.5,
        x in prop::collection::vec(box_value(), 3 * ROWS),
        y in prop::collection::vec(0usize..4, ROWS),
    ) {
        let (t, w) = models(seed, 3, 4);
        let x = inputs(&x, 3);
        let trans = objective.needs_transition().then_some(&w);
        let one_step = AttackConfig {
            norm,
            epsilon: eps,
            steps: 1,
            step_size: eps,
            random_start: false,
            mode: AttackMode::Nontarget,
            objective,
            dual_weights: (1.0, 1.0),
        };
        let a = fgsm(&x, &y, norm, eps, objective, &t, trans).unwrap();
        let b = pgd(&x, &y, &one_step, &t, trans, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let bits = |v: &Tensor| v.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn zero_budget_is_identity(
        seed in any::<u64>(),
        norm in norm_strategy(),
        objective in objective_strategy(),
        x in prop::collection::vec(box_value(), 3 * ROWS),
        y in prop::collection::vec(0usize..4, ROWS),
    ) {
        let (t, w) = models(seed, 3, 4);
        let x = inputs(&x, 3);
        let trans = objective.needs_transition().then_some(&w);
        for cfg in [
            AttackConfig::pgd40(norm, 0.1, objective).with_epsilon(0.0),
            AttackConfig::fgsm(norm, 0.0, objective),
        ] {
            let adv = pgd(&x, &y, &cfg, &t, trans, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(&adv, &x);
        }
    }
}

fn brute_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Scores on a coarse grid, so ties are common.
fn grid_scores(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u32..40).prop_map(|k| k as f64 / 40.0), len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auroc_matches_pair_counting(pos in grid_scores(1..60), neg in grid_scores(1..60)) {
        let a = auroc_values(&pos, &neg).unwrap();
        prop_assert!((a - brute_auroc(&pos, &neg)).abs() <= 1e-12);
    }

    #[test]
    fn auroc_is_invariant_under_monotone_maps(pos in grid_scores(1..60), neg in grid_scores(1..60)) {
        let a = auroc_values(&pos, &neg).unwrap();
        for f in [|v: f64| 3.0 * v + 1.0, |v: f64| v.exp(), |v: f64| v * v * v] {
            let fp: Vec<f64> = pos.iter().map(|&v| f(v)).collect();
            let fn_: Vec<f64> = neg.iter().map(|&v| f(v)).collect();
            prop_assert!((auroc_values(&fp, &fn_).unwrap() - a).abs() <= 1e-12);
        }
    }

    #[test]
    fn swapping_classes_complements_auroc(pos in grid_scores(1..60), neg in grid_scores(1..60)) {
        let a = auroc_values(&pos, &neg).unwrap();
        let b = auroc_values(&neg, &pos).unwrap();
        prop_assert!((a + b - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn auroc_on_a_thousand_scores_matches_pair_counting() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pos: Vec<f64> = (0..500).map(|_| (rng.random_range(0..200) as f64) / 200.0 + 0.1).collect();
    let neg: Vec<f64> = (0..500).map(|_| (rng.random_range(0..200) as f64) / 200.0).collect();
    let a = auroc_values(&pos, &neg).unwrap();
    assert!((a - brute_auroc(&pos, &neg)).abs() <= 1e-12, "{a}");
}
