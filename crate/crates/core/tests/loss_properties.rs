mod common;

use proptest::prelude::*;

use cbloss::effnum::{class_balanced_weights, ClassCounts};
use cbloss::losses::{
    cb_focal_alpha_equivalence_check, class_balanced, focal, sigmoid_ce, softmax_ce, ClassBalance,
    LossFamily, LossSpec,
};

use common::{central_difference, norm_relative_error};

fn logits_and_label(max_c: usize) -> impl Strategy<Value = (Vec<f64>, usize)> {
    (2..=max_c).prop_flat_map(|c| (prop::collection::vec(-5.0f64..5.0, c), 0..c))
}

fn gamma() -> impl Strategy<Value = f64> {
    prop::sample::select(vec![0.0, 0.5, 1.0, 2.0])
}

fn family() -> impl Strategy<Value = LossFamily> {
    prop::sample::select(LossFamily::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn values_are_non_negative((z, y) in logits_and_label(12), f in family(), g in gamma()) {
        let out = LossSpec::new(f, g).unwrap().evaluate(&z, y).unwrap();
        prop_assert!(out.value >= 0.0);
        prop_assert!(out.grad.iter().all(|d| d.is_finite()));
    }

    #[test]
    fn softmax_is_shift_invariant((z, y) in logits_and_label(12), c in -50.0f64..50.0) {
        let a = softmax_ce(&z, y).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let b = softmax_ce(&shifted, y).unwrap();
        prop_assert!((a.value - b.value).abs() <= 1e-9 * a.value.abs().max(1.0));
        for (ga, gb) in a.grad.iter().zip(&b.grad) {
            prop_assert!((ga - gb).abs() <= 1e-9);
        }
    }

    #[test]
    fn softmax_gradient_sums_to_zero((z, y) in logits_and_label(12)) {
        let s: f64 = softmax_ce(&z, y).unwrap().grad.iter().sum();
        prop_assert!(s.abs() <= 1e-12);
    }

    #[test]
    fn softmax_and_sigmoid_gradients_match_differences((z, y) in logits_and_label(10)) {
        for out_fn in [softmax_ce as fn(&[f64], usize) -> _, sigmoid_ce] {
            let analytic = out_fn(&z, y).unwrap().grad;
            let numeric = central_difference(|x| out_fn(x, y).unwrap().value, &z, 1e-5);
            prop_assert!(norm_relative_error(&analytic, &numeric) <= 1e-6);
        }
    }

    #[test]
    fn focal_gradient_matches_differences((z, y) in logits_and_label(10), g in gamma()) {
        let analytic = focal(&z, y, g).unwrap().grad;
        let numeric = central_difference(|x| focal(x, y, g).unwrap().value, &z, 1e-5);
        prop_assert!(norm_relative_error(&analytic, &numeric) <= 1e-5);
    }

    #[test]
    fn focal_without_modulation_is_sigmoid((z, y) in logits_and_label(20)) {
        let f = focal(&z, y, 0.0).unwrap();
        let s = sigmoid_ce(&z, y).unwrap();
        prop_assert!((f.value - s.value).abs() <= 1e-12 * s.value.abs());
        for (a, b) in f.grad.iter().zip(&s.grad) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn class_balance_is_a_uniform_positive_scale(
        (z, y) in logits_and_label(8),
        f in family(),
        beta in prop::sample::select(vec![0.0, 0.9, 0.99, 0.999, 0.9999]),
        seed_counts in prop::collection::vec(1u64..10_000, 8),
    ) {
        let counts = ClassCounts::new(seed_counts[..z.len()].to_vec()).unwrap();
        let plain = LossSpec::new(f, 1.0).unwrap();
        let weighted = plain.clone().with_class_balance(ClassBalance::new(beta, counts.clone()).unwrap());
        let a = plain.evaluate(&z, y).unwrap();
        let b = weighted.evaluate(&z, y).unwrap();
        let alpha = class_balanced_weights(&counts, beta).unwrap().as_slice()[y];
        prop_assert!(alpha > 0.0);
        prop_assert_eq!(b.value, alpha * a.value);
        for (ga, gb) in a.grad.iter().zip(&b.grad) {
            prop_assert_eq!(*gb, alpha * ga);
        }
        let direct = class_balanced(a.clone(), y, beta, &counts).unwrap();
        prop_assert_eq!(direct, b);
    }

    #[test]
    fn class_balanced_focal_is_alpha_balanced_focal(
        (z, y) in logits_and_label(8),
        g in gamma(),
        beta in prop::sample::select(vec![0.0, 0.9, 0.99, 0.999, 0.9999]),
        seed_counts in prop::collection::vec(1u64..10_000, 8),
    ) {
        let counts = ClassCounts::new(seed_counts[..z.len()].to_vec()).unwrap();
        prop_assert!(cb_focal_alpha_equivalence_check(&z, y, g, beta, &counts).unwrap());
    }
}

#[test]
fn focal_gradient_at_large_logits() {
    for g in [0.5, 1.0, 2.0] {
        for (z, y) in [
            (vec![30.0, -30.0], 0),
            (vec![-30.0, 30.0], 0),
            (vec![700.0, -700.0, 0.0], 2),
        ] {
            let out = focal(&z, y, g).unwrap();
            assert!(out.value.is_finite() && out.value >= 0.0);
            assert!(out.grad.iter().all(|d| d.is_finite()));
        }
    }
}
