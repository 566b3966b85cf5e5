mod common;

use common::oracles::*;
use hierfuse::eval::{accuracy, auc, average_precision, eer};
use hierfuse::model::Prediction;
use hierfuse::objective::{progressive_ce, weight_schedule, WeightScheme};
use hierfuse::{Rng, Tensor};
use proptest::prelude::*;

/// Scores and labels with both classes present; small integer grids force ties.
fn instance(rng: &mut Rng, max_len: usize) -> (Vec<f64>, Vec<u8>) {
    let n = 2 + rng.below(max_len - 1);
    let mut labels: Vec<u8> = (0..n).map(|_| rng.bernoulli(0.5) as u8).collect();
    labels[0] = 0;
    labels[1] = 1;
    let tied = rng.bernoulli(0.5);
    let scores = (0..n)
        .map(|_| if tied { rng.below(7) as f64 - 3.0 } else { rng.normal() })
        .collect();
    (scores, labels)
}

#[test]
fn metrics_match_brute_force_on_fifty_instances() {
    let mut rng = Rng::new(2024);
    for _ in 0..50 {
        let (s, l) = instance(&mut rng, 200);
        assert!((auc(&s, &l).unwrap() - auc_pairs(&s, &l)).abs() <= 1e-12);
        assert!((average_precision(&s, &l).unwrap() - ap_sweep(&s, &l)).abs() <= 1e-12);
        assert!((eer(&s, &l).unwrap() - eer_sweep(&s, &l)).abs() <= 1e-12);
    }
}

#[test]
fn progressive_loss_matches_extended_precision() {
    let mut rng = Rng::new(77);
    for k in 0..100 {
        let scheme = WeightScheme::ALL[k % WeightScheme::ALL.len()];
        let len = if k % 4 == 3 { 3 } else { 4 };
        let spread = [1.0, 10.0, 100.0][k % 3];
        let s: Vec<f64> = (0..len).map(|_| rng.uniform_range(-spread, spread)).collect();
        let w = weight_schedule(scheme, len - 1).unwrap();
        let w_ref = weights_ref(scheme.name(), len - 1);
        for (a, b) in w.iter().zip(&w_ref) {
            assert!((a - b).abs() < 1e-15);
        }
        let got = progressive_ce(&Tensor::<f64>::new(s.clone(), &[1, len]).unwrap(), &w)
            .unwrap()
            .item()
            .unwrap();
        let want = progressive_ce_ref(&s, &w_ref);
        assert!((got - want).abs() <= 1e-6, "{s:?} {scheme:?}: {got} vs {want}");
    }
}

#[test]
fn all_equal_similarities_give_the_closed_form() {
    let w = weight_schedule(WeightScheme::Geometric, 3).unwrap();
    let got = progressive_ce(&Tensor::<f64>::zeros(&[1, 4]), &w).unwrap().item().unwrap();
    assert!((got - 2.108887).abs() < 1e-5);
    assert!((progressive_ce_ref(&[0.0; 4], &w) - 2.108887).abs() < 1e-5);
    let f32_val = progressive_ce(&Tensor::<f32>::zeros(&[1, 4]), &w).unwrap().item().unwrap();
    assert!((f64::from(f32_val) - 2.108887).abs() < 1e-5);
}

#[test]
fn ap_can_fall_below_prevalence() {
    let (s, l) = ([0.9, 0.2, 0.1], [0u8, 1, 1]);
    let ap = average_precision(&s, &l).unwrap();
    assert!((ap - 7.0 / 12.0).abs() < 1e-12);
    assert!(ap < 2.0 / 3.0);
    assert!((ap - ap_lower_bound(2, 1)).abs() < 1e-12);
}

fn distinct_instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..120).prop_flat_map(|n| {
        (
            prop::collection::vec(-1e3f64..1e3, n),
            prop::collection::vec(0u8..2, n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = 0;
                l[1] = 1;
                (s, l)
            })
    })
}

fn tied_instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..200).prop_flat_map(|n| {
        (prop::collection::vec(-20i32..20, n), prop::collection::vec(0u8..2, n)).prop_map(|(s, mut l)| {
            l[0] = 0;
            l[1] = 1;
            (s.into_iter().map(f64::from).collect(), l)
        })
    })
}

proptest! {
    #[test]
    fn metrics_agree_with_oracles_under_ties((s, l) in tied_instance()) {
        prop_assert!((auc(&s, &l).unwrap() - auc_pairs(&s, &l)).abs() <= 1e-12);
        prop_assert!((average_precision(&s, &l).unwrap() - ap_sweep(&s, &l)).abs() <= 1e-12);
        prop_assert!((eer(&s, &l).unwrap() - eer_sweep(&s, &l)).abs() <= 1e-12);
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps((s, l) in tied_instance()) {
        let base = auc(&s, &l).unwrap();
        let cubed: Vec<f64> = s.iter().map(|x| x * x * x).collect();
        let squashed: Vec<f64> = s.iter().map(|x| (x / 10.0).exp()).collect();
        let shifted: Vec<f64> = s.iter().map(|x| 2.0 * x - 5.0).collect();
        for t in [cubed, squashed, shifted] {
            prop_assert_eq!(auc(&t, &l).unwrap(), base);
            prop_assert_eq!(average_precision(&t, &l).unwrap(), average_precision(&s, &l).unwrap());
            prop_assert_eq!(eer(&t, &l).unwrap(), eer(&s, &l).unwrap());
        }
    }

    #[test]
    fn metrics_stay_in_unit_interval_and_ap_above_worst_ranking((s, l) in distinct_instance()) {
        let pos = l.iter().filter(|&&x| x == 1).count();
        let (a, p, e) = (auc(&s, &l).unwrap(), average_precision(&s, &l).unwrap(), eer(&s, &l).unwrap());
        for v in [a, p, e] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(p >= ap_lower_bound(pos, l.len() - pos) - 1e-12);
    }

    #[test]
    fn reversing_roles_preserves_auc_and_eer((s, l) in distinct_instance()) {
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let flip: Vec<u8> = l.iter().map(|x| 1 - x).collect();
        prop_assert!((auc(&neg, &flip).unwrap() - auc(&s, &l).unwrap()).abs() <= 1e-12);
        prop_assert!((eer(&neg, &flip).unwrap() - eer(&s, &l).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn decision_accuracy_equals_thresholding_at_zero(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0u8..2), 1..100)
    ) {
        let preds: Vec<Prediction> = pairs.iter().map(|&(r, f, _)| Prediction::new(r, f)).collect();
        let labels: Vec<u8> = pairs.iter().map(|p| p.2).collect();
        let by_decision: Vec<bool> = preds.iter().map(|p| p.is_fake).collect();
        let by_score: Vec<bool> = preds.iter().map(|p| p.fake_score >= 0.0).collect();
        prop_assert_eq!(accuracy(&by_decision, &labels).unwrap(), accuracy(&by_score, &labels).unwrap());
    }

    #[test]
    fn progressive_loss_tracks_the_reference(s in prop::collection::vec(-60.0f64..60.0, 4)) {
        let w = weight_schedule(WeightScheme::Geometric, 3).unwrap();
        let got = progressive_ce(&Tensor::<f64>::new(s.clone(), &[1, 4]).unwrap(), &w).unwrap().item().unwrap();
        prop_assert!((got - progressive_ce_ref(&s, &w)).abs() <= 1e-9);
        prop_assert!(got >= 0.0);
    }
}
