use proptest::prelude::*;

use metabias_core::dataset::{EffectEstimate, MetaDataset, ModeratorSchema};
use metabias_core::ensemble::{interval_probabilities, selection_normalizer, WeightFunction};
use metabias_core::pooling::uwls;

fn dataset(rows: &[(usize, f64, f64)]) -> MetaDataset {
    let est = rows
        .iter()
        .enumerate()
        .map(|(i, &(s, t, se))| EffectEstimate::new(format!("e{i}"), format!("s{s}"), t, se))
        .collect();
    MetaDataset::new(est, ModeratorSchema::empty(), "prop").unwrap()
}

fn rows() -> impl Strategy<Value = Vec<(usize, f64, f64)>> {
    prop::collection::vec((0usize..6, -2.0f64..2.0, 0.01f64..1.0), 6..40)
        .prop_filter("two studies", |r| r.iter().any(|x| x.0 != r[0].0))
}

proptest! {
    #[test]
    fn pooling_ignores_order(r in rows(), seed in 0u64..1000) {
        let a = uwls(&dataset(&r)).unwrap();
        let mut shuffled = r.clone();
        let n = shuffled.len();
        for i in 0..n {
            shuffled.swap(i, (seed as usize + 7 * i) % n);
        }
        let b = uwls(&dataset(&shuffled)).unwrap();
        prop_assert!((a.mu_hat - b.mu_hat).abs() < 1e-12);
        prop_assert!((a.se_naive - b.se_naive).abs() < 1e-12);
        prop_assert!((a.se_cluster - b.se_cluster).abs() < 1e-12);
    }

    #[test]
    fn pooling_is_shift_equivariant(r in rows(), c in -5.0f64..5.0) {
        let a = uwls(&dataset(&r)).unwrap();
        let moved: Vec<_> = r.iter().map(|&(s, t, se)| (s, t + c, se)).collect();
        let b = uwls(&dataset(&moved)).unwrap();
        prop_assert!((b.mu_hat - a.mu_hat - c).abs() < 1e-9);
        prop_assert!((a.se_naive - b.se_naive).abs() < 1e-9);
        prop_assert!((a.se_cluster - b.se_cluster).abs() < 1e-9);
    }

    #[test]
    fn interval_masses_partition(mu in -3.0f64..3.0, tau in 0.0f64..2.0, se in 0.001f64..2.0, two in any::<bool>()) {
        let cuts: &[f64] = if two { &[0.05, 0.10] } else { &[0.05] };
        let p = interval_probabilities(mu, tau, se, cuts);
        prop_assert_eq!(p.len(), cuts.len() + 1);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalizer_lies_between_extreme_weights(mu in -2.0f64..2.0, tau in 0.0f64..1.0, se in 0.01f64..1.0, w1 in 0.01f64..1.0, f in 0.01f64..1.0) {
        let w = WeightFunction::new(vec![0.05, 0.10], vec![1.0, w1, w1 * f]).unwrap();
        let a = selection_normalizer(mu, tau, se, &w);
        prop_assert!(a >= w1 * f - 1e-15 && a <= 1.0 + 1e-15);
    }

    #[test]
    fn cutpoint_ties_go_to_the_significant_side(w1 in 0.01f64..1.0) {
        let w = WeightFunction::new(vec![0.05, 0.10], vec![1.0, w1, w1 / 2.0]).unwrap();
        prop_assert_eq!(w.interval_of(0.05), 0);
        prop_assert_eq!(w.interval_of(0.10), 1);
        prop_assert_eq!(w.interval_of(0.050000001), 1);
        prop_assert_eq!(w.omega_at(1.0), w1 / 2.0);
    }
}
