mod common;

use proptest::prelude::*;
use refseg_core::image::LabelMask;
use refseg_core::metrics::{self, MetricReport};

fn mask_strategy(n: usize, classes: u8) -> impl Strategy<Value = LabelMask> {
    any::<u64>().prop_map(move |s| common::random_mask(&mut common::rng(s), n, n, classes))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn hd95_matches_all_pairs(a in mask_strategy(24, 2), b in mask_strategy(24, 2)) {
        for c in 1..=2 {
            prop_assert_eq!(metrics::hd95(&a, &b, c).unwrap(), common::brute_hd95(&a, &b, c));
        }
    }

    #[test]
    fn dice_iou_relation(a in mask_strategy(20, 2), b in mask_strategy(20, 2)) {
        for c in 1..=2 {
            let d = metrics::dice(&a, &b, c).unwrap();
            let j = metrics::iou(&a, &b, c).unwrap();
            prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&d) && j <= d + 1e-15);
        }
    }

    #[test]
    fn metrics_are_symmetric(a in mask_strategy(16, 1), b in mask_strategy(16, 1)) {
        prop_assert_eq!(metrics::dice(&a, &b, 1).unwrap(), metrics::dice(&b, &a, 1).unwrap());
        prop_assert_eq!(metrics::hd95(&a, &b, 1).unwrap(), metrics::hd95(&b, &a, 1).unwrap());
    }

    #[test]
    fn self_comparison_is_perfect(a in mask_strategy(16, 2)) {
        for c in 1..=2 {
            prop_assert_eq!(metrics::dice(&a, &a, c).unwrap(), 1.0);
            let hd = metrics::hd95(&a, &a, c).unwrap();
            prop_assert!(hd.is_none() == (a.count(c) == 0));
            prop_assert!(hd.unwrap_or(0.0) == 0.0);
        }
    }

    #[test]
    fn exact_distance_transform(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let mut r = common::rng(seed);
        let seeds: Vec<bool> = (0..h * w).map(|_| rand::Rng::random_bool(&mut r, 0.15)).collect();
        prop_assume!(seeds.iter().any(|s| *s));
        let dt = metrics::squared_distance_transform(&seeds, h, w);
        for y in 0..h {
            for x in 0..w {
                let best = (0..h * w)
                    .filter(|i| seeds[*i])
                    .map(|i| {
                        let (dy, dx) = ((i / w) as f64 - y as f64, (i % w) as f64 - x as f64);
                        dy * dy + dx * dx
                    })
                    .fold(f64::INFINITY, f64::min);
                prop_assert_eq!(dt[y * w + x], best);
            }
        }
    }

    #[test]
    fn report_csv_round_trip(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let preds: Vec<LabelMask> = (0..4).map(|_| common::random_mask(&mut r, 16, 16, 2)).collect();
        let truths: Vec<LabelMask> = (0..4).map(|_| common::random_mask(&mut r, 16, 16, 2)).collect();
        let names = vec!["a".to_string(), "b".to_string()];
        let rep = metrics::evaluate(&preds, &truths, &names).unwrap();
        let text = rep.to_csv_string(Some("seed=1 config_hash=00")).unwrap();
        prop_assert_eq!(MetricReport::from_csv_str(&text).unwrap(), rep);
    }
}

#[test]
fn empty_conventions() {
    let empty = LabelMask::empty(8, 8, 1);
    let mut labels = vec![0u8; 64];
    labels[9] = 1;
    let one = LabelMask::new(8, 8, 1, labels).unwrap();
    assert_eq!(metrics::dice(&empty, &empty, 1).unwrap(), 1.0);
    assert_eq!(metrics::iou(&empty, &empty, 1).unwrap(), 1.0);
    assert_eq!(metrics::dice(&one, &empty, 1).unwrap(), 0.0);
    assert_eq!(metrics::hd95(&one, &empty, 1).unwrap(), None);
    assert_eq!(metrics::hd95(&empty, &empty, 1).unwrap(), None);
}

#[test]
fn known_shift_distance() {
    // Two 4x4 squares offset by 3 columns.
    let square = |x0: usize| {
        let mut l = vec![0u8; 16 * 16];
        for y in 4..8 {
            for x in x0..x0 + 4 {
                l[y * 16 + x] = 1;
            }
        }
        LabelMask::new(16, 16, 1, l).unwrap()
    };
    let (a, b) = (square(2), square(5));
    assert_eq!(metrics::hausdorff(&a, &b, 1).unwrap(), Some(3.0));
    assert_eq!(metrics::hd95(&a, &b, 1).unwrap(), common::brute_hd95(&a, &b, 1));
}

#[test]
fn truth_as_prediction_gives_unit_dice() {
    let mut r = common::rng(5);
    let truths: Vec<LabelMask> = (0..5).map(|_| common::random_mask(&mut r, 16, 16, 2)).collect();
    let rep = metrics::evaluate(&truths, &truths, &["x".into(), "y".into()]).unwrap();
    assert_eq!(rep.mean_dice, 1.0);
    assert!(rep.per_class.iter().all(|c| c.dice == 1.0 && c.iou == 1.0));
}

#[test]
fn mismatched_shapes_rejected() {
    let a = LabelMask::empty(8, 8, 1);
    let b = LabelMask::empty(8, 9, 1);
    assert!(metrics::dice(&a, &b, 1).is_err());
    assert!(metrics::hd95(&a, &b, 1).is_err());
    assert!(metrics::evaluate(&[a], &[], &["c".into()]).is_err());
}
