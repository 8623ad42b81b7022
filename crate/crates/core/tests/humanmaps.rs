mod common;

use common::{fixture, golden_mismatches};

use ndarray::Array2;
use proptest::prelude::*;
use seco_core::evaluation::rmse;
use seco_core::humanmaps::{clicks_to_map, read_logs, validate_log, Click, ClickLog, HumanMapConfig};

#[test]
fn fixture_logs_are_valid() {
    let logs = read_logs(&fixture("clicks_30.jsonl")).unwrap();
    assert_eq!(logs.len(), 3);
    assert_eq!(logs.iter().map(|l| l.clicks.len()).sum::<usize>(), 30);
    for log in &logs {
        assert!(validate_log(log).is_empty());
    }
}

#[test]
fn golden_map_is_bit_exact() {
    assert_eq!(golden_mismatches(), 0);
}

#[test]
fn rmse_extremes_are_exact() {
    let ones = Array2::<f64>::ones((224, 224));
    let zeros = Array2::<f64>::zeros((224, 224));
    assert_eq!(rmse(ones.view(), ones.view()).unwrap(), 0.0);
    assert_eq!(rmse(zeros.view(), ones.view()).unwrap(), 1.0);
}

fn log_from(points: &[(i64, i64)]) -> ClickLog {
    ClickLog {
        image_id: 1,
        target_class: "cup".into(),
        subject_id: "p".into(),
        image_size: [800, 800],
        clicks: points.iter().map(|&(x, y)| Click { x, y, t_ms: 0 }).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn map_ignores_click_order(
        points in proptest::collection::btree_set((0i64..800, 0i64..800), 10),
        shift in 1usize..10,
    ) {
        let points: Vec<_> = points.into_iter().collect();
        let mut rotated = points.clone();
        rotated.rotate_left(shift);
        let cfg = HumanMapConfig::default();
        let a = clicks_to_map(&[log_from(&points)], &cfg).unwrap();
        let b = clicks_to_map(&[log_from(&rotated)], &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn maps_span_unit_interval(points in proptest::collection::btree_set((0i64..800, 0i64..800), 10)) {
        let points: Vec<_> = points.into_iter().collect();
        let m = clicks_to_map(&[log_from(&points)], &HumanMapConfig::default()).unwrap();
        let lo = m.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(lo, 0.0);
        prop_assert_eq!(hi, 1.0);
    }

    #[test]
    fn rmse_is_a_metric(a in proptest::collection::vec(0.0f64..1.0, 16), b in proptest::collection::vec(0.0f64..1.0, 16), c in proptest::collection::vec(0.0f64..1.0, 16)) {
        let (a, b, c) = (
            Array2::from_shape_vec((4, 4), a).unwrap(),
            Array2::from_shape_vec((4, 4), b).unwrap(),
            Array2::from_shape_vec((4, 4), c).unwrap(),
        );
        let ab = rmse(a.view(), b.view()).unwrap();
        prop_assert_eq!(ab, rmse(b.view(), a.view()).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!(ab <= rmse(a.view(), c.view()).unwrap() + rmse(c.view(), b.view()).unwrap() + 1e-12);
    }
}
