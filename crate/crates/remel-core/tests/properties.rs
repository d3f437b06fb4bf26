//! Property tests for the data layer.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use remel_core::dataset::{
    load_csv_str, to_csv_string, ColumnLayout, LongitudinalDataset, SubjectRecord,
};

fn arbitrary_dataset() -> impl Strategy<Value = LongitudinalDataset> {
    let value = -1e6f64..1e6f64;
    (2usize..6, 1usize..5, 2usize..4).prop_flat_map(move |(n, m, k)| {
        let subject = (
            proptest::collection::vec(value.clone(), m),
            proptest::collection::vec(value.clone(), m),
            proptest::collection::vec(proptest::collection::vec(value.clone(), m), k),
        );
        proptest::collection::vec(subject, n).prop_map(move |subjects| {
            let layout = ColumnLayout::new(vec!["x2".into()], vec!["w1".into()], false).unwrap();
            let records = subjects
                .into_iter()
                .enumerate()
                .map(|(i, (y, x2, reps))| SubjectRecord {
                    subject_id: format!("s{i}"),
                    y: DVector::from_vec(y),
                    x_exact: DMatrix::from_vec(m, 1, x2),
                    w_reps: reps
                        .into_iter()
                        .map(|w| DMatrix::from_vec(m, 1, w))
                        .collect(),
                })
                .collect();
            LongitudinalDataset::new(records, layout).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_preserves_values(ds in arbitrary_dataset()) {
        let text = to_csv_string(&ds);
        let back = load_csv_str(&text, ds.layout()).unwrap();
        prop_assert_eq!(ds.n(), back.n());
        for (a, b) in ds.subjects().iter().zip(back.subjects()) {
            prop_assert!((&a.y - &b.y).amax() <= 1e-12 * (1.0 + a.y.amax()));
            prop_assert!((&a.x_exact - &b.x_exact).amax() <= 1e-12 * (1.0 + a.x_exact.amax()));
            for (wa, wb) in a.w_reps.iter().zip(&b.w_reps) {
                prop_assert!((wa - wb).amax() <= 1e-12 * (1.0 + wa.amax()));
            }
        }
    }

    #[test]
    fn centered_differences_sum_to_zero(ds in arbitrary_dataset()) {
        let k = ds.replicate_count();
        let per_rep: Vec<Vec<f64>> = (1..=k)
            .map(|r| ds.replicate_centered_difference("w1", r).unwrap())
            .collect();
        for obs in 0..per_rep[0].len() {
            let total: f64 = per_rep.iter().map(|v| v[obs]).sum();
            let scale: f64 = per_rep.iter().map(|v| v[obs].abs()).sum::<f64>().max(1.0);
            prop_assert!(total.abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn centering_is_idempotent(ds in arbitrary_dataset()) {
        let once = ds.center_columns(&["w1", "x2"]).unwrap();
        let twice = once.center_columns(&["w1", "x2"]).unwrap();
        for (a, b) in once.subjects().iter().zip(twice.subjects()) {
            prop_assert!((&a.x_exact - &b.x_exact).amax() <= 1e-9);
            for (wa, wb) in a.w_reps.iter().zip(&b.w_reps) {
                prop_assert!((wa - wb).amax() <= 1e-9);
            }
        }
    }
}
