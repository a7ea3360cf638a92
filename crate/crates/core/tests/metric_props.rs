use proptest::prelude::*;
use trupnet::metrics::{binary_counts, mask_metrics, metrics_from_counts, MetricReport};
use trupnet::Tensor;

fn mask(bits: &[bool]) -> Tensor {
    Tensor::new(vec![bits.len()], bits.iter().map(|&b| b as u8 as f32).collect()).unwrap()
}

proptest! {
    #[test]
    fn metrics_stay_in_unit_interval(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
        let m = metrics_from_counts(tp, fp, fn_);
        for v in m.as_array() {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
        prop_assert!(m.iou <= m.dice + 1e-12);
    }

    #[test]
    fn swapping_pred_and_gt_swaps_recall_and_precision(pairs in prop::collection::vec(any::<(bool, bool)>(), 1..200)) {
        let (p, g): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let a = mask_metrics(&mask(&p), &mask(&g)).unwrap();
        let b = mask_metrics(&mask(&g), &mask(&p)).unwrap();
        prop_assert!((a.dice - b.dice).abs() < 1e-12);
        prop_assert!((a.iou - b.iou).abs() < 1e-12);
        prop_assert!((a.recall - b.precision).abs() < 1e-12);
    }

    #[test]
    fn pixel_order_does_not_matter(pairs in prop::collection::vec(any::<(bool, bool)>(), 1..200), rot in 0usize..200) {
        let (p, g): (Vec<bool>, Vec<bool>) = pairs.iter().cloned().unzip();
        let k = rot % pairs.len();
        let (mut p2, mut g2) = (p.clone(), g.clone());
        p2.rotate_left(k);
        g2.rotate_left(k);
        prop_assert_eq!(binary_counts(&mask(&p), &mask(&g)).unwrap(), binary_counts(&mask(&p2), &mask(&g2)).unwrap());
    }

    #[test]
    fn aggregate_is_the_per_image_mean(counts in prop::collection::vec((0u64..50, 0u64..50, 0u64..50), 1..10)) {
        let per: Vec<_> = counts.iter().map(|&(a, b, c)| metrics_from_counts(a, b, c)).collect();
        let ids = (0..per.len()).map(|i| i.to_string()).collect();
        let report = MetricReport::new(ids, per.clone()).unwrap();
        let mean = per.iter().map(|m| m.dice).sum::<f64>() / per.len() as f64;
        prop_assert!((report.aggregate.dice - mean).abs() < 1e-12);
        prop_assert_eq!(report.to_csv().lines().count(), per.len() + 2);
    }
}

#[test]
fn empty_prediction_on_empty_mask_is_perfect() {
    let m = metrics_from_counts(0, 0, 0);
    assert!(m.as_array().iter().all(|&v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn soft_masks_are_rejected() {
    let soft = Tensor::new(vec![2], vec![0.5, 1.0]).unwrap();
    assert!(binary_counts(&soft, &mask(&[true, false])).is_err());
    assert!(binary_counts(&mask(&[true]), &mask(&[true, false])).is_err());
    assert!(MetricReport::new(vec![], vec![]).is_err());
}
