use more_core::cam::LabelGrid;
use more_core::metrics::ConfusionMatrix;
use proptest::prelude::*;
use std::collections::HashSet;

fn grid_pair(max_label: u8) -> impl Strategy<Value = (LabelGrid, LabelGrid)> {
    (1usize..=16, 1usize..=16).prop_flat_map(move |(h, w)| {
        (
            proptest::collection::vec(0..=max_label, h * w),
            proptest::collection::vec(0..=max_label, h * w),
        )
            .prop_map(move |(a, b)| (LabelGrid::new(h, w, a).unwrap(), LabelGrid::new(h, w, b).unwrap()))
    })
}

/// Pixel sets per class, intersected and unioned directly.
fn set_oracle_miou(pred: &LabelGrid, gt: &LabelGrid, classes: u8) -> f64 {
    let mut ious = Vec::new();
    for c in 0..classes {
        let p: HashSet<usize> = (0..pred.len()).filter(|&i| pred.data[i] == c).collect();
        let g: HashSet<usize> = (0..gt.len()).filter(|&i| gt.data[i] == c).collect();
        let union = p.union(&g).count();
        if union > 0 {
            ious.push(p.intersection(&g).count() as f64 / union as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

proptest! {
    #[test]
    fn miou_matches_set_oracle((pred, gt) in grid_pair(3)) {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&pred, &gt).unwrap();
        prop_assert_eq!(cm.total() as usize, pred.len());
        let got = cm.miou().1.value();
        prop_assert!((got - set_oracle_miou(&pred, &gt, 4)).abs() < 1e-12);
    }

    #[test]
    fn accumulation_order_is_irrelevant(batches in proptest::collection::vec(grid_pair(2), 1..6), rot in 0usize..6) {
        let mut fwd = ConfusionMatrix::new(3);
        for (p, g) in &batches {
            fwd.accumulate(p, g).unwrap();
        }
        let mut shuffled = batches.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let mut other = ConfusionMatrix::new(3);
        for (p, g) in &shuffled {
            other.accumulate(p, g).unwrap();
        }
        prop_assert_eq!(&fwd, &other);

        let (left, right) = batches.split_at(batches.len() / 2);
        let mut a = ConfusionMatrix::new(3);
        let mut b = ConfusionMatrix::new(3);
        left.iter().for_each(|(p, g)| a.accumulate(p, g).unwrap());
        right.iter().for_each(|(p, g)| b.accumulate(p, g).unwrap());
        a.merge(&b).unwrap();
        prop_assert_eq!(&fwd, &a);
    }

    #[test]
    fn fixing_a_false_positive_lowers_the_ratio((pred, gt) in grid_pair(2), class in 1u8..=2) {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &gt).unwrap();
        let fp = (0..pred.len()).find(|&i| pred.data[i] == class && gt.data[i] != class);
        prop_assume!(fp.is_some());
        let before = cm.confusion_ratio(class as usize).value();
        // relabel the ground truth so the pixel becomes a true positive
        let mut gt2 = gt.clone();
        gt2.data[fp.unwrap()] = class;
        let mut cm2 = ConfusionMatrix::new(3);
        cm2.accumulate(&pred, &gt2).unwrap();
        let after = cm2.confusion_ratio(class as usize).value();
        prop_assert!(after < before, "{} -> {}", before, after);
    }
}
