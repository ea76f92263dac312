//! Segmentation metrics over a ground-truth × prediction confusion matrix.

use std::fmt::Write as _;

use crate::cam::LabelGrid;
use crate::error::{arg, Result};

/// `(C+1)×(C+1)` pixel counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    /// A matrix over `classes` labels, background included.
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelGrid, gt: &LabelGrid) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return arg(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            ));
        }
        let k = self.classes;
        if let Some(bad) = pred.data.iter().chain(&gt.data).find(|&&v| v as usize >= k) {
            return arg(format!("label {bad} outside 0..{k}"));
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// Element-wise sum of two shards.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return arg("confusion matrices of different sizes");
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&g| g != c).map(|g| self.get(g, c)).sum()
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }

    /// Per-class IoU (None where the union is empty) and their mean. An
    /// all-zero matrix has no defined mean and reports 0.
    pub fn miou(&self) -> (Vec<Option<f64>>, Metric) {
        let ious: Vec<Option<f64>> = (0..self.classes)
            .map(|c| {
                let tp = self.true_positives(c);
                let union = tp + self.false_positives(c) + self.false_negatives(c);
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let defined: Vec<f64> = ious.iter().flatten().copied().collect();
        let mean = if defined.is_empty() {
            Metric::Undefined(0.0)
        } else {
            Metric::Value(defined.iter().sum::<f64>() / defined.len() as f64)
        };
        (ious, mean)
    }

    /// `FP/TP`; infinite when the class has no true positives.
    pub fn confusion_ratio(&self, c: usize) -> Metric {
        let (tp, fp) = (self.true_positives(c), self.false_positives(c));
        if tp == 0 {
            if fp == 0 {
                Metric::Undefined(0.0)
            } else {
                Metric::Undefined(f64::INFINITY)
            }
        } else {
            Metric::Value(fp as f64 / tp as f64)
        }
    }

    pub fn precision_recall(&self, c: usize) -> (Metric, Metric) {
        let tp = self.true_positives(c);
        let ratio = |den: u64| {
            if den == 0 {
                Metric::Undefined(0.0)
            } else {
                Metric::Value(tp as f64 / den as f64)
            }
        };
        (
            ratio(tp + self.false_positives(c)),
            ratio(tp + self.false_negatives(c)),
        )
    }

    pub fn report(&self) -> MetricsReport {
        let (ious, miou) = self.miou();
        let rows = (0..self.classes)
            .map(|c| {
                let (precision, recall) = self.precision_recall(c);
                ClassMetrics {
                    iou: ious[c],
                    precision,
                    recall,
                    confusion_ratio: self.confusion_ratio(c),
                }
            })
            .collect();
        MetricsReport { classes: rows, miou }
    }
}

/// A metric value, or a flagged placeholder where the formula is 0/0 or x/0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Metric {
    Value(f64),
    Undefined(f64),
}

impl Metric {
    pub fn value(self) -> f64 {
        match self {
            Metric::Value(v) | Metric::Undefined(v) => v,
        }
    }

    pub fn is_defined(self) -> bool {
        matches!(self, Metric::Value(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub iou: Option<f64>,
    pub precision: Metric,
    pub recall: Metric,
    pub confusion_ratio: Metric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Index 0 is background.
    pub classes: Vec<ClassMetrics>,
    pub miou: Metric,
}

impl MetricsReport {
    /// Mean of the defined foreground values of `f`.
    fn fg_mean(&self, f: impl Fn(&ClassMetrics) -> Metric) -> f64 {
        let vals: Vec<f64> = self.classes[1..]
            .iter()
            .map(&f)
            .filter(|m| m.is_defined())
            .map(Metric::value)
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    pub fn mean_fg_precision(&self) -> f64 {
        self.fg_mean(|c| c.precision)
    }

    pub fn mean_fg_recall(&self) -> f64 {
        self.fg_mean(|c| c.recall)
    }

    /// Average foreground FP/TP over classes where it is finite.
    pub fn mean_fg_confusion_ratio(&self) -> f64 {
        self.fg_mean(|c| c.confusion_ratio)
    }

    /// `class,iou,precision,recall,confusion_ratio` rows plus a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou,precision,recall,confusion_ratio\n");
        for (c, m) in self.classes.iter().enumerate() {
            let iou = m.iou.map_or_else(|| "nan".to_string(), fmt);
            let _ = writeln!(
                out,
                "{c},{iou},{},{},{}",
                fmt(m.precision.value()),
                fmt(m.recall.value()),
                fmt(m.confusion_ratio.value())
            );
        }
        let _ = writeln!(
            out,
            "mean,{},{},{},{}",
            fmt(self.miou.value()),
            fmt(self.mean_fg_precision()),
            fmt(self.mean_fg_recall()),
            fmt(self.mean_fg_confusion_ratio())
        );
        out
    }
}

fn fmt(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, d: &[u8]) -> LabelGrid {
        LabelGrid::new(h, w, d.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let g = grid(2, 2, &[0, 1, 2, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&g, &g).unwrap();
        assert_eq!(cm.get(1, 1), 2);
        assert_eq!(cm.false_positives(1), 0);
        assert_eq!(cm.miou().1, Metric::Value(1.0));
        assert_eq!(cm.precision_recall(2), (Metric::Value(1.0), Metric::Value(1.0)));
    }

    #[test]
    fn empty_grids_leave_matrix_unchanged() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&grid(0, 0, &[]), &grid(0, 0, &[])).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(2));
        assert_eq!(cm.miou().1, Metric::Undefined(0.0));
    }

    #[test]
    fn hand_counted_three_by_three() {
        let gt = grid(3, 3, &[0, 0, 1, 1, 1, 2, 2, 2, 0]);
        let pred = grid(3, 3, &[0, 1, 1, 1, 2, 2, 0, 2, 0]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &gt).unwrap();
        let want = [[2, 1, 0], [0, 2, 1], [1, 0, 2]];
        for (g, row) in want.iter().enumerate() {
            for (p, &v) in row.iter().enumerate() {
                assert_eq!(cm.get(g, p), v, "gt {g} pred {p}");
            }
        }
        assert_eq!(cm.total(), 9);
    }

    #[test]
    fn all_background_prediction_against_half_foreground() {
        let gt = grid(1, 4, &[0, 0, 1, 1]);
        let pred = grid(1, 4, &[0, 0, 0, 0]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt).unwrap();
        let (ious, miou) = cm.miou();
        assert_eq!(ious, vec![Some(0.5), Some(0.0)]);
        assert_eq!(miou, Metric::Value(0.25));
        let (p, r) = cm.precision_recall(1);
        assert_eq!(p, Metric::Undefined(0.0));
        assert_eq!(r, Metric::Value(0.0));
    }

    fn counts(tp: usize, fp: usize, fn_: usize) -> ConfusionMatrix {
        let mut gt = vec![1u8; tp];
        let mut pred = vec![1u8; tp];
        gt.extend(std::iter::repeat(0).take(fp));
        pred.extend(std::iter::repeat(1).take(fp));
        gt.extend(std::iter::repeat(1).take(fn_));
        pred.extend(std::iter::repeat(0).take(fn_));
        let n = gt.len();
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&grid(1, n, &pred), &grid(1, n, &gt)).unwrap();
        cm
    }

    #[test]
    fn hand_arithmetic() {
        let cm = counts(4, 2, 2);
        assert_eq!(cm.miou().0[1], Some(0.5));
        assert_eq!(cm.confusion_ratio(1), Metric::Value(0.5));
        let cm = counts(4, 2, 1);
        let (p, r) = cm.precision_recall(1);
        assert!((p.value() - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.value() - 0.8).abs() < 1e-15);
        assert_eq!(counts(3, 0, 1).confusion_ratio(1), Metric::Value(0.0));
        assert_eq!(counts(0, 2, 1).confusion_ratio(1), Metric::Undefined(f64::INFINITY));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&grid(1, 1, &[2]), &grid(1, 1, &[0])).is_err());
        assert!(cm.accumulate(&grid(1, 2, &[0, 0]), &grid(1, 1, &[0])).is_err());
    }

    #[test]
    fn csv_layout() {
        let csv = counts(4, 2, 2).report().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,iou,precision,recall,confusion_ratio");
        assert!(lines[2].starts_with("1,0.500000,"));
        assert!(lines[3].starts_with("mean,"));
        assert!(counts(0, 1, 1).report().to_csv().contains("inf"));
    }
}
