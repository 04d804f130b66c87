//! Seed-mask evaluation against ground truth.
//!
//! Confusion counts are kept per label (background plus every class).
//! Ground-truth pixels labelled 255 are ignored. FP and FN are reported as
//! percentages of each class's `TP + FP + FN`, so per class
//! `IoU + FP + FN = 100`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{LabelRaster, IGNORE_LABEL};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionAccumulator {
    /// An empty accumulator for `num_classes` foreground classes plus background.
    pub fn new(num_classes: usize) -> Self {
        let n = num_classes + 1;
        Self {
            tp: vec![0; n],
            fp: vec![0; n],
            fn_: vec![0; n],
        }
    }

    pub fn num_labels(&self) -> usize {
        self.tp.len()
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.num_labels() != self.num_labels() {
            return Err(Error::Dimension(format!(
                "cannot merge accumulators over {} and {} labels",
                self.num_labels(),
                other.num_labels()
            )));
        }
        for i in 0..self.num_labels() {
            self.tp[i] += other.tp[i];
            self.fp[i] += other.fp[i];
            self.fn_[i] += other.fn_[i];
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.tp.iter().chain(&self.fp).chain(&self.fn_).all(|&c| c == 0)
    }
}

/// Confusion counts of one prediction against its ground truth.
pub fn accumulate(pred: &LabelRaster, gt: &LabelRaster, num_classes: usize) -> Result<ConfusionAccumulator> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Dimension(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut acc = ConfusionAccumulator::new(num_classes);
    for (&p, &g) in pred.values.iter().zip(&gt.values) {
        if g == IGNORE_LABEL {
            continue;
        }
        let (p, g) = (p as usize, g as usize);
        if g > num_classes {
            return Err(Error::InvalidParameter(format!(
                "ground-truth label {g} exceeds {num_classes} classes"
            )));
        }
        if p > num_classes {
            return Err(Error::InvalidParameter(format!(
                "predicted label {p} exceeds {num_classes} classes"
            )));
        }
        if p == g {
            acc.tp[g] += 1;
        } else {
            acc.fp[p] += 1;
            acc.fn_[g] += 1;
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: usize,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// `None` where the denominator is empty.
    pub iou: Option<f64>,
    pub fp_rate: Option<f64>,
    pub fn_rate: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Dataset-level metrics, all in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub fp: f64,
    pub fn_: f64,
    pub precision: f64,
    pub recall: f64,
    pub per_label: Vec<LabelMetrics>,
}

fn pct(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn finalize(acc: &ConfusionAccumulator) -> Result<MetricsReport> {
    if acc.is_empty() {
        return Err(Error::EmptyMetrics("no pixels were accumulated".into()));
    }
    let per_label: Vec<LabelMetrics> = (0..acc.num_labels())
        .map(|c| {
            let (tp, fp, fn_) = (acc.tp[c], acc.fp[c], acc.fn_[c]);
            let union = tp + fp + fn_;
            LabelMetrics {
                label: c,
                tp,
                fp,
                fn_,
                iou: pct(tp, union),
                fp_rate: pct(fp, union),
                fn_rate: pct(fn_, union),
                precision: pct(tp, tp + fp),
                recall: pct(tp, tp + fn_),
            }
        })
        .collect();
    Ok(MetricsReport {
        miou: mean(per_label.iter().map(|m| m.iou)),
        fp: mean(per_label.iter().map(|m| m.fp_rate)),
        fn_: mean(per_label.iter().map(|m| m.fn_rate)),
        precision: mean(per_label.iter().map(|m| m.precision)),
        recall: mean(per_label.iter().map(|m| m.recall)),
        per_label,
    })
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
        writeln!(
            f,
            "{:>6} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "label", "IoU", "FP", "FN", "Prec.", "Recall"
        )?;
        for m in &self.per_label {
            writeln!(
                f,
                "{:>6} {:>7} {:>7} {:>7} {:>7} {:>7}",
                m.label,
                cell(m.iou),
                cell(m.fp_rate),
                cell(m.fn_rate),
                cell(m.precision),
                cell(m.recall)
            )?;
        }
        write!(
            f,
            "{:>6} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>7.1}",
            "mean", self.miou, self.fp, self.fn_, self.precision, self.recall
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raster(h: usize, w: usize, v: Vec<u8>) -> LabelRaster {
        LabelRaster::new(h, w, v).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = raster(2, 3, vec![0, 1, 1, 2, 0, 255]);
        let acc = accumulate(&gt, &gt, 2).unwrap();
        assert!(acc.fp.iter().chain(&acc.fn_).all(|&c| c == 0));
        let r = finalize(&acc).unwrap();
        assert_eq!(r.miou, 100.0);
        assert_eq!(r.fp, 0.0);
        assert_eq!(r.fn_, 0.0);
    }

    #[test]
    fn total_miss() {
        let acc = accumulate(&raster(2, 2, vec![0; 4]), &raster(2, 2, vec![1; 4]), 1).unwrap();
        assert_eq!(acc.fn_[1], 4);
        assert_eq!(acc.tp[1], 0);
    }

    #[test]
    fn hand_built_four_by_four_matches_manual_tally() {
        #[rustfmt::skip]
        let pred = vec![
            0, 0, 1, 1,
            0, 1, 1, 2,
            2, 2, 0, 0,
            1, 0, 2, 2,
        ];
        #[rustfmt::skip]
        let gt = vec![
            0, 1, 1, 1,
            0, 1, 255, 2,
            2, 0, 0, 255,
            1, 1, 2, 0,
        ];
        let acc = accumulate(&raster(4, 4, pred.clone()), &raster(4, 4, gt.clone()), 2).unwrap();
        // tally by hand, row by row (p, g):
        // r0: (0,0)tp0 (0,1)fp0 fn1 (1,1)tp1 (1,1)tp1
        // r1: (0,0)tp0 (1,1)tp1 ignore     (2,2)tp2
        // r2: (2,2)tp2 (2,0)fp2 fn0 (0,0)tp0 ignore
        // r3: (1,1)tp1 (0,1)fp0 fn1 (2,2)tp2 (2,0)fp2 fn0
        assert_eq!(acc.tp, vec![3, 4, 3]);
        assert_eq!(acc.fp, vec![2, 0, 2]);
        assert_eq!(acc.fn_, vec![2, 2, 0]);
    }

    #[test]
    fn closed_form_fractions() {
        let acc = ConfusionAccumulator {
            tp: vec![0, 1],
            fp: vec![0, 1],
            fn_: vec![0, 2],
        };
        let r = finalize(&acc).unwrap();
        let m = &r.per_label[1];
        assert_eq!(m.iou, Some(25.0));
        assert_eq!(m.precision, Some(50.0));
        assert!((m.recall.unwrap() - 100.0 / 3.0).abs() < 1e-9);
        // background has an empty denominator and is left out of every mean
        assert_eq!(r.per_label[0].iou, None);
        assert_eq!(r.miou, 25.0);
    }

    #[test]
    fn empty_accumulator_is_an_error() {
        assert!(finalize(&ConfusionAccumulator::new(3)).is_err());
        let all_ignored = accumulate(&raster(1, 2, vec![0, 1]), &raster(1, 2, vec![255, 255]), 1).unwrap();
        assert!(finalize(&all_ignored).is_err());
    }

    #[test]
    fn rejects_bad_shapes_and_labels() {
        assert!(accumulate(&raster(1, 2, vec![0, 0]), &raster(2, 1, vec![0, 0]), 1).is_err());
        assert!(accumulate(&raster(1, 1, vec![3]), &raster(1, 1, vec![0]), 1).is_err());
        assert!(accumulate(&raster(1, 1, vec![0]), &raster(1, 1, vec![7]), 1).is_err());
    }

    #[test]
    fn report_renders_a_table() {
        let gt = raster(1, 2, vec![0, 1]);
        let text = finalize(&accumulate(&gt, &gt, 1).unwrap()).unwrap().to_string();
        assert!(text.contains("mean"));
        assert!(text.contains("100.0"));
    }

    fn masks() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (
            proptest::collection::vec(0u8..4, 36),
            proptest::collection::vec(prop_oneof![0u8..4, Just(255u8)], 36),
        )
    }

    proptest! {
        #[test]
        fn per_class_rates_sum_to_one_hundred((pred, gt) in masks()) {
            let acc = accumulate(&raster(6, 6, pred), &raster(6, 6, gt), 3).unwrap();
            if let Ok(r) = finalize(&acc) {
                for m in &r.per_label {
                    if let (Some(i), Some(p), Some(n)) = (m.iou, m.fp_rate, m.fn_rate) {
                        prop_assert!((i + p + n - 100.0).abs() < 1e-6);
                    }
                }
                for v in [r.miou, r.precision, r.recall] {
                    prop_assert!((0.0..=100.0).contains(&v));
                }
            }
        }

        #[test]
        fn accumulation_is_additive_and_order_free(
            (p1, g1) in masks(),
            (p2, g2) in masks(),
        ) {
            let a = accumulate(&raster(6, 6, p1.clone()), &raster(6, 6, g1.clone()), 3).unwrap();
            let b = accumulate(&raster(6, 6, p2.clone()), &raster(6, 6, g2.clone()), 3).unwrap();
            let mut ab = a.clone();
            ab.merge(&b).unwrap();
            let mut ba = b.clone();
            ba.merge(&a).unwrap();
            prop_assert_eq!(&ab, &ba);
            let joint = accumulate(
                &raster(12, 6, [p1, p2].concat()),
                &raster(12, 6, [g1, g2].concat()),
                3,
            ).unwrap();
            prop_assert_eq!(ab, joint);
        }

        #[test]
        fn self_comparison_is_perfect(mask in proptest::collection::vec(0u8..4, 16)) {
            let m = raster(4, 4, mask);
            let r = finalize(&accumulate(&m, &m, 3).unwrap()).unwrap();
            prop_assert_eq!(r.miou, 100.0);
            prop_assert_eq!(r.fp, 0.0);
            prop_assert_eq!(r.fn_, 0.0);
        }
    }
}
