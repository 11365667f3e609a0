//! Segmentation metrics and run reports.

use crate::error::{Error, Result};
use crate::losses::IGNORE_INDEX;
use crate::tensor::Scalar;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

/// Confusion counts indexed [ground truth, prediction]. Pixels labeled with
/// the ignore index never enter the matrix.
#[derive(Clone, Debug)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn update(&mut self, pred: &ArrayD<u8>, gt: &ArrayD<u8>) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::shape(format!(
                "prediction shape {:?} vs mask {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g == IGNORE_INDEX {
                continue;
            }
            if (g as usize) >= self.k || (p as usize) >= self.k {
                return Err(Error::index(format!("label out of range: pred {p}, gt {g}")));
            }
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.k)
            .map(|g| self.counts[g * self.k..(g + 1) * self.k].iter().sum())
            .collect()
    }

    /// IoU per class in percent; None when the class appears in neither
    /// prediction nor ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.counts[c * self.k + c];
                let row: u64 = self.counts[c * self.k..(c + 1) * self.k].iter().sum();
                let col: u64 = (0..self.k).map(|g| self.counts[g * self.k + c]).sum();
                let union = row + col - tp;
                if union == 0 {
                    None
                } else {
                    Some(100.0 * tp as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Mean IoU in percent over classes with non-empty union.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return 0.0;
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }

    /// Pixel accuracy in percent.
    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.k).map(|c| self.counts[c * self.k + c]).sum();
        100.0 * correct as f64 / total as f64
    }
}

/// Per-pixel argmax over the class axis of [B,K,H,W] logits.
pub fn argmax_classes<S: Scalar>(logits: &ArrayD<S>) -> ArrayD<u8> {
    let shape = logits.shape();
    let (b, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = ArrayD::<u8>::zeros(ndarray::IxDyn(&[b, h, w]));
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let mut best = 0usize;
                let mut best_v = logits[[bi, 0, hi, wi]];
                for c in 1..k {
                    let v = logits[[bi, c, hi, wi]];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                out[[bi, hi, wi]] = best as u8;
            }
        }
    }
    out
}

/// Nearest-neighbor mask downsample by an integer factor (top-left rule).
pub fn downsample_mask(mask: &ArrayD<u8>, factor: usize) -> ArrayD<u8> {
    let shape = mask.shape();
    let (b, h, w) = (shape[0], shape[1], shape[2]);
    ArrayD::from_shape_fn(ndarray::IxDyn(&[b, h / factor, w / factor]), |ix| {
        mask[[ix[0], ix[1] * factor, ix[2] * factor]]
    })
}

/// Loss components captured once per epoch.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub mse: f64,
    pub at: f64,
    pub ld: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct FinalMetrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pixel_accuracy: Option<f64>,
}

/// Everything a run writes to metrics.json. Wall-clock time is kept out of
/// the serialized form (a timing sidecar carries it) so reruns with the
/// same seed produce byte-identical reports.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub run_id: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub epoch_losses: Vec<EpochLoss>,
    pub final_metrics: FinalMetrics,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl MetricsReport {
    pub fn new(run_id: &str, seed: u64, config: serde_json::Value) -> Self {
        MetricsReport {
            run_id: run_id.to_string(),
            seed,
            config,
            epoch_losses: Vec::new(),
            final_metrics: FinalMetrics::default(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// losses.csv body: epoch plus one column per component.
    pub fn losses_csv(&self) -> String {
        let mut out = String::from("epoch,total,mse,at,ld\n");
        for e in &self.epoch_losses {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                e.epoch, e.total, e.mse, e.at, e.ld
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    /// Brute-force IoU from explicit pixel index sets.
    fn oracle_iou(pred: &ArrayD<u8>, gt: &ArrayD<u8>, class: u8) -> Option<f64> {
        let pset: Vec<usize> = pred
            .iter()
            .enumerate()
            .filter(|(i, &v)| v == class && gt.as_slice().unwrap()[*i] != IGNORE_INDEX)
            .map(|(i, _)| i)
            .collect();
        let gset: Vec<usize> = gt
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == class)
            .map(|(i, _)| i)
            .collect();
        let inter = pset.iter().filter(|i| gset.contains(i)).count();
        let union = pset.len() + gset.len() - inter;
        if union == 0 {
            None
        } else {
            Some(100.0 * inter as f64 / union as f64)
        }
    }

    #[test]
    fn iou_matches_set_oracle_on_toy_mask() {
        let gt = ArrayD::from_shape_vec(
            IxDyn(&[1, 4, 4]),
            vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 255, 255, 2, 2, 0, 0],
        )
        .unwrap()
        .mapv(|v: i32| v as u8);
        let pred = ArrayD::from_shape_vec(
            IxDyn(&[1, 4, 4]),
            vec![0, 1, 1, 1, 0, 0, 0, 1, 2, 0, 2, 2, 2, 2, 0, 1],
        )
        .unwrap()
        .mapv(|v: i32| v as u8);
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&pred, &gt).unwrap();
        for class in 0..3u8 {
            let got = cm.per_class_iou()[class as usize];
            let want = oracle_iou(&pred, &gt, class);
            match (got, want) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "class {class}: {a} vs {b}"),
                (None, None) => {}
                other => panic!("class {class}: {other:?}"),
            }
        }
        let sums = cm.row_sums();
        // Ground-truth pixel counts per class, ignore pixels excluded.
        assert_eq!(sums, vec![6, 4, 4]);
        assert!(cm.miou() > 0.0 && cm.miou() <= 100.0);
    }

    #[test]
    fn perfect_prediction_scores_100() {
        let gt = ArrayD::from_shape_fn(IxDyn(&[2, 4, 4]), |ix| (ix[1] % 3) as u8);
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&gt.clone(), &gt).unwrap();
        assert_eq!(cm.miou(), 100.0);
        assert_eq!(cm.pixel_accuracy(), 100.0);
    }

    #[test]
    fn absent_class_is_excluded_not_zero() {
        // Class 2 never appears in gt or pred: mIoU averages 2 classes.
        let gt = ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![0u8, 0, 1, 1]).unwrap();
        let pred = ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![0u8, 1, 1, 1]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&pred, &gt).unwrap();
        let ious = cm.per_class_iou();
        assert!(ious[2].is_none());
        let want = (100.0 / 2.0 + 100.0 * 2.0 / 3.0) / 2.0;
        assert!((cm.miou() - want).abs() < 1e-12);
    }

    #[test]
    fn argmax_and_mask_downsample() {
        let mut logits = ArrayD::<f32>::zeros(IxDyn(&[1, 3, 2, 2]));
        logits[[0, 2, 0, 0]] = 1.0;
        logits[[0, 1, 1, 1]] = 2.0;
        let pred = argmax_classes(&logits);
        assert_eq!(pred[[0, 0, 0]], 2);
        assert_eq!(pred[[0, 1, 1]], 1);
        assert_eq!(pred[[0, 0, 1]], 0);
        let mask = ArrayD::from_shape_fn(IxDyn(&[1, 8, 8]), |ix| (ix[1] / 4) as u8);
        let small = downsample_mask(&mask, 4);
        assert_eq!(small.shape(), &[1, 2, 2]);
        assert_eq!(small[[0, 0, 0]], 0);
        assert_eq!(small[[0, 1, 0]], 1);
    }

    #[test]
    fn rejects_bad_labels_and_shapes() {
        let gt = ArrayD::from_elem(IxDyn(&[1, 2, 2]), 7u8);
        let pred = ArrayD::zeros(IxDyn(&[1, 2, 2]));
        let mut cm = ConfusionMatrix::new(3);
        assert!(matches!(cm.update(&pred, &gt), Err(Error::Index(_))));
        let wrong = ArrayD::zeros(IxDyn(&[1, 2, 3]));
        assert!(matches!(cm.update(&wrong, &gt), Err(Error::Shape(_))));
    }

    #[test]
    fn metrics_json_is_deterministic() {
        let mut r = MetricsReport::new("run-a", 7, serde_json::json!({"k": 5}));
        r.epoch_losses.push(EpochLoss { epoch: 0, total: 1.5, mse: 1.0, at: 0.05, ld: 0.0 });
        r.final_metrics.miou = Some(42.25);
        r.wall_clock_seconds = 123.0;
        let a = r.to_json();
        r.wall_clock_seconds = 456.0;
        let b = r.to_json();
        assert_eq!(a, b, "wall clock must not leak into metrics.json");
        assert!(r.losses_csv().starts_with("epoch,total,mse,at,ld\n"));
        let parsed: MetricsReport = serde_json::from_str(&a).unwrap();
        assert_eq!(parsed.epoch_losses, r.epoch_losses);
    }
}
