//! Occupancy metrics: per-class IoU / mIoU over semantic labels and the
//! binary occupied-vs-empty IoU, both driven by one confusion matrix.

use crate::parallel;
use crate::voxel::{LabelGrid, EMPTY_LABEL};

/// Square confusion matrix over `classes + 1` outcomes, empty last.
/// Indexed `[ground_truth][prediction]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        let k = classes + 1;
        Self {
            classes,
            counts: vec![0; k * k],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn outcome(&self, label: u8) -> usize {
        if label == EMPTY_LABEL {
            self.classes
        } else {
            label as usize
        }
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        let k = self.classes + 1;
        self.counts[gt * k + pred]
    }

    pub fn record(&mut self, gt: u8, pred: u8) {
        let k = self.classes + 1;
        let g = self.outcome(gt);
        let p = self.outcome(pred);
        self.counts[g * k + p] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "merge: class count mismatch");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn accumulate(&mut self, gt: &LabelGrid, pred: &LabelGrid) {
        assert_eq!(
            gt.spec.dims, pred.spec.dims,
            "accumulate: grid dimensions differ"
        );
        assert_eq!(gt.classes, self.classes, "accumulate: gt class count");
        assert_eq!(pred.classes, self.classes, "accumulate: pred class count");
        for (&g, &p) in gt.labels.iter().zip(&pred.labels) {
            self.record(g, p);
        }
    }

    /// Parallel accumulation: shard the voxel range, tally each shard
    /// independently, merge in shard order. Counts are integers so the
    /// result is identical for any worker count.
    pub fn from_grids(gt: &LabelGrid, pred: &LabelGrid, workers: usize) -> Self {
        const SHARD: usize = 4096;
        let classes = gt.classes;
        let n = gt.labels.len();
        let shards = n.div_ceil(SHARD).max(1);
        let parts = parallel::with_pool(workers, || {
            parallel::map_indexed(shards, |s| {
                let lo = s * SHARD;
                let hi = (lo + SHARD).min(n);
                let mut cm = ConfusionMatrix::new(classes);
                assert_eq!(gt.spec.dims, pred.spec.dims);
                for i in lo..hi {
                    cm.record(gt.labels[i], pred.labels[i]);
                }
                cm
            })
        });
        let mut out = ConfusionMatrix::new(classes);
        for part in &parts {
            out.merge(part);
        }
        out
    }

    /// IoU of one semantic class; `None` when the class appears in
    /// neither ground truth nor prediction.
    pub fn class_iou(&self, c: usize) -> Option<f64> {
        assert!(c < self.classes, "class_iou: {} out of range", c);
        let k = self.classes + 1;
        let tp = self.counts[c * k + c];
        let fp: u64 = (0..k).filter(|&g| g != c).map(|g| self.counts[g * k + c]).sum();
        let fung: u64 = (0..k).filter(|&p| p != c).map(|p| self.counts[c * k + p]).sum();
        let union = tp + fp + fung;
        if union == 0 {
            None
        } else {
            Some(tp as f64 / union as f64)
        }
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes).map(|c| self.class_iou(c)).collect()
    }

    /// Mean IoU over semantic classes, skipping classes absent from both
    /// grids. `None` when no semantic class is present anywhere.
    pub fn miou(&self) -> Option<f64> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            None
        } else {
            Some(ious.iter().sum::<f64>() / ious.len() as f64)
        }
    }

    /// Binary occupied-vs-empty IoU: all semantic classes merged into
    /// one occupied outcome. `None` when both grids are entirely empty.
    pub fn sc_iou(&self) -> Option<f64> {
        let k = self.classes + 1;
        let e = self.classes;
        let mut tp = 0;
        let mut fp = 0;
        let mut fng = 0;
        for g in 0..k {
            for p in 0..k {
                let c = self.counts[g * k + p];
                match (g == e, p == e) {
                    (false, false) => tp += c,
                    (true, false) => fp += c,
                    (false, true) => fng += c,
                    (true, true) => {}
                }
            }
        }
        let union = tp + fp + fng;
        if union == 0 {
            None
        } else {
            Some(tp as f64 / union as f64)
        }
    }
}

/// Complete evaluation of one predicted grid against ground truth.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub classes: usize,
    pub voxels: u64,
    pub sc_iou: Option<f64>,
    pub miou: Option<f64>,
    pub per_class: Vec<Option<f64>>,
}

impl EvalReport {
    pub fn from_grids(gt: &LabelGrid, pred: &LabelGrid, workers: usize) -> Self {
        let cm = ConfusionMatrix::from_grids(gt, pred, workers);
        Self {
            classes: cm.classes(),
            voxels: cm.total(),
            sc_iou: cm.sc_iou(),
            miou: cm.miou(),
            per_class: cm.per_class_iou(),
        }
    }

    /// Deterministic key=value rendering, one line per entry.
    pub fn render(&self) -> String {
        fn line(key: &str, v: Option<f64>) -> String {
            match v {
                Some(x) => format!("{key}={x:.6}\n"),
                None => format!("{key}=undefined\n"),
            }
        }
        let mut out = String::new();
        out.push_str(&format!("voxels={}\n", self.voxels));
        out.push_str(&format!("classes={}\n", self.classes));
        out.push_str(&line("sc_iou", self.sc_iou));
        out.push_str(&line("miou", self.miou));
        for (c, iou) in self.per_class.iter().enumerate() {
            out.push_str(&line(&format!("class_{c}_iou"), *iou));
        }
        out
    }
}
