//! Training objective: weighted cross-entropy plus the Lovász-Softmax
//! relaxation of the Jaccard loss, both over per-voxel distributions that
//! already include the empty outcome as the final column.

use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Probabilities are clamped to at least this inside the log.
pub const CE_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct LossConfig {
    pub ce_weight: f64,
    pub lovasz_weight: f64,
    /// Optional per-outcome rescaling of the cross-entropy (length
    /// `classes + 1`, empty last).
    pub class_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ce_weight: 1.0,
            lovasz_weight: 1.0,
            class_weights: None,
        }
    }
}

impl Tape {
    /// Mean negative log-likelihood of the target outcome under `pred`
    /// (`[V, K]` of probabilities, not logits). With class weights the
    /// mean is weighted by the target's weight.
    pub fn cross_entropy(
        &mut self,
        pred: TensorId,
        targets: &[usize],
        class_weights: Option<&[f64]>,
    ) -> TensorId {
        let (v, k) = {
            let s = self.value(pred).shape();
            assert_eq!(s.len(), 2, "cross_entropy: pred must be [V, K]");
            (s[0], s[1])
        };
        assert_eq!(targets.len(), v, "cross_entropy: target count != rows");
        assert!(
            targets.iter().all(|&t| t < k),
            "cross_entropy: target outside 0..{}",
            k
        );
        if let Some(w) = class_weights {
            assert_eq!(w.len(), k, "cross_entropy: weight count != outcomes");
            assert!(w.iter().all(|&x| x >= 0.0), "cross_entropy: negative weight");
        }
        let targets = targets.to_vec();
        let weights: Option<Vec<f64>> = class_weights.map(|w| w.to_vec());
        let weight_of = move |t: usize, w: &Option<Vec<f64>>| w.as_ref().map_or(1.0, |w| w[t]);
        let mut total_w = 0.0;
        let mut total = 0.0;
        for (row, &t) in targets.iter().enumerate() {
            let p = self.value(pred).at2(row, t).max(CE_EPS);
            let w = weight_of(t, &weights);
            total -= w * p.ln();
            total_w += w;
        }
        assert!(total_w > 0.0, "cross_entropy: all target weights are zero");
        let value = Tensor::scalar(total / total_w);
        self.push_op("cross_entropy", value, vec![pred], move |tape, up| {
            let g = up.item();
            let mut grad = vec![0.0; v * k];
            for (row, &t) in targets.iter().enumerate() {
                let p = tape.value(pred).at2(row, t);
                if p > CE_EPS {
                    grad[row * k + t] = -g * weight_of(t, &weights) / (p * total_w);
                }
            }
            vec![Tensor::new(vec![v, k], grad)]
        })
    }

    /// Lovász-Softmax: for each class present in the targets, sort the
    /// absolute errors descending and weight them by the discrete
    /// gradient of the Jaccard index along that order; average over the
    /// present classes. Piecewise linear in `pred`, and equal to
    /// 1 - Jaccard at integral predictions.
    pub fn lovasz_softmax(&mut self, pred: TensorId, targets: &[usize]) -> TensorId {
        let (v, k) = {
            let s = self.value(pred).shape();
            assert_eq!(s.len(), 2, "lovasz_softmax: pred must be [V, K]");
            (s[0], s[1])
        };
        assert_eq!(targets.len(), v, "lovasz_softmax: target count != rows");
        assert!(
            targets.iter().all(|&t| t < k),
            "lovasz_softmax: target outside 0..{}",
            k
        );
        let mut present: Vec<usize> = targets.to_vec();
        present.sort_unstable();
        present.dedup();
        let targets = targets.to_vec();

        // forward pass also fixes the per-class orderings used by the VJP
        let mut total = 0.0;
        // (class, ordered voxel ids, jaccard-difference weights)
        let mut plan: Vec<(usize, Vec<usize>, Vec<f64>)> = Vec::with_capacity(present.len());
        for &c in &present {
            let errors: Vec<f64> = (0..v)
                .map(|row| {
                    let fg = if targets[row] == c { 1.0 } else { 0.0 };
                    (fg - self.value(pred).at2(row, c)).abs()
                })
                .collect();
            let mut order: Vec<usize> = (0..v).collect();
            // descending by error; ties broken by voxel id for determinism
            order.sort_by(|&a, &b| {
                errors[b]
                    .partial_cmp(&errors[a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let gts = targets.iter().filter(|&&t| t == c).count() as f64;
            let mut inter = gts;
            let mut union = gts;
            let mut prev_jaccard = 0.0;
            let mut weights = Vec::with_capacity(v);
            let mut loss_c = 0.0;
            for &row in &order {
                if targets[row] == c {
                    inter -= 1.0;
                } else {
                    union += 1.0;
                }
                let jaccard = 1.0 - inter / union;
                let w = jaccard - prev_jaccard;
                prev_jaccard = jaccard;
                loss_c += errors[row] * w;
                weights.push(w);
            }
            total += loss_c;
            plan.push((c, order, weights));
        }
        let scale = 1.0 / present.len() as f64;
        let value = Tensor::scalar(total * scale);
        self.push_op("lovasz_softmax", value, vec![pred], move |tape, up| {
            let g = up.item() * scale;
            let mut grad = vec![0.0; v * k];
            for (c, order, weights) in &plan {
                for (rank, &row) in order.iter().enumerate() {
                    let fg = if targets[row] == *c { 1.0 } else { 0.0 };
                    let p = tape.value(pred).at2(row, *c);
                    // d|fg - p|/dp
                    let sign = if p > fg {
                        1.0
                    } else if p < fg {
                        -1.0
                    } else {
                        0.0
                    };
                    grad[row * k + c] += g * weights[rank] * sign;
                }
            }
            vec![Tensor::new(vec![v, k], grad)]
        })
    }

    /// Combined objective. Returns (total, cross-entropy, lovasz) ids.
    pub fn total_loss(
        &mut self,
        pred: TensorId,
        targets: &[usize],
        cfg: &LossConfig,
    ) -> (TensorId, TensorId, TensorId) {
        let ce = self.cross_entropy(pred, targets, cfg.class_weights.as_deref());
        let lov = self.lovasz_softmax(pred, targets);
        let ce_term = self.scale(ce, cfg.ce_weight);
        let lov_term = self.scale(lov, cfg.lovasz_weight);
        let total = self.add(ce_term, lov_term);
        (total, ce, lov)
    }
}
