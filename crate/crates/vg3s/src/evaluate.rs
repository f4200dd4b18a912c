//! Frozen-model evaluation: forward pass without gradients, thresholded
//! labeling of the predicted distribution, and metric reporting against
//! the rasterized scene.

use crate::config::RunConfig;
use crate::metrics::EvalReport;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::tokens::TokenStack;
use crate::train::{forward_loss, grid_targets, Model};
use crate::voxel::{GridSpec, LabelGrid, EMPTY_LABEL};

/// Collapses a `[V, classes + 1]` outcome distribution (empty last) to
/// per-voxel labels: a voxel is occupied when its occupancy, one minus
/// the empty probability, strictly exceeds `threshold`; occupied voxels
/// take the most probable class, lowest index on ties.
pub fn distribution_to_labels(
    pred: &Tensor,
    grid: &GridSpec,
    classes: usize,
    threshold: f64,
) -> LabelGrid {
    let shape = pred.shape();
    assert_eq!(shape.len(), 2, "prediction must be [V, classes + 1]");
    assert_eq!(shape[1], classes + 1, "prediction outcome count");
    assert_eq!(shape[0], grid.num_voxels(), "prediction row count");
    let mut labels = vec![EMPTY_LABEL; shape[0]];
    for v in 0..shape[0] {
        let occupancy = 1.0 - pred.at2(v, classes);
        if occupancy > threshold {
            let mut best = 0;
            for c in 1..classes {
                if pred.at2(v, c) > pred.at2(v, best) {
                    best = c;
                }
            }
            labels[v] = best as u8;
        }
    }
    LabelGrid {
        spec: grid.clone(),
        classes,
        labels,
    }
}

pub struct Evaluation {
    pub report: EvalReport,
    pub predicted: LabelGrid,
    pub truth: LabelGrid,
    pub loss: f64,
}

/// Evaluates a model on the configured scene: same tokens as training,
/// dropout off, parameters frozen.
pub fn evaluate_model(model: &Model, tokens: &TokenStack) -> Evaluation {
    let cfg = &model.cfg;
    let grid = cfg.grid_spec();
    let truth = cfg.scene().rasterize(&grid, cfg.classes);
    let targets = grid_targets(&truth);
    let mut tape = Tape::new();
    let bound = model.store.bind_frozen(&mut tape);
    let art = forward_loss(&mut tape, model, &bound, tokens, &targets, 0, false);
    let predicted =
        distribution_to_labels(tape.value(art.prediction), &grid, cfg.classes, cfg.threshold);
    let workers = effective_workers(cfg);
    Evaluation {
        report: EvalReport::from_grids(&truth, &predicted, workers),
        predicted,
        truth,
        loss: tape.value(art.total).item(),
    }
}

/// Worker count for data-parallel sections; zero means every core.
pub fn effective_workers(cfg: &RunConfig) -> usize {
    if cfg.workers == 0 {
        crate::parallel::max_workers()
    } else {
        cfg.workers
    }
}
