//! End-to-end gate for the whole pipeline. Each test prints a single
//! verdict line so a full run reads as a checklist; the heavy ones
//! also enforce their wall-clock budgets.

use std::time::Instant;

use vg3s::config::RunConfig;
use vg3s::evaluate::evaluate_model;
use vg3s::hgfa::{init_hgfa_params, lsfp_spatial_block, tatr_refine, HgfaConfig};
use vg3s::metrics::ConfusionMatrix;
use vg3s::parallel;
use vg3s::params::ParamStore;
use vg3s::selftest;
use vg3s::tape::Tape;
use vg3s::tensor::Tensor;
use vg3s::tokens::generate_synthetic_tokens;
use vg3s::train::{grid_targets, TrainSession};
use vg3s::voxel::{GridSpec, LabelGrid};

fn verdict(name: &str, result: Result<String, String>) {
    match result {
        Ok(detail) => println!("pass {name}: {detail}"),
        Err(detail) => panic!("FAIL {name}: {detail}"),
    }
}

fn within(start: Instant, budget_s: u64, detail: String) -> Result<String, String> {
    let took = start.elapsed();
    if took.as_secs() >= budget_s {
        return Err(format!(
            "{} (took {:.1} s, budget {} s)",
            detail,
            took.as_secs_f64(),
            budget_s
        ));
    }
    Ok(format!("{} in {:.1} s", detail, took.as_secs_f64()))
}

#[test]
fn gradient_fidelity() {
    let start = Instant::now();
    let r = selftest::gradient_fidelity().and_then(|d| within(start, 120, d));
    verdict("gradient fidelity", r);
}

#[test]
fn fusion_weights_normalized() {
    verdict("fusion weight normalization", selftest::fusion_weight_sums());
}

#[test]
fn pyramid_shape_law() {
    verdict("pyramid shape law", selftest::pyramid_shape_law());
}

#[test]
fn splat_matches_oracle() {
    let start = Instant::now();
    let r = selftest::splat_oracle_agreement().and_then(|d| within(start, 60, d));
    verdict("splat oracle agreement", r);
}

#[test]
fn lovasz_equals_jaccard_at_vertices() {
    verdict("lovasz at hypercube vertices", selftest::lovasz_jaccard_vertices());
}

#[test]
fn metric_arithmetic() {
    verdict("metric arithmetic", selftest::metric_arithmetic());
}

/// Full training run on the bundled scene: must overfit past fixed IoU
/// floors inside ten minutes, and a second run from the same config and
/// seed must match step for step and byte for byte.
#[test]
fn toy_scene_overfit() {
    let text = include_str!("../../../configs/desk.cfg");
    let run = || -> Result<(TrainSession, Vec<String>, Vec<u8>), String> {
        let cfg = RunConfig::from_text(text)?;
        cfg.validate()?;
        let tokens = generate_synthetic_tokens(
            &cfg.scene(),
            &cfg.rig(),
            &cfg.grid_spec(),
            &cfg.token_config(),
            cfg.classes,
            cfg.run_seed,
        );
        let targets = grid_targets(&cfg.scene().rasterize(&cfg.grid_spec(), cfg.classes));
        let mut lines = Vec::new();
        let mut session = TrainSession::new(&cfg);
        session.run(&tokens, &targets, None, &mut |l| lines.push(l.to_string()))?;
        let path = std::env::temp_dir().join(format!(
            "vg3s-overfit-{}-{}.ck",
            std::process::id(),
            lines.len()
        ));
        session.save(&path)?;
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let _ = std::fs::remove_file(&path);
        Ok((session, lines, bytes))
    };
    let result = (|| -> Result<String, String> {
        let start = Instant::now();
        let (session, lines, bytes) = run()?;
        let took = start.elapsed();
        if took.as_secs() >= 600 {
            return Err(format!(
                "training took {:.1} s, budget 600 s",
                took.as_secs_f64()
            ));
        }
        let cfg = RunConfig::from_text(text)?;
        let tokens = generate_synthetic_tokens(
            &cfg.scene(),
            &cfg.rig(),
            &cfg.grid_spec(),
            &cfg.token_config(),
            cfg.classes,
            cfg.run_seed,
        );
        let eval = evaluate_model(&session.model, &tokens);
        let miou = eval.report.miou.ok_or("mIoU undefined")?;
        let sc = eval.report.sc_iou.ok_or("SC IoU undefined")?;
        if miou < 0.75 {
            return Err(format!("mIoU {:.4} below 0.75", miou));
        }
        if sc < 0.85 {
            return Err(format!("SC IoU {:.4} below 0.85", sc));
        }
        let (_, lines2, bytes2) = run()?;
        if lines != lines2 {
            return Err("second run produced different step logs".into());
        }
        if bytes != bytes2 {
            return Err("second run produced a different checkpoint".into());
        }
        Ok(format!(
            "mIoU {:.4} >= 0.75, SC IoU {:.4} >= 0.85 after {} steps in {:.1} s; rerun bit-identical",
            miou,
            sc,
            cfg.steps,
            took.as_secs_f64()
        ))
    })();
    verdict("toy scene overfit", result);
}

/// Residual heads start at zero, so the adapter refinement, the spatial
/// block and the decoder must all hand their input through bytewise.
#[test]
fn identity_initializations() {
    let result = (|| -> Result<String, String> {
        let cfg = HgfaConfig {
            layers: 2,
            groups: 1,
            layers_per_group: 2,
            channels: 8,
            patch_h: 4,
            patch_w: 4,
            expansion: vec![2.0],
            hidden_dims: vec![8],
            scales: vec![1.0],
            out_channels: 8,
            se_reduction: 4,
            se_bypass: false,
            dropout: 0.0,
        };
        let mut store = ParamStore::new();
        let params = init_hgfa_params(&mut store, &cfg, 5);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let g = params.groups[0].bind(&bound);
        let tokens = Tensor::from_fn(vec![16, 8], |i| (i as f64).sin());
        let x = tape.constant(tokens.clone());
        let refined = tatr_refine(&mut tape, x, &g, 0.0, 7, true);
        if tape.value(refined).data() != tokens.data() {
            return Err("zero-initialized refinement altered its input".into());
        }
        let map = Tensor::from_fn(vec![4, 4, 8], |i| (i as f64).cos());
        let m = tape.constant(map.clone());
        let spatial = lsfp_spatial_block(&mut tape, m, &g, false);
        if tape.value(spatial).data() != map.data() {
            return Err("zero-initialized spatial block altered its input".into());
        }
        selftest::decoder_passthrough()?;
        Ok("refinement, spatial block and decoder all bytewise transparent at init".into())
    })();
    verdict("identity initializations", result);
}

/// Splatting, its gradients, training and metric tallies must not
/// depend on how many workers carry them.
#[test]
fn parallel_determinism() {
    let result = selftest::worker_determinism().and_then(|detail| {
        let spec = GridSpec::new([16, 16, 8], [0.0; 3], 0.25);
        let classes = 5usize;
        let label = |i: usize, salt: usize| -> u8 {
            let h = (i * 2654435761 + salt) % (classes + 2);
            if h >= classes {
                vg3s::voxel::EMPTY_LABEL
            } else {
                h as u8
            }
        };
        let mut gt = LabelGrid::empty(spec.clone(), classes);
        let mut pred = LabelGrid::empty(spec, classes);
        for i in 0..gt.labels.len() {
            gt.labels[i] = label(i, 17);
            pred.labels[i] = label(i, 91);
        }
        let tally = |workers: usize| {
            parallel::with_pool(workers, || ConfusionMatrix::from_grids(&gt, &pred, workers))
        };
        let base = tally(1);
        for workers in [2usize, 8] {
            let other = tally(workers);
            for g in 0..=classes {
                for p in 0..=classes {
                    if base.count(g, p) != other.count(g, p) {
                        return Err(format!(
                            "confusion tally differs between 1 and {} workers",
                            workers
                        ));
                    }
                }
            }
        }
        Ok(format!("{}; confusion tallies identical for 1, 2 and 8 workers", detail))
    });
    verdict("parallel determinism", result);
}
