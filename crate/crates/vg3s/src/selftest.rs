//! Built-in health checks runnable from the CLI. Each check exercises
//! one load-bearing property of the pipeline with an independent oracle
//! and reports a single pass/fail line.

use crate::check::{self, FD_TOL};
use crate::config::RunConfig;
use crate::decoder::{decode, init_decoder_params, DecoderConfig, GaussianTensors};
use crate::gaussians::{lattice_init, GaussianSet};
use crate::hgfa::{gatf_fuse, init_hgfa_params, HgfaConfig};
use crate::loss::LossConfig;
use crate::metrics::ConfusionMatrix;
use crate::parallel;
use crate::params::ParamStore;
use crate::rng;
use crate::splat::{occupancy_tail_bound, splat_oracle, splat_with_workers};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use crate::train::{grid_targets, TrainSession};
use crate::voxel::{GridSpec, EMPTY_LABEL};
use rand::Rng;

pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: u128,
}

fn outcome(name: &'static str, check: impl FnOnce() -> Result<String, String>) -> CheckOutcome {
    let start = std::time::Instant::now();
    let result = check();
    let millis = start.elapsed().as_millis();
    match result {
        Ok(detail) => CheckOutcome {
            name,
            passed: true,
            detail,
            millis,
        },
        Err(detail) => CheckOutcome {
            name,
            passed: false,
            detail,
            millis,
        },
    }
}

/// Composite differentiable program touching every op family the
/// pipeline uses, checked against central finite differences.
pub fn gradient_fidelity() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut r = rng::stream(rng::stream_seed(seed, rng::domain::SELFTEST, 1));
        let x = check::random_tensor(vec![4, 6], 1.0, &mut r);
        let w = check::random_tensor(vec![6, 8], 0.5, &mut r);
        let b = check::random_tensor(vec![8], 0.5, &mut r);
        let gain = check::random_tensor(vec![8], 0.5, &mut r);
        let map = check::random_tensor(vec![5, 5, 3], 1.0, &mut r);
        let kernel = check::random_tensor(vec![3, 3, 3], 0.5, &mut r);
        let point = check::random_tensor(vec![3, 3], 0.4, &mut r);
        let gscale = Tensor::from_fn(vec![3, 3], |i| 0.25 + 0.05 * (i % 4) as f64);
        let grot = Tensor::from_fn(vec![3, 4], |i| if i % 4 == 0 { 1.0 } else { 0.15 });
        let gopac = check::random_tensor(vec![3], 1.0, &mut r);
        let gclass = check::random_tensor(vec![3, 2], 1.0, &mut r);
        let inputs = vec![x, w, b, gain, map, kernel, point, gscale, grot, gopac, gclass];
        let grid = GridSpec::new([4, 4, 2], [-1.0, -1.0, -0.5], 0.5);
        let targets: Vec<usize> = (0..32).map(|v| v % 3).collect();
        let builder = move |tape: &mut Tape, ids: &[TensorId]| {
            // dense chain: matmul, bias, gelu, layer norm, softmax
            let ones = tape.constant(Tensor::zeros(vec![8]));
            let h = tape.matmul(ids[0], ids[1]);
            let h = tape.add_bias(h, ids[2]);
            let h = tape.gelu(h);
            let h = tape.layer_norm(h, ids[3], ones);
            let sm = tape.softmax(h, 1);
            let dense_score = tape.sum(sm);
            // spatial chain: depthwise conv then bilinear sampling
            let conv = tape.conv2d_depthwise(ids[4], ids[5], 1);
            let uv = tape.constant(Tensor::new(
                vec![2, 2],
                vec![0.3, 0.4, 0.7, 0.6],
            ));
            let sampled = tape.bilinear_sample_many(conv, uv);
            let spatial_score = tape.mean(sampled);
            // splat chain into the losses
            let pred = tape.splat_distribution(
                ids[6], ids[7], ids[8], ids[9], ids[10], &grid, f64::INFINITY,
            );
            let cfg = LossConfig::default();
            let (loss, _, _) = tape.total_loss(pred, &targets, &cfg);
            let a = tape.add(dense_score, spatial_score);
            tape.add(a, loss)
        };
        let mut probe_rng = rng::stream(rng::stream_seed(seed, rng::domain::SELFTEST, 2));
        let res = check::check_gradients(&builder, &inputs, Some(2), &mut probe_rng);
        worst = worst.max(res.rel_err);
        if res.rel_err >= FD_TOL {
            return Err(format!(
                "seed {}: gradient of input {} element {} off by {:.3e} (tolerance {:.0e})",
                seed, res.input, res.element, res.rel_err, FD_TOL
            ));
        }
    }
    Ok(format!(
        "5 seeds, worst relative error {:.3e} < {:.0e}",
        worst, FD_TOL
    ))
}

/// Fusion weights must be a distribution over each group's layers for
/// any input, not only at the uniform initialization.
pub fn fusion_weight_sums() -> Result<String, String> {
    let cfg = HgfaConfig {
        layers: 3,
        groups: 1,
        layers_per_group: 3,
        channels: 8,
        patch_h: 2,
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
    let params = init_hgfa_params(&mut store, &cfg, 99);
    let mut r = rng::stream(rng::stream_seed(99, rng::domain::SELFTEST, 3));
    // live scorer head so the weights are not trivially uniform
    for v in store.value_mut(params.groups[0].score_w2).data_mut() {
        *v = r.gen_range(-1.0..1.0);
    }
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let stack = check::random_tensor(vec![3, 8, 8], 2.0, &mut r);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let g = params.groups[0].bind(&bound);
        let id = tape.constant(stack);
        let (_, weights) = gatf_fuse(&mut tape, id, &g);
        let w = tape.value(weights);
        for l in 0..8 {
            let total: f64 = (0..3).map(|m| w.at2(m, l)).sum();
            worst = worst.max((total - 1.0).abs());
        }
    }
    if worst <= 1e-10 {
        Ok(format!(
            "100 random stacks, worst |sum - 1| = {:.3e} <= 1e-10",
            worst
        ))
    } else {
        Err(format!("weight sums drift by {:.3e} > 1e-10", worst))
    }
}

/// The flattened pyramid length follows L * sum(tau^2), and the
/// full-scale configuration passes validation without running.
pub fn pyramid_shape_law() -> Result<String, String> {
    let desk = RunConfig::from_text(include_str!("../../../configs/desk.cfg"))
        .map_err(|e| format!("desk config: {}", e))?;
    let got = desk.hgfa_config().flattened_len();
    if got != 1360 {
        return Err(format!("desk pyramid flattens to {}, expected 1360", got));
    }
    let full = RunConfig::from_text(include_str!("../../../configs/full.cfg"))
        .map_err(|e| format!("full-scale config: {}", e))?;
    full.validate()
        .map_err(|e| format!("full-scale config rejected: {}", e))?;
    Ok(format!(
        "desk flattens to 1360 tokens; full-scale config ({} channels) validates",
        full.channels
    ))
}

fn random_set(count: usize, classes: usize, grid: &GridSpec, seed: u64) -> GaussianSet {
    let mut set = lattice_init(grid, count, classes, 0.3, 0.4, seed);
    let mut r = rng::stream(rng::stream_seed(seed, rng::domain::SELFTEST, 4));
    for v in set.rotations.iter_mut() {
        *v += r.gen_range(-0.3..0.3);
    }
    for v in set.class_logits.iter_mut() {
        *v = r.gen_range(-1.0..1.0);
    }
    for v in set.opacity_logits.iter_mut() {
        *v += r.gen_range(-0.5..0.5);
    }
    set
}

/// The tiled, log-space forward splat must agree with a naive direct
/// product oracle, and kappa culling must stay inside its tail bound.
pub fn splat_oracle_agreement() -> Result<String, String> {
    let grid = GridSpec::new([8, 8, 4], [-2.0, -2.0, -1.0], 0.5);
    let set = random_set(20, 3, &grid, 7);
    let full = splat_with_workers(&set, &grid, f64::INFINITY, 1);
    let oracle = splat_oracle(&set, &grid);
    let mut worst: f64 = 0.0;
    for v in 0..grid.num_voxels() {
        worst = worst.max((full.occupancy[v] - oracle.occupancy[v]).abs());
        for c in 0..3 {
            worst = worst
                .max((full.class_probs[v * 3 + c] - oracle.class_probs[v * 3 + c]).abs());
        }
    }
    if worst >= 1e-12 {
        return Err(format!("kernel vs oracle differ by {:.3e} >= 1e-12", worst));
    }
    let kappa = 3.0;
    let culled = splat_with_workers(&set, &grid, kappa, 1);
    let bound = occupancy_tail_bound(&set, kappa);
    let mut worst_cull: f64 = 0.0;
    for v in 0..grid.num_voxels() {
        worst_cull = worst_cull.max((full.occupancy[v] - culled.occupancy[v]).abs());
    }
    if worst_cull > bound {
        return Err(format!(
            "culling at kappa = {} moved occupancy by {:.3e} > bound {:.3e}",
            kappa, worst_cull, bound
        ));
    }
    Ok(format!(
        "oracle gap {:.3e} < 1e-12; kappa = 3 culling gap {:.3e} within bound {:.3e}",
        worst, worst_cull, bound
    ))
}

/// At hard 0/1 predictions the Lovász extension equals one minus the
/// Jaccard index, which a direct set count verifies.
pub fn lovasz_jaccard_vertices() -> Result<String, String> {
    let mut r = rng::stream(rng::stream_seed(11, rng::domain::SELFTEST, 5));
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let v = 16;
        let k = 4;
        let targets: Vec<usize> = (0..v).map(|_| r.gen_range(0..k)).collect();
        let hard: Vec<usize> = (0..v).map(|_| r.gen_range(0..k)).collect();
        let mut data = vec![0.0; v * k];
        for row in 0..v {
            data[row * k + hard[row]] = 1.0;
        }
        let mut tape = Tape::new();
        let pred = tape.input(Tensor::new(vec![v, k], data));
        let loss = tape.lovasz_softmax(pred, &targets);
        let mut present: Vec<usize> = targets.clone();
        present.sort_unstable();
        present.dedup();
        let mut want = 0.0;
        for &c in &present {
            let inter = (0..v).filter(|&i| targets[i] == c && hard[i] == c).count();
            let union = (0..v).filter(|&i| targets[i] == c || hard[i] == c).count();
            want += 1.0 - inter as f64 / union as f64;
        }
        want /= present.len() as f64;
        let got = tape.value(loss).item();
        worst = worst.max((got - want).abs());
        if (got - want).abs() >= 1e-9 {
            return Err(format!(
                "trial {}: lovasz {} vs 1 - jaccard {} (gap {:.3e})",
                trial,
                got,
                want,
                (got - want).abs()
            ));
        }
    }
    Ok(format!(
        "50 hard predictions, worst |lovasz - (1 - jaccard)| = {:.3e} < 1e-9",
        worst
    ))
}

/// Hand-counted confusion entries give the expected IoU values.
pub fn metric_arithmetic() -> Result<String, String> {
    let mut cm = ConfusionMatrix::new(2);
    // class 0: TP = 3, FN = 2, FP = 1
    for _ in 0..3 {
        cm.record(0, 0);
    }
    cm.record(0, 1);
    cm.record(0, EMPTY_LABEL);
    cm.record(1, 0);
    let iou = cm.class_iou(0).unwrap();
    if (iou - 0.5).abs() > 1e-15 {
        return Err(format!("TP=3 FP=1 FN=2 gave IoU {}, expected 0.5", iou));
    }
    let mut cm = ConfusionMatrix::new(3);
    for gt in [0u8, 1, 2, EMPTY_LABEL, 1] {
        cm.record(gt, gt);
    }
    if cm.miou() != Some(1.0) || cm.sc_iou() != Some(1.0) {
        return Err("self-comparison is not a perfect score".into());
    }
    Ok("IoU(TP=3, FP=1, FN=2) = 0.5; self-comparison scores 1.0".into())
}

/// A decoder whose output layers are still zero must hand the gaussian
/// state through byte for byte.
pub fn decoder_passthrough() -> Result<String, String> {
    let grid = GridSpec::new([8, 8, 4], [-2.0, -2.0, -1.0], 0.5);
    let cfg = DecoderConfig {
        blocks: 2,
        hidden: 16,
        classes: 3,
        feature_channels: 8,
        levels: 1,
        pos_cap: 0.5,
        scale_cap: 0.5,
        rot_cap: 0.5,
        opacity_cap: 1.0,
        class_cap: 1.0,
        scale_min: 0.05,
        scale_max: 2.0,
    };
    let set = lattice_init(&grid, 27, 3, 0.2, 0.3, 17);
    let mut store = ParamStore::new();
    let params = init_decoder_params(&mut store, &cfg, 23);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let rig = crate::camera::CameraRig::orbit(2, [0.0, 0.0, 0.0], 6.0, 2.0, 60.0, 64.0, 64.0);
    let features: Vec<crate::hgfa::ViewFeatures> = (0..2)
        .map(|v| {
            let t = Tensor::from_fn(vec![8, 8, 8], |i| ((i * 13 + v * 7) % 19) as f64 * 0.1);
            crate::hgfa::ViewFeatures {
                maps: vec![tape.constant(t)],
                fusion_weights: Vec::new(),
            }
        })
        .collect();
    let state = GaussianTensors::from_set(&mut tape, &set);
    let out = decode(&mut tape, state, &features, &rig, &params, &bound, &cfg, &grid);
    let result = out.to_set(&tape);
    let same = result.positions == set.positions
        && result.scales == set.scales
        && result.rotations == set.rotations
        && result.opacity_logits == set.opacity_logits
        && result.class_logits == set.class_logits;
    if same {
        Ok("2 zero-initialized blocks returned all 27 gaussians bitwise unchanged".into())
    } else {
        Err("zero-initialized decoder altered the state".into())
    }
}

/// Forward splat, its gradients, and a short training run must be
/// bitwise identical for 1, 2 and 8 workers.
pub fn worker_determinism() -> Result<String, String> {
    let grid = GridSpec::new([8, 8, 4], [-2.0, -2.0, -1.0], 0.5);
    let set = random_set(24, 3, &grid, 31);
    let run_splat = |workers: usize| -> (Vec<f64>, Vec<f64>) {
        parallel::with_pool(workers, || {
            let mut tape = Tape::new();
            let state = GaussianTensors::from_set(&mut tape, &set);
            let pred = tape.splat_distribution(
                state.positions,
                state.scales,
                state.rotations,
                state.opacity_logits,
                state.class_logits,
                &grid,
                3.0,
            );
            let targets: Vec<usize> = (0..grid.num_voxels()).map(|v| v % 4).collect();
            let (loss, _, _) = tape.total_loss(pred, &targets, &LossConfig::default());
            let grads = tape.backward(loss);
            (
                tape.value(pred).data().to_vec(),
                grads.expect(state.positions).data().to_vec(),
            )
        })
    };
    let base = run_splat(1);
    for workers in [2, 8] {
        let got = run_splat(workers);
        if got != base {
            return Err(format!(
                "splat forward/backward differs between 1 and {} workers",
                workers
            ));
        }
    }
    let cfg = RunConfig::from_text(
        "views = 1\nlayers = 2\nchannels = 8\npatch_h = 4\npatch_w = 4\n\
         groups = 1\nlayers_per_group = 2\nexpansion = 2.0\nhidden_dims = 8\n\
         scales = 1.0\nout_channels = 8\nse_reduction = 4\ndropout = 0.1\n\
         blocks = 1\ndecoder_hidden = 16\ngaussians = 8\ninit_scale = 0.2\n\
         grid_x = 8\ngrid_y = 8\ngrid_z = 4\nvoxel_size = 0.5\n\
         origin_x = -2.0\norigin_y = -2.0\norigin_z = -1.0\nclasses = 2\n\
         ground_height = none\nscene_box_1 = 1, -1, -1, -0.5, 1, 1, 0.5\n\
         steps = 2\nwarmup = 1\npeak_lr = 1e-3\nimage_width = 32\n\
         image_height = 32\ncam_distance = 5\ncam_height = 2\nlog_every = 1\n",
    )
    .map_err(|e| format!("worker test config: {}", e))?;
    let tokens = crate::tokens::generate_synthetic_tokens(
        &cfg.scene(),
        &cfg.rig(),
        &cfg.grid_spec(),
        &cfg.token_config(),
        cfg.classes,
        cfg.run_seed,
    );
    let targets = grid_targets(&cfg.scene().rasterize(&cfg.grid_spec(), cfg.classes));
    let train_log = |workers: usize| -> Result<Vec<String>, String> {
        parallel::with_pool(workers, || {
            let mut lines = Vec::new();
            let mut session = TrainSession::new(&cfg);
            session
                .run(&tokens, &targets, None, &mut |l| lines.push(l.to_string()))?;
            Ok(lines)
        })
    };
    let base_log = train_log(1)?;
    for workers in [2, 8] {
        if train_log(workers)? != base_log {
            return Err(format!(
                "training log differs between 1 and {} workers",
                workers
            ));
        }
    }
    Ok("splat gradients and 2-step training logs identical for 1, 2 and 8 workers".into())
}

/// Runs every check, accumulating one line each.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        outcome("gradient_fidelity", gradient_fidelity),
        outcome("fusion_weight_sums", fusion_weight_sums),
        outcome("pyramid_shape_law", pyramid_shape_law),
        outcome("splat_oracle_agreement", splat_oracle_agreement),
        outcome("lovasz_jaccard_vertices", lovasz_jaccard_vertices),
        outcome("metric_arithmetic", metric_arithmetic),
        outcome("decoder_passthrough", decoder_passthrough),
        outcome("worker_determinism", worker_determinism),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_builtin_check_passes() {
        for c in run_all() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
