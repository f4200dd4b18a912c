//! Iterative refinement of a gaussian set against the adapter's feature
//! pyramids. Each block embeds the current state, pools bilinear feature
//! samples at each gaussian's projection in every view and level, and
//! predicts bounded deltas through a small MLP whose output layer starts
//! at zero, so an untrained decoder passes the state through unchanged.

use crate::camera::CameraRig;
use crate::hgfa::ViewFeatures;
use crate::params::{glorot, Bound, ParamId, ParamStore};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use crate::gaussians::GaussianSet;
use crate::voxel::GridSpec;

#[derive(Clone, Debug)]
pub struct DecoderConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub classes: usize,
    /// Feature width D of every pyramid level.
    pub feature_channels: usize,
    pub levels: usize,
    /// Bound on the position delta per block, in world units.
    pub pos_cap: f64,
    /// Bound on the log-scale delta per block.
    pub scale_cap: f64,
    pub rot_cap: f64,
    pub opacity_cap: f64,
    pub class_cap: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl DecoderConfig {
    /// Width of the state embedding: position, log scale, rotation,
    /// opacity, class logits.
    pub fn embed_dim(&self) -> usize {
        3 + 3 + 4 + 1 + self.classes
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.blocks == 0 {
            return Err("decoder needs at least one block".into());
        }
        if self.hidden == 0 || self.classes == 0 || self.feature_channels == 0 || self.levels == 0 {
            return Err("decoder dims must be positive".into());
        }
        for (name, cap) in [
            ("pos_cap", self.pos_cap),
            ("scale_cap", self.scale_cap),
            ("rot_cap", self.rot_cap),
            ("opacity_cap", self.opacity_cap),
            ("class_cap", self.class_cap),
        ] {
            if !(cap > 0.0 && cap.is_finite()) {
                return Err(format!("{} must be positive and finite", name));
            }
        }
        if !(self.scale_min > 0.0 && self.scale_max > self.scale_min) {
            return Err("scale bounds must satisfy 0 < min < max".into());
        }
        Ok(())
    }
}

/// One refinement block's parameters.
pub struct BlockParamIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub struct DecoderParams {
    pub blocks: Vec<BlockParamIds>,
}

/// Registers decoder parameters; every block's output layer starts at
/// zero so the initial decoder is the identity on the gaussian state.
pub fn init_decoder_params(
    store: &mut ParamStore,
    cfg: &DecoderConfig,
    run_seed: u64,
) -> DecoderParams {
    let e = cfg.embed_dim();
    let d_in = e + cfg.feature_channels;
    let blocks = (0..cfg.blocks)
        .map(|b| {
            let w1_name = format!("dec.b{b}.w1");
            let w1v = glorot(vec![d_in, cfg.hidden], d_in, cfg.hidden, run_seed, &w1_name);
            BlockParamIds {
                w1: store.register(&w1_name, w1v),
                b1: store.register(&format!("dec.b{b}.b1"), Tensor::zeros(vec![cfg.hidden])),
                w2: store.register(&format!("dec.b{b}.w2"), Tensor::zeros(vec![cfg.hidden, e])),
                b2: store.register(&format!("dec.b{b}.b2"), Tensor::zeros(vec![e])),
            }
        })
        .collect();
    DecoderParams { blocks }
}

/// The gaussian set as differentiable tensors on a tape.
#[derive(Clone, Copy)]
pub struct GaussianTensors {
    /// `[J, 3]` world positions.
    pub positions: TensorId,
    /// `[J, 3]` per-axis standard deviations, always positive.
    pub scales: TensorId,
    /// `[J, 4]` w-first quaternions.
    pub rotations: TensorId,
    /// `[J]` opacity logits.
    pub opacity_logits: TensorId,
    /// `[J, C]` class logits.
    pub class_logits: TensorId,
}

impl GaussianTensors {
    pub fn count(&self, tape: &Tape) -> usize {
        tape.value(self.positions).extent(0)
    }

    /// Pushes a concrete set onto the tape as differentiable inputs.
    pub fn from_set(tape: &mut Tape, set: &GaussianSet) -> Self {
        let j = set.count;
        Self {
            positions: tape.input(Tensor::new(vec![j, 3], set.positions.clone())),
            scales: tape.input(Tensor::new(vec![j, 3], set.scales.clone())),
            rotations: tape.input(Tensor::new(vec![j, 4], set.rotations.clone())),
            opacity_logits: tape.input(Tensor::new(vec![j], set.opacity_logits.clone())),
            class_logits: tape.input(Tensor::new(vec![j, set.classes], set.class_logits.clone())),
        }
    }

    /// Reads the current values back into a concrete set.
    pub fn to_set(&self, tape: &Tape) -> GaussianSet {
        let j = self.count(tape);
        let classes = tape.value(self.class_logits).extent(1);
        GaussianSet::new(
            j,
            classes,
            tape.value(self.positions).data().to_vec(),
            tape.value(self.scales).data().to_vec(),
            tape.value(self.rotations).data().to_vec(),
            tape.value(self.opacity_logits).data().to_vec(),
            tape.value(self.class_logits).data().to_vec(),
        )
    }
}

/// Mean of the bilinear samples over every (view, level) pair in which
/// the gaussian projects inside the image; rows with no visible pair
/// stay zero. Returns `[J, D]`.
fn pool_features(
    tape: &mut Tape,
    positions: TensorId,
    features: &[ViewFeatures],
    rig: &CameraRig,
) -> TensorId {
    let j = tape.value(positions).extent(0);
    let levels = features[0].maps.len();
    let d = tape.value(features[0].maps[0]).extent(2);
    let mut counts = vec![0usize; j];
    let mut total: Option<TensorId> = None;
    for (v, feat) in features.iter().enumerate() {
        let (uv, visible) = tape.pinhole_project(positions, &rig.views[v]);
        let mask: Vec<f64> = visible.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        for (row, &m) in visible.iter().enumerate() {
            if m {
                counts[row] += levels;
            }
        }
        for &map in &feat.maps {
            let sampled = tape.bilinear_sample_many(map, uv);
            let masked = tape.row_scale_const(sampled, &mask);
            total = Some(match total {
                None => masked,
                Some(t) => tape.add(t, masked),
            });
        }
    }
    let norm: Vec<f64> = counts
        .iter()
        .map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 })
        .collect();
    let total = total.unwrap_or_else(|| tape.constant(Tensor::zeros(vec![j, d])));
    tape.row_scale_const(total, &norm)
}

/// State embedding: positions mapped to [-1, 1] over the grid volume,
/// scales in log space, rotation, opacity and class logits as-is.
fn embed_state(tape: &mut Tape, state: &GaussianTensors, grid: &GridSpec) -> TensorId {
    let j = state.count(tape);
    let lo = grid.origin;
    let hi = grid.max_corner();
    let mut scale = [0.0; 3];
    let mut shift = [0.0; 3];
    for a in 0..3 {
        scale[a] = 2.0 / (hi[a] - lo[a]);
        shift[a] = -(hi[a] + lo[a]) / (hi[a] - lo[a]);
    }
    let m = tape.col_affine(state.positions, &scale, &shift);
    let s = tape.ln(state.scales);
    let a_col = tape.reshape(state.opacity_logits, vec![j, 1]);
    tape.concat_cols(&[m, s, state.rotations, a_col, state.class_logits])
}

fn bounded(tape: &mut Tape, x: TensorId, cap: f64) -> TensorId {
    let t = tape.tanh(x);
    tape.scale(t, cap)
}

/// Applies one refinement block.
fn decode_block(
    tape: &mut Tape,
    state: &GaussianTensors,
    features: &[ViewFeatures],
    rig: &CameraRig,
    block: &BlockParamIds,
    bound: &Bound,
    cfg: &DecoderConfig,
    grid: &GridSpec,
) -> GaussianTensors {
    let j = state.count(tape);
    let classes = tape.value(state.class_logits).extent(1);
    let embed = embed_state(tape, state, grid);
    let pooled = pool_features(tape, state.positions, features, rig);
    let x = tape.concat_cols(&[embed, pooled]);
    let h = tape.matmul(x, bound.id(block.w1));
    let h = tape.add_bias(h, bound.id(block.b1));
    let h = tape.gelu(h);
    let delta = tape.matmul(h, bound.id(block.w2));
    let delta = tape.add_bias(delta, bound.id(block.b2));

    let dm = tape.slice_cols(delta, 0, 3);
    let ds = tape.slice_cols(delta, 3, 6);
    let dr = tape.slice_cols(delta, 6, 10);
    let da = tape.slice_cols(delta, 10, 11);
    let dc = tape.slice_cols(delta, 11, 11 + classes);

    let dm = bounded(tape, dm, cfg.pos_cap);
    let moved = tape.add(state.positions, dm);
    let lo = grid.origin;
    let hi = grid.max_corner();
    let positions = tape.col_clamp(moved, &lo, &hi);

    let ds = bounded(tape, ds, cfg.scale_cap);
    let growth = tape.exp(ds);
    let scaled = tape.mul(state.scales, growth);
    let scales = tape.col_clamp(
        scaled,
        &[cfg.scale_min; 3],
        &[cfg.scale_max; 3],
    );

    let dr = bounded(tape, dr, cfg.rot_cap);
    let turned = tape.add(state.rotations, dr);
    let rotations = tape.normalize_rows(turned);

    let da = bounded(tape, da, cfg.opacity_cap);
    let da = tape.reshape(da, vec![j]);
    let opacity_logits = tape.add(state.opacity_logits, da);

    let dc = bounded(tape, dc, cfg.class_cap);
    let class_logits = tape.add(state.class_logits, dc);

    GaussianTensors {
        positions,
        scales,
        rotations,
        opacity_logits,
        class_logits,
    }
}

/// Runs every block in order. Features and cameras are shared by all
/// blocks; projections are recomputed per block as positions move.
#[allow(clippy::too_many_arguments)]
pub fn decode(
    tape: &mut Tape,
    init: GaussianTensors,
    features: &[ViewFeatures],
    rig: &CameraRig,
    params: &DecoderParams,
    bound: &Bound,
    cfg: &DecoderConfig,
    grid: &GridSpec,
) -> GaussianTensors {
    assert_eq!(features.len(), rig.views.len(), "one feature set per view");
    assert!(!features.is_empty(), "decoder needs at least one view");
    for f in features {
        assert_eq!(f.maps.len(), cfg.levels, "feature pyramid depth");
    }
    let mut state = init;
    for block in &params.blocks {
        state = decode_block(tape, &state, features, rig, block, bound, cfg, grid);
    }
    state
}
