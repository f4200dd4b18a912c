//! Adapter from frozen backbone tokens to multi-scale feature maps.
//!
//! Per view, the N token layers are split into K groups of M consecutive
//! layers. Each group is fused across its layers with per-token softmax
//! weights (scored by a small shared MLP), refined by a residual FFN, and
//! expanded into one level of a spatial pyramid: a depthwise block with a
//! squeeze-excite gate, a projection to the level's hidden width plus a
//! fixed sinusoidal position code, a learned resampler to the level's
//! resolution, and a projection to the common output width.

use crate::params::{glorot, Bound, ParamId, ParamStore};
use crate::rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use crate::tokens::TokenStack;

#[derive(Clone, Debug)]
pub struct HgfaConfig {
    /// Backbone layers N; must equal `groups * layers_per_group`.
    pub layers: usize,
    pub groups: usize,
    pub layers_per_group: usize,
    /// Token width Dv.
    pub channels: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Residual FFN expansion per group; hidden = floor(expansion * Dv).
    pub expansion: Vec<f64>,
    /// Pyramid hidden width per level.
    pub hidden_dims: Vec<usize>,
    /// Resolution scale per level relative to the patch grid.
    pub scales: Vec<f64>,
    /// Common output width D.
    pub out_channels: usize,
    pub se_reduction: usize,
    /// Skips the squeeze-excite gate when set.
    pub se_bypass: bool,
    pub dropout: f64,
}

/// How one level reaches its target resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ResamplePlan {
    Identity,
    /// One transposed conv with kernel == stride == factor.
    Upsample(usize),
    /// A chain of `n` stride-2 3x3 convs, halving each time.
    Downsample(usize),
}

impl ResamplePlan {
    /// Number of learned kernels the plan needs.
    pub fn kernel_count(&self) -> usize {
        match self {
            ResamplePlan::Identity => 0,
            ResamplePlan::Upsample(_) => 1,
            ResamplePlan::Downsample(n) => *n,
        }
    }
}

/// Maps a scale factor to a plan: integers >= 1 upsample (1 is the
/// identity), inverse powers of two downsample, anything else is
/// rejected.
pub fn resample_plan(tau: f64) -> Result<ResamplePlan, String> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(format!("scale {} must be a positive finite number", tau));
    }
    if tau >= 1.0 {
        if tau.fract() != 0.0 {
            return Err(format!("scale {} above 1 must be an integer", tau));
        }
        let s = tau as usize;
        return Ok(if s == 1 {
            ResamplePlan::Identity
        } else {
            ResamplePlan::Upsample(s)
        });
    }
    let inv = 1.0 / tau;
    if inv.fract() != 0.0 || !(inv as usize).is_power_of_two() {
        return Err(format!(
            "scale {} below 1 must be an inverse power of two",
            tau
        ));
    }
    Ok(ResamplePlan::Downsample((inv as usize).trailing_zeros() as usize))
}

impl HgfaConfig {
    pub fn tokens(&self) -> usize {
        self.patch_h * self.patch_w
    }

    /// Output resolution of level `k`.
    pub fn level_dims(&self, k: usize) -> (usize, usize) {
        let t = self.scales[k];
        (
            (self.patch_h as f64 * t).round() as usize,
            (self.patch_w as f64 * t).round() as usize,
        )
    }

    /// Total token count when every level is flattened: sum over levels
    /// of (h * tau)(w * tau), which is L * sum(tau^2) for exact scales.
    pub fn flattened_len(&self) -> usize {
        (0..self.groups)
            .map(|k| {
                let (h, w) = self.level_dims(k);
                h * w
            })
            .sum()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.layers == 0 || self.groups == 0 || self.layers_per_group == 0 {
            return Err("layers, groups, layers_per_group must be positive".into());
        }
        if self.groups * self.layers_per_group != self.layers {
            return Err(format!(
                "groups {} * layers_per_group {} != layers {}",
                self.groups, self.layers_per_group, self.layers
            ));
        }
        if self.patch_h == 0 || self.patch_w == 0 {
            return Err("patch grid must be nonempty".into());
        }
        for (name, list) in [
            ("expansion", self.expansion.len()),
            ("hidden_dims", self.hidden_dims.len()),
            ("scales", self.scales.len()),
        ] {
            if list != self.groups {
                return Err(format!("{} must list one entry per group", name));
            }
        }
        if self.channels < 4 {
            return Err("channels must be at least 4".into());
        }
        if self.se_reduction == 0 || self.channels % self.se_reduction != 0 {
            return Err(format!(
                "se_reduction {} must divide channels {}",
                self.se_reduction, self.channels
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        if self.out_channels == 0 {
            return Err("out_channels must be positive".into());
        }
        for (k, &rho) in self.expansion.iter().enumerate() {
            if (rho * self.channels as f64).floor() < 1.0 {
                return Err(format!("expansion {} of group {} gives empty hidden", rho, k));
            }
        }
        for (k, &dh) in self.hidden_dims.iter().enumerate() {
            if dh == 0 || dh % 4 != 0 {
                return Err(format!(
                    "hidden_dims[{}] = {} must be a positive multiple of 4 for the position code",
                    k, dh
                ));
            }
        }
        for (k, &tau) in self.scales.iter().enumerate() {
            let plan = resample_plan(tau).map_err(|e| format!("scales[{}]: {}", k, e))?;
            if let ResamplePlan::Downsample(n) = plan {
                let div = 1 << n;
                if self.patch_h % div != 0 || self.patch_w % div != 0 {
                    return Err(format!(
                        "scales[{}] = {} does not divide the {}x{} patch grid",
                        k, tau, self.patch_h, self.patch_w
                    ));
                }
            }
        }
        Ok(())
    }

    fn ffn_hidden(&self, k: usize) -> usize {
        (self.expansion[k] * self.channels as f64).floor() as usize
    }
}

/// One group's parameters, as store ids.
pub struct GroupParamIds {
    pub score_w1: ParamId,
    pub score_b1: ParamId,
    pub score_w2: ParamId,
    pub score_b2: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub dw: ParamId,
    pub pw: ParamId,
    pub se_w1: ParamId,
    pub se_b1: ParamId,
    pub se_w2: ParamId,
    pub se_b2: ParamId,
    pub proj_in_w: ParamId,
    pub proj_in_b: ParamId,
    pub resample: Vec<ParamId>,
    pub proj_out_w: ParamId,
    pub proj_out_b: ParamId,
}

/// The same group bound onto a tape.
pub struct GroupTensors {
    pub score_w1: TensorId,
    pub score_b1: TensorId,
    pub score_w2: TensorId,
    pub score_b2: TensorId,
    pub ln_gain: TensorId,
    pub ln_bias: TensorId,
    pub ffn_w1: TensorId,
    pub ffn_b1: TensorId,
    pub ffn_w2: TensorId,
    pub ffn_b2: TensorId,
    pub dw: TensorId,
    pub pw: TensorId,
    pub se_w1: TensorId,
    pub se_b1: TensorId,
    pub se_w2: TensorId,
    pub se_b2: TensorId,
    pub proj_in_w: TensorId,
    pub proj_in_b: TensorId,
    pub resample: Vec<TensorId>,
    pub proj_out_w: TensorId,
    pub proj_out_b: TensorId,
}

impl GroupParamIds {
    pub fn bind(&self, bound: &Bound) -> GroupTensors {
        GroupTensors {
            score_w1: bound.id(self.score_w1),
            score_b1: bound.id(self.score_b1),
            score_w2: bound.id(self.score_w2),
            score_b2: bound.id(self.score_b2),
            ln_gain: bound.id(self.ln_gain),
            ln_bias: bound.id(self.ln_bias),
            ffn_w1: bound.id(self.ffn_w1),
            ffn_b1: bound.id(self.ffn_b1),
            ffn_w2: bound.id(self.ffn_w2),
            ffn_b2: bound.id(self.ffn_b2),
            dw: bound.id(self.dw),
            pw: bound.id(self.pw),
            se_w1: bound.id(self.se_w1),
            se_b1: bound.id(self.se_b1),
            se_w2: bound.id(self.se_w2),
            se_b2: bound.id(self.se_b2),
            proj_in_w: bound.id(self.proj_in_w),
            proj_in_b: bound.id(self.proj_in_b),
            resample: self.resample.iter().map(|&p| bound.id(p)).collect(),
            proj_out_w: bound.id(self.proj_out_w),
            proj_out_b: bound.id(self.proj_out_b),
        }
    }
}

pub struct HgfaParams {
    pub groups: Vec<GroupParamIds>,
}

/// Registers all adapter parameters. The fusion scorer's final layer,
/// the residual FFN's second linear and the spatial block's pointwise
/// projection start at zero, so at initialization fusion weights are
/// uniform and both residual blocks are the identity.
pub fn init_hgfa_params(store: &mut ParamStore, cfg: &HgfaConfig, run_seed: u64) -> HgfaParams {
    let dv = cfg.channels;
    let sh = (dv / 4).max(1);
    let sr = dv / cfg.se_reduction;
    let d = cfg.out_channels;
    let mut groups = Vec::with_capacity(cfg.groups);
    let dense = |store: &mut ParamStore, name: String, rows: usize, cols: usize| {
        let t = glorot(vec![rows, cols], rows, cols, run_seed, &name);
        store.register(&name, t)
    };
    let zeros = |store: &mut ParamStore, name: String, shape: Vec<usize>| {
        store.register(&name, Tensor::zeros(shape))
    };
    for k in 0..cfg.groups {
        let hk = cfg.ffn_hidden(k);
        let dh = cfg.hidden_dims[k];
        let plan = resample_plan(cfg.scales[k]).expect("validated scale");
        let mut resample = Vec::new();
        match plan {
            ResamplePlan::Identity => {}
            ResamplePlan::Upsample(s) => {
                let name = format!("hgfa.g{k}.up");
                let t = glorot(vec![s, s, dh, dh], dh, dh, run_seed, &name);
                resample.push(store.register(&name, t));
            }
            ResamplePlan::Downsample(n) => {
                for i in 0..n {
                    let name = format!("hgfa.g{k}.down{i}");
                    let t = glorot(vec![3, 3, dh, dh], 9 * dh, 9 * dh, run_seed, &name);
                    resample.push(store.register(&name, t));
                }
            }
        }
        groups.push(GroupParamIds {
            score_w1: dense(store, format!("hgfa.g{k}.score_w1"), dv, sh),
            score_b1: zeros(store, format!("hgfa.g{k}.score_b1"), vec![sh]),
            score_w2: zeros(store, format!("hgfa.g{k}.score_w2"), vec![sh, 1]),
            score_b2: zeros(store, format!("hgfa.g{k}.score_b2"), vec![1]),
            ln_gain: store.register(&format!("hgfa.g{k}.ln_gain"), Tensor::filled(vec![dv], 1.0)),
            ln_bias: zeros(store, format!("hgfa.g{k}.ln_bias"), vec![dv]),
            ffn_w1: dense(store, format!("hgfa.g{k}.ffn_w1"), dv, hk),
            ffn_b1: zeros(store, format!("hgfa.g{k}.ffn_b1"), vec![hk]),
            ffn_w2: zeros(store, format!("hgfa.g{k}.ffn_w2"), vec![hk, dv]),
            ffn_b2: zeros(store, format!("hgfa.g{k}.ffn_b2"), vec![dv]),
            dw: {
                let name = format!("hgfa.g{k}.dw");
                let t = glorot(vec![3, 3, dv], 9, 9, run_seed, &name);
                store.register(&name, t)
            },
            pw: zeros(store, format!("hgfa.g{k}.pw"), vec![dv, dv]),
            se_w1: dense(store, format!("hgfa.g{k}.se_w1"), dv, sr),
            se_b1: zeros(store, format!("hgfa.g{k}.se_b1"), vec![sr]),
            se_w2: dense(store, format!("hgfa.g{k}.se_w2"), sr, dv),
            se_b2: zeros(store, format!("hgfa.g{k}.se_b2"), vec![dv]),
            proj_in_w: dense(store, format!("hgfa.g{k}.proj_in_w"), dv, dh),
            proj_in_b: zeros(store, format!("hgfa.g{k}.proj_in_b"), vec![dh]),
            resample,
            proj_out_w: dense(store, format!("hgfa.g{k}.proj_out_w"), dh, d),
            proj_out_b: zeros(store, format!("hgfa.g{k}.proj_out_b"), vec![d]),
        });
    }
    HgfaParams { groups }
}

/// Copies the M token layers of group `k` for one view into a
/// `[M, L, Dv]` tensor, shallowest layer first.
pub fn group_stack(tokens: &TokenStack, view: usize, k: usize, cfg: &HgfaConfig) -> Tensor {
    let m = cfg.layers_per_group;
    let slab = cfg.tokens() * cfg.channels;
    let mut data = Vec::with_capacity(m * slab);
    for layer in k * m..(k + 1) * m {
        data.extend_from_slice(tokens.layer_slab(view, layer));
    }
    Tensor::new(vec![m, cfg.tokens(), cfg.channels], data)
}

/// Fuses one group's `[M, L, Dv]` stack into `[L, Dv]`. Every token
/// position gets its own softmax over the M layers, so the weights sum
/// to one per position by construction. Returns (fused, weights).
pub fn gatf_fuse(tape: &mut Tape, stack: TensorId, g: &GroupTensors) -> (TensorId, TensorId) {
    let shape = tape.value(stack).shape().to_vec();
    let (m, l, dv) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(stack, vec![m * l, dv]);
    let h1 = tape.matmul(flat, g.score_w1);
    let h1 = tape.add_bias(h1, g.score_b1);
    let h1 = tape.gelu(h1);
    let s = tape.matmul(h1, g.score_w2);
    let s = tape.add_bias(s, g.score_b2);
    let scores = tape.reshape(s, vec![m, l]);
    let weights = tape.softmax(scores, 0);
    let fused = tape.weighted_layer_sum(weights, stack);
    let fused = tape.layer_norm(fused, g.ln_gain, g.ln_bias);
    (fused, weights)
}

/// Residual token refinement: x + W2 drop(gelu(W1 x + b1)) + b2.
/// W2 and b2 start at zero, so this is the identity at initialization.
pub fn tatr_refine(
    tape: &mut Tape,
    x: TensorId,
    g: &GroupTensors,
    dropout_p: f64,
    dropout_seed: u64,
    training: bool,
) -> TensorId {
    let h = tape.matmul(x, g.ffn_w1);
    let h = tape.add_bias(h, g.ffn_b1);
    let h = tape.gelu(h);
    let h = tape.dropout(h, dropout_p, dropout_seed, training);
    let h = tape.matmul(h, g.ffn_w2);
    let h = tape.add_bias(h, g.ffn_b2);
    tape.add(x, h)
}

/// Local mixing on the `[h, w, Dv]` map: depthwise 3x3, optional
/// squeeze-excite channel gate, pointwise projection, added back onto
/// the block input.
pub fn lsfp_spatial_block(
    tape: &mut Tape,
    x: TensorId,
    g: &GroupTensors,
    se_bypass: bool,
) -> TensorId {
    let d = tape.conv2d_depthwise(x, g.dw, 1);
    let gated = if se_bypass {
        d
    } else {
        let c = tape.value(x).extent(2);
        let pooled = tape.global_avg_pool(d);
        let row = tape.reshape(pooled, vec![1, c]);
        let z = tape.matmul(row, g.se_w1);
        let z = tape.add_bias(z, g.se_b1);
        let z = tape.relu(z);
        let z = tape.matmul(z, g.se_w2);
        let z = tape.add_bias(z, g.se_b2);
        let z = tape.sigmoid(z);
        let gate = tape.reshape(z, vec![c]);
        tape.channel_scale(d, gate)
    };
    let mixed = tape.conv2d_pointwise(gated, g.pw);
    tape.add(x, mixed)
}

/// Fixed 2D position code of shape `[h, w, channels]`: first half of the
/// channels encodes the row index, second half the column, each as
/// interleaved sin/cos pairs with frequencies falling geometrically from
/// 1 to 1/10000.
pub fn sinusoidal_pe_2d(h: usize, w: usize, channels: usize) -> Tensor {
    assert!(channels % 4 == 0, "position code needs channels % 4 == 0");
    let half = channels / 2;
    let pairs = half / 2;
    let freq = |i: usize| -> f64 {
        if pairs == 1 {
            1.0
        } else {
            (10_000f64).powf(-(i as f64) / (pairs - 1) as f64)
        }
    };
    Tensor::from_fn(vec![h, w, channels], |i| {
        let c = i % channels;
        let x = (i / channels) % w;
        let y = i / (channels * w);
        let (pos, cc) = if c < half {
            (y as f64, c)
        } else {
            (x as f64, c - half)
        };
        let angle = pos * freq(cc / 2);
        if cc % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// One pyramid level: spatial block at token resolution, projection to
/// the level width plus the position code, learned resampling to the
/// level resolution, projection to the common width. Returns the
/// `[h_k, w_k, D]` map.
pub fn lsfp_level(
    tape: &mut Tape,
    refined: TensorId,
    g: &GroupTensors,
    cfg: &HgfaConfig,
    k: usize,
) -> TensorId {
    let (h, w, dv) = (cfg.patch_h, cfg.patch_w, cfg.channels);
    let map = tape.reshape(refined, vec![h, w, dv]);
    let map = lsfp_spatial_block(tape, map, g, cfg.se_bypass);
    let map = tape.conv2d_pointwise(map, g.proj_in_w);
    let map = tape.add_bias(map, g.proj_in_b);
    let pe = tape.constant(sinusoidal_pe_2d(h, w, cfg.hidden_dims[k]));
    let mut map = tape.add(map, pe);
    match resample_plan(cfg.scales[k]).expect("validated scale") {
        ResamplePlan::Identity => {}
        ResamplePlan::Upsample(s) => {
            map = tape.conv2d_transposed(map, g.resample[0], s);
        }
        ResamplePlan::Downsample(n) => {
            for i in 0..n {
                map = tape.conv2d_strided(map, g.resample[i], 2, 1);
            }
        }
    }
    let map = tape.conv2d_pointwise(map, g.proj_out_w);
    tape.add_bias(map, g.proj_out_b)
}

/// Adapter output for one view.
pub struct ViewFeatures {
    /// K maps, level k shaped `[h_k, w_k, D]`.
    pub maps: Vec<TensorId>,
    /// K fusion weight tensors, each `[M, L]`.
    pub fusion_weights: Vec<TensorId>,
}

/// Runs the adapter on one view's token stack. Parameters are shared
/// across views; `dropout_seed` must change per training step.
#[allow(clippy::too_many_arguments)]
pub fn hgfa_forward(
    tape: &mut Tape,
    tokens: &TokenStack,
    view: usize,
    params: &HgfaParams,
    bound: &Bound,
    cfg: &HgfaConfig,
    dropout_seed: u64,
    training: bool,
) -> ViewFeatures {
    assert_eq!(tokens.layers, cfg.layers, "token stack layer count");
    assert_eq!(tokens.channels, cfg.channels, "token stack channel count");
    assert_eq!(tokens.tokens, cfg.tokens(), "token stack token count");
    let mut maps = Vec::with_capacity(cfg.groups);
    let mut fusion_weights = Vec::with_capacity(cfg.groups);
    for k in 0..cfg.groups {
        let g = params.groups[k].bind(bound);
        let stack = tape.constant(group_stack(tokens, view, k, cfg));
        let (fused, weights) = gatf_fuse(tape, stack, &g);
        let seed = rng::mix(dropout_seed, (view * cfg.groups + k) as u64 + 1);
        let refined = tatr_refine(tape, fused, &g, cfg.dropout, seed, training);
        maps.push(lsfp_level(tape, refined, &g, cfg, k));
        fusion_weights.push(weights);
    }
    ViewFeatures {
        maps,
        fusion_weights,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check;
    use crate::scene::SyntheticScene;
    use crate::tokens::{generate_synthetic_tokens, TokenConfig};
    use rand::Rng;

    fn desk_cfg() -> HgfaConfig {
        HgfaConfig {
            layers: 8,
            groups: 4,
            layers_per_group: 2,
            channels: 32,
            patch_h: 8,
            patch_w: 8,
            expansion: vec![4.0, 3.0, 2.0, 1.5],
            hidden_dims: vec![96, 64, 48, 32],
            scales: vec![4.0, 2.0, 1.0, 0.5],
            out_channels: 32,
            se_reduction: 4,
            se_bypass: false,
            dropout: 0.1,
        }
    }

    fn tiny_cfg() -> HgfaConfig {
        HgfaConfig {
            layers: 2,
            groups: 1,
            layers_per_group: 2,
            channels: 8,
            patch_h: 2,
            patch_w: 2,
            expansion: vec![2.0],
            hidden_dims: vec![8],
            scales: vec![2.0],
            out_channels: 4,
            se_reduction: 4,
            se_bypass: false,
            dropout: 0.0,
        }
    }

    fn desk_tokens(cfg: &HgfaConfig) -> TokenStack {
        let scene = SyntheticScene {
            ground_height: Some(-1.0),
            ground_class: 0,
            boxes: vec![crate::scene::SceneBox {
                class: 1,
                min: [-2.5, -2.5, -1.0],
                max: [2.5, 2.5, 1.5],
            }],
        };
        let tc = TokenConfig {
            layers: cfg.layers,
            patch_h: cfg.patch_h,
            patch_w: cfg.patch_w,
            channels: cfg.channels,
            rays_per_side: 2,
            far_distance: 20.0,
            noise: 0.05,
        };
        let rig = crate::camera::CameraRig::orbit(2, [0.0, 0.0, 0.0], 10.0, 4.0, 60.0, 64.0, 64.0);
        let grid = crate::voxel::GridSpec::new([16, 16, 8], [-4.0, -4.0, -2.0], 0.5);
        generate_synthetic_tokens(&scene, &rig, &grid, &tc, 4, 77)
    }

    #[test]
    fn plans_cover_integer_and_halving_scales() {
        assert_eq!(resample_plan(1.0).unwrap(), ResamplePlan::Identity);
        assert_eq!(resample_plan(4.0).unwrap(), ResamplePlan::Upsample(4));
        assert_eq!(resample_plan(0.5).unwrap(), ResamplePlan::Downsample(1));
        assert_eq!(resample_plan(0.25).unwrap(), ResamplePlan::Downsample(2));
        assert!(resample_plan(1.5).is_err());
        assert!(resample_plan(0.3).is_err());
        assert!(resample_plan(0.0).is_err());
    }

    #[test]
    fn flattened_length_matches_square_law() {
        let cfg = desk_cfg();
        cfg.validate().unwrap();
        // L * sum(tau^2) = 64 * (16 + 4 + 1 + 0.25)
        assert_eq!(cfg.flattened_len(), 1360);
        assert_eq!(cfg.level_dims(0), (32, 32));
        assert_eq!(cfg.level_dims(3), (4, 4));
    }

    #[test]
    fn validation_rejects_inconsistent_grouping() {
        let mut cfg = desk_cfg();
        cfg.layers = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = desk_cfg();
        cfg.scales[1] = 3.5;
        assert!(cfg.validate().is_err());
        let mut cfg = desk_cfg();
        cfg.se_reduction = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = desk_cfg();
        cfg.hidden_dims[0] = 30;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fusion_weights_are_uniform_at_init_and_always_sum_to_one() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let params = init_hgfa_params(&mut store, &cfg, 3);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let g = params.groups[0].bind(&bound);
        let stack = tape.constant(Tensor::from_fn(vec![2, 4, 8], |i| {
            let (m, l, c) = (i / 32, (i / 8) % 4, i % 8);
            (m * 31 + l * 7 + c) as f64 * 0.1 - 1.0
        }));
        let (_, weights) = gatf_fuse(&mut tape, stack, &g);
        let w = tape.value(weights);
        for l in 0..4 {
            assert!((w.at2(0, l) - 0.5).abs() < 1e-15, "uniform at init");
            let total = w.at2(0, l) + w.at2(1, l);
            assert!((total - 1.0).abs() < 1e-12);
        }
        // randomize the scorer head: still a distribution per token
        let mut r = rng::stream(rng::stream_seed(5, rng::domain::SELFTEST, 31));
        for v in store.value_mut(params.groups[0].score_w2).data_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let g = params.groups[0].bind(&bound);
        let stack = tape.constant(Tensor::from_fn(vec![2, 4, 8], |i| {
            let (m, l, c) = (i / 32, (i / 8) % 4, i % 8);
            (m * 31 + l * 7 + c) as f64 * 0.1 - 1.0
        }));
        let (_, weights) = gatf_fuse(&mut tape, stack, &g);
        let w = tape.value(weights);
        for l in 0..4 {
            let total = w.at2(0, l) + w.at2(1, l);
            assert!((total - 1.0).abs() < 1e-12);
            assert!((w.at2(0, l) - 0.5).abs() > 1e-6, "head is live after randomizing");
        }
    }

    #[test]
    fn refinement_is_bitwise_identity_at_init() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let params = init_hgfa_params(&mut store, &cfg, 11);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let g = params.groups[0].bind(&bound);
        let x = tape.input(Tensor::from_fn(vec![4, 8], |i| i as f64 * 0.37 + 0.1));
        let y = tatr_refine(&mut tape, x, &g, cfg.dropout, 9, true);
        assert!(tape.value(y).bit_equal(tape.value(x)));
    }

    #[test]
    fn spatial_block_is_bitwise_identity_at_init() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let params = init_hgfa_params(&mut store, &cfg, 11);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let g = params.groups[0].bind(&bound);
        let x = tape.input(Tensor::from_fn(vec![2, 2, 8], |i| i as f64 * 0.21 - 1.3));
        let y = lsfp_spatial_block(&mut tape, x, &g, false);
        assert!(tape.value(y).bit_equal(tape.value(x)));
    }

    #[test]
    fn position_code_separates_rows_and_columns() {
        let pe = sinusoidal_pe_2d(4, 5, 8);
        assert_eq!(pe.shape(), &[4, 5, 8]);
        for v in pe.data() {
            assert!((-1.0..=1.0).contains(v));
        }
        // row half constant along x, column half constant along y
        for y in 0..4 {
            for x in 0..5 {
                for c in 0..4 {
                    assert_eq!(pe.at3(y, x, c), pe.at3(y, 0, c));
                    assert_eq!(pe.at3(y, x, c + 4), pe.at3(0, x, c + 4));
                }
            }
        }
        // zero position: sin -> 0, cos -> 1
        assert_eq!(pe.at3(0, 0, 0), 0.0);
        assert_eq!(pe.at3(0, 0, 1), 1.0);
        assert_eq!(pe.at3(0, 0, 4), 0.0);
        assert_eq!(pe.at3(0, 0, 5), 1.0);
    }

    #[test]
    fn forward_emits_pyramid_of_expected_shapes() {
        let cfg = desk_cfg();
        cfg.validate().unwrap();
        let tokens = desk_tokens(&cfg);
        let mut store = ParamStore::new();
        let params = init_hgfa_params(&mut store, &cfg, 21);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let out = hgfa_forward(&mut tape, &tokens, 0, &params, &bound, &cfg, 1, false);
        assert_eq!(out.maps.len(), 4);
        let want = [[32, 32], [16, 16], [8, 8], [4, 4]];
        let mut flat = 0;
        for (k, &m) in out.maps.iter().enumerate() {
            let s = tape.value(m).shape();
            assert_eq!(&s[..2], &want[k][..]);
            assert_eq!(s[2], cfg.out_channels);
            assert!(tape.value(m).all_finite());
            flat += s[0] * s[1];
        }
        assert_eq!(flat, cfg.flattened_len());
        for w in &out.fusion_weights {
            assert_eq!(tape.value(*w).shape(), &[2, 64]);
        }
    }

    #[test]
    fn forward_is_deterministic_across_runs() {
        let cfg = desk_cfg();
        let tokens = desk_tokens(&cfg);
        let mut store = ParamStore::new();
        let params = init_hgfa_params(&mut store, &cfg, 21);
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let out = hgfa_forward(&mut tape, &tokens, 1, &params, &bound, &cfg, 7, true);
            out.maps
                .iter()
                .map(|&m| tape.value(m).clone())
                .collect::<Vec<_>>()
        };
        let a = run(&store);
        let b = run(&store);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.bit_equal(y));
        }
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        // end to end through fuse + refine + level on a tiny config,
        // probing the token stack and a spread of parameters
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let params = init_hgfa_params(&mut store, &cfg, 13);
        // perturb the zero-initialized tensors so every path is live
        let mut r = rng::stream(rng::stream_seed(13, rng::domain::SELFTEST, 40));
        let all: Vec<ParamId> = store.ids().collect();
        for &p in &all {
            for v in store.value_mut(p).data_mut() {
                if *v == 0.0 {
                    *v = r.gen_range(-0.3..0.3);
                }
            }
        }
        let order = &params.groups[0];
        let param_tensors: Vec<Tensor> = all.iter().map(|&p| store.value(p).clone()).collect();
        let stack = check::random_tensor(vec![2, 4, 8], 1.0, &mut r);
        let mut inputs = vec![stack];
        inputs.extend(param_tensors);
        let cfg2 = cfg.clone();
        let groups = [GroupParamIds {
            score_w1: order.score_w1,
            score_b1: order.score_b1,
            score_w2: order.score_w2,
            score_b2: order.score_b2,
            ln_gain: order.ln_gain,
            ln_bias: order.ln_bias,
            ffn_w1: order.ffn_w1,
            ffn_b1: order.ffn_b1,
            ffn_w2: order.ffn_w2,
            ffn_b2: order.ffn_b2,
            dw: order.dw,
            pw: order.pw,
            se_w1: order.se_w1,
            se_b1: order.se_b1,
            se_w2: order.se_w2,
            se_b2: order.se_b2,
            proj_in_w: order.proj_in_w,
            proj_in_b: order.proj_in_b,
            resample: order.resample.clone(),
            proj_out_w: order.proj_out_w,
            proj_out_b: order.proj_out_b,
        }];
        let builder = move |tape: &mut Tape, ids: &[TensorId]| {
            // ids[0] is the stack; ids[1..] are parameters in store order,
            // which is exactly the order GroupParamIds registered them
            let g = GroupTensors {
                score_w1: ids[1 + groups[0].score_w1.index()],
                score_b1: ids[1 + groups[0].score_b1.index()],
                score_w2: ids[1 + groups[0].score_w2.index()],
                score_b2: ids[1 + groups[0].score_b2.index()],
                ln_gain: ids[1 + groups[0].ln_gain.index()],
                ln_bias: ids[1 + groups[0].ln_bias.index()],
                ffn_w1: ids[1 + groups[0].ffn_w1.index()],
                ffn_b1: ids[1 + groups[0].ffn_b1.index()],
                ffn_w2: ids[1 + groups[0].ffn_w2.index()],
                ffn_b2: ids[1 + groups[0].ffn_b2.index()],
                dw: ids[1 + groups[0].dw.index()],
                pw: ids[1 + groups[0].pw.index()],
                se_w1: ids[1 + groups[0].se_w1.index()],
                se_b1: ids[1 + groups[0].se_b1.index()],
                se_w2: ids[1 + groups[0].se_w2.index()],
                se_b2: ids[1 + groups[0].se_b2.index()],
                proj_in_w: ids[1 + groups[0].proj_in_w.index()],
                proj_in_b: ids[1 + groups[0].proj_in_b.index()],
                resample: groups[0].resample.iter().map(|p| ids[1 + p.index()]).collect(),
                proj_out_w: ids[1 + groups[0].proj_out_w.index()],
                proj_out_b: ids[1 + groups[0].proj_out_b.index()],
            };
            let (fused, _) = gatf_fuse(tape, ids[0], &g);
            let refined = tatr_refine(tape, fused, &g, 0.0, 1, false);
            let map = lsfp_level(tape, refined, &g, &cfg2, 0);
            let flat = {
                let n = tape.value(map).numel();
                tape.reshape(map, vec![n])
            };
            // random fixed projection to a scalar
            let probe = tape.constant(Tensor::from_fn(
                vec![tape.value(flat).numel()],
                |i| ((i * 2654435761) % 1000) as f64 / 500.0 - 1.0,
            ));
            let prod = tape.mul(flat, probe);
            tape.sum(prod)
        };
        let mut probe_rng = rng::stream(rng::stream_seed(13, rng::domain::SELFTEST, 41));
        check::assert_gradients_match(&builder, &inputs, Some(3), &mut probe_rng);
    }
}
