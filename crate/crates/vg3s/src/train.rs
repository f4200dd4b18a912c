//! Training session: model assembly, the warm-up/cosine schedule, the
//! per-step forward/backward/update cycle, and checkpointing that
//! restores bit-identical state.

use crate::config::RunConfig;
use crate::decoder::{decode, init_decoder_params, DecoderParams, GaussianTensors};
use crate::fileio::{
    check_magic, read_f64_vec, read_u32, read_u64, write_f64_slice, write_u32, write_u64,
    FormatError,
};
use crate::gaussians::{lattice_init, GaussianSet};
use crate::hgfa::{hgfa_forward, init_hgfa_params, HgfaParams, ViewFeatures};
use crate::params::{Adam, Bound, ParamId, ParamStore};
use crate::rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use crate::tokens::TokenStack;
use crate::voxel::{LabelGrid, EMPTY_LABEL};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VG3SCKP1";

/// Linear warm-up from zero over `warmup` steps, then a cosine decay to
/// zero across the remainder.
pub fn lr_at(step: usize, steps: usize, warmup: usize, peak: f64) -> f64 {
    assert!(step < steps, "step {} outside schedule of {}", step, steps);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if steps == warmup {
        return peak;
    }
    let phase = (step - warmup) as f64 / (steps - warmup) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
}

/// Learnable initial gaussian state; scales live in log space so the
/// optimizer cannot push them negative.
pub struct InitParams {
    pub positions: ParamId,
    pub log_scales: ParamId,
    pub rotations: ParamId,
    pub opacity_logits: ParamId,
    pub class_logits: ParamId,
}

pub struct Model {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub hgfa: HgfaParams,
    pub decoder: DecoderParams,
    /// Present when `learn_init` is set.
    pub init: Option<InitParams>,
    /// The lattice initialization; the live state when init is frozen.
    pub seed_set: GaussianSet,
}

impl Model {
    pub fn build(cfg: &RunConfig) -> Self {
        let mut store = ParamStore::new();
        let hcfg = cfg.hgfa_config();
        let dcfg = cfg.decoder_config();
        let hgfa = init_hgfa_params(&mut store, &hcfg, cfg.run_seed);
        let decoder = init_decoder_params(&mut store, &dcfg, cfg.run_seed);
        let seed_set = lattice_init(
            &cfg.grid_spec(),
            cfg.gaussians,
            cfg.classes,
            cfg.init_scale,
            cfg.init_opacity,
            cfg.run_seed,
        );
        let init = cfg.learn_init.then(|| {
            let j = seed_set.count;
            let logs: Vec<f64> = seed_set.scales.iter().map(|s| s.ln()).collect();
            InitParams {
                positions: store.register(
                    "init.positions",
                    Tensor::new(vec![j, 3], seed_set.positions.clone()),
                ),
                log_scales: store.register("init.log_scales", Tensor::new(vec![j, 3], logs)),
                rotations: store.register(
                    "init.rotations",
                    Tensor::new(vec![j, 4], seed_set.rotations.clone()),
                ),
                opacity_logits: store.register(
                    "init.opacity_logits",
                    Tensor::new(vec![j], seed_set.opacity_logits.clone()),
                ),
                class_logits: store.register(
                    "init.class_logits",
                    Tensor::new(vec![j, cfg.classes], seed_set.class_logits.clone()),
                ),
            }
        });
        Self {
            cfg: cfg.clone(),
            store,
            hgfa,
            decoder,
            init,
            seed_set,
        }
    }

    /// The gaussian state entering the decoder. Learned init is clamped
    /// back into the volume and scale bounds on the tape; a frozen init
    /// enters as constants.
    pub fn initial_state(&self, tape: &mut Tape, bound: &Bound) -> GaussianTensors {
        match &self.init {
            Some(init) => {
                let spec = self.cfg.grid_spec();
                let positions = tape.col_clamp(
                    bound.id(init.positions),
                    &spec.origin,
                    &spec.max_corner(),
                );
                let raw = tape.exp(bound.id(init.log_scales));
                let scales = tape.col_clamp(
                    raw,
                    &[self.cfg.scale_min(); 3],
                    &[self.cfg.scale_max(); 3],
                );
                GaussianTensors {
                    positions,
                    scales,
                    rotations: bound.id(init.rotations),
                    opacity_logits: bound.id(init.opacity_logits),
                    class_logits: bound.id(init.class_logits),
                }
            }
            None => {
                let s = &self.seed_set;
                let j = s.count;
                GaussianTensors {
                    positions: tape.constant(Tensor::new(vec![j, 3], s.positions.clone())),
                    scales: tape.constant(Tensor::new(vec![j, 3], s.scales.clone())),
                    rotations: tape.constant(Tensor::new(vec![j, 4], s.rotations.clone())),
                    opacity_logits: tape.constant(Tensor::new(vec![j], s.opacity_logits.clone())),
                    class_logits: tape
                        .constant(Tensor::new(vec![j, s.classes], s.class_logits.clone())),
                }
            }
        }
    }
}

/// Per-voxel target outcome indices: semantic labels stay themselves,
/// empty maps to index `classes`.
pub fn grid_targets(labels: &LabelGrid) -> Vec<usize> {
    labels
        .labels
        .iter()
        .map(|&l| {
            if l == EMPTY_LABEL {
                labels.classes
            } else {
                l as usize
            }
        })
        .collect()
}

pub struct ForwardArtifacts {
    pub total: TensorId,
    pub ce: TensorId,
    pub lovasz: TensorId,
    /// `[V, classes + 1]` per-voxel outcome distribution.
    pub prediction: TensorId,
    pub state: GaussianTensors,
    pub features: Vec<ViewFeatures>,
}

/// One full differentiable pass: adapter on every view, decode, splat,
/// loss against the rasterized scene.
pub fn forward_loss(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    tokens: &TokenStack,
    targets: &[usize],
    step: usize,
    training: bool,
) -> ForwardArtifacts {
    let cfg = &model.cfg;
    let hcfg = cfg.hgfa_config();
    let dcfg = cfg.decoder_config();
    let rig = cfg.rig();
    let grid = cfg.grid_spec();
    let dropout_seed = rng::stream_seed(cfg.run_seed, rng::domain::DROPOUT, step as u64);
    let features: Vec<ViewFeatures> = (0..cfg.views)
        .map(|v| {
            hgfa_forward(
                tape,
                tokens,
                v,
                &model.hgfa,
                bound,
                &hcfg,
                dropout_seed,
                training,
            )
        })
        .collect();
    let init = model.initial_state(tape, bound);
    let state = decode(
        tape,
        init,
        &features,
        &rig,
        &model.decoder,
        bound,
        &dcfg,
        &grid,
    );
    let prediction = tape.splat_distribution(
        state.positions,
        state.scales,
        state.rotations,
        state.opacity_logits,
        state.class_logits,
        &grid,
        cfg.kappa,
    );
    let (total, ce, lovasz) = tape.total_loss(prediction, targets, &cfg.loss_config());
    ForwardArtifacts {
        total,
        ce,
        lovasz,
        prediction,
        state,
        features,
    }
}

pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub ce: f64,
    pub lovasz: f64,
}

pub struct TrainSession {
    pub model: Model,
    pub adam: Adam,
    /// Next step index to execute; equals `cfg.steps` when finished.
    pub next_step: usize,
}

impl TrainSession {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            model: Model::build(cfg),
            adam: Adam::default(),
            next_step: 0,
        }
    }

    /// Runs up to `limit` steps (all remaining when `None`), reporting
    /// a formatted line per `log_every` through `sink`. Aborts with the
    /// first non-finite node when the loss stops being a number.
    pub fn run(
        &mut self,
        tokens: &TokenStack,
        targets: &[usize],
        limit: Option<usize>,
        sink: &mut dyn FnMut(&str),
    ) -> Result<Vec<StepStats>, String> {
        let cfg = self.model.cfg.clone();
        let end = match limit {
            Some(n) => (self.next_step + n).min(cfg.steps),
            None => cfg.steps,
        };
        let mut stats = Vec::new();
        while self.next_step < end {
            let step = self.next_step;
            let lr = lr_at(step, cfg.steps, cfg.warmup, cfg.peak_lr);
            let mut tape = Tape::new();
            let bound = self.model.store.bind(&mut tape);
            let art = forward_loss(&mut tape, &self.model, &bound, tokens, targets, step, true);
            let total = tape.value(art.total).item();
            if !total.is_finite() {
                let culprit = tape
                    .first_non_finite()
                    .map(|(id, op)| format!("node {} (op '{}')", id.index(), op))
                    .unwrap_or_else(|| "loss node".to_string());
                return Err(format!(
                    "step {}: loss is not finite, first offender: {}",
                    step, culprit
                ));
            }
            let grads = tape.backward(art.total);
            self.adam.step(&mut self.model.store, &bound, &grads, lr);
            let s = StepStats {
                step,
                lr,
                total,
                ce: tape.value(art.ce).item(),
                lovasz: tape.value(art.lovasz).item(),
            };
            if step % cfg.log_every == 0 || step + 1 == cfg.steps {
                sink(&format!(
                    "step {:>5} lr {:.12e} loss {:.12e} ce {:.12e} lovasz {:.12e}",
                    s.step, s.lr, s.total, s.ce, s.lovasz
                ));
            }
            stats.push(s);
            self.next_step += 1;
        }
        Ok(stats)
    }

    /// Serializes parameters, optimizer moments and counters.
    pub fn save(&self, path: &Path) -> Result<(), String> {
        let io = |e: std::io::Error| format!("cannot write {}: {}", path.display(), e);
        let file = std::fs::File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u64(w, self.model.cfg.run_seed)?;
        write_u64(w, self.adam.t)?;
        write_u32(w, self.next_step as u32)?;
        let ids: Vec<ParamId> = self.model.store.ids().collect();
        write_u32(w, ids.len() as u32)?;
        for id in ids {
            let name = self.model.store.name(id).as_bytes();
            write_u32(w, name.len() as u32)?;
            w.write_all(name)?;
            let value = self.model.store.value(id);
            write_u32(w, value.shape().len() as u32)?;
            for &d in value.shape() {
                write_u64(w, d as u64)?;
            }
            write_f64_slice(w, value.data())?;
            let (m, v) = self.model.store.moments(id);
            write_f64_slice(w, m)?;
            write_f64_slice(w, v)?;
        }
        Ok(())
    }

    /// Rebuilds the model from `cfg` and overwrites every parameter and
    /// moment from the checkpoint. The checkpoint must cover exactly the
    /// parameters the config produces, with matching shapes and seed.
    pub fn resume(cfg: &RunConfig, path: &Path) -> Result<Self, String> {
        let file = std::fs::File::open(path)
            .map_err(|e| format!("cannot open {}: {}", path.display(), e))?;
        let mut r = BufReader::new(file);
        let mut session = Self::new(cfg);
        session
            .read_from(&mut r)
            .map_err(|e| format!("{}: {}", path.display(), e))?;
        Ok(session)
    }

    fn read_from(&mut self, r: &mut impl Read) -> Result<(), FormatError> {
        check_magic(r, CHECKPOINT_MAGIC)?;
        let seed = read_u64(r, "checkpoint seed")?;
        if seed != self.model.cfg.run_seed {
            return Err(FormatError::Inconsistent(format!(
                "checkpoint was written with run_seed {}, config has {}",
                seed, self.model.cfg.run_seed
            )));
        }
        self.adam.t = read_u64(r, "optimizer step count")?;
        self.next_step = read_u32(r, "next step")? as usize;
        let count = read_u32(r, "parameter count")? as usize;
        let expected = self.model.store.ids().count();
        if count != expected {
            return Err(FormatError::Inconsistent(format!(
                "checkpoint has {} parameters, model has {}",
                count, expected
            )));
        }
        for _ in 0..count {
            let name_len = read_u32(r, "parameter name length")? as usize;
            if name_len > 4096 {
                return Err(FormatError::Inconsistent(
                    "parameter name longer than 4096 bytes".into(),
                ));
            }
            let mut buf = vec![0u8; name_len];
            crate::fileio::read_exact(r, &mut buf, "parameter name")?;
            let name = String::from_utf8(buf)
                .map_err(|_| FormatError::Inconsistent("parameter name is not utf-8".into()))?;
            let id = self.model.store.find(&name).ok_or_else(|| {
                FormatError::Inconsistent(format!("unknown parameter '{}' in checkpoint", name))
            })?;
            let rank = read_u32(r, "parameter rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r, "parameter extent")? as usize);
            }
            if shape != self.model.store.value(id).shape() {
                return Err(FormatError::Inconsistent(format!(
                    "parameter '{}' has shape {:?} in checkpoint, {:?} in model",
                    name,
                    shape,
                    self.model.store.value(id).shape()
                )));
            }
            let n = self.model.store.value(id).numel();
            let data = read_f64_vec(r, n, "parameter values")?;
            let m = read_f64_vec(r, n, "first moments")?;
            let v = read_f64_vec(r, n, "second moments")?;
            *self.model.store.value_mut(id) = Tensor::new(shape, data);
            self.model.store.set_moments(id, m, v);
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(FormatError::Io)? != 0 {
            return Err(FormatError::Inconsistent(
                "trailing bytes after last parameter".into(),
            ));
        }
        Ok(())
    }
}
