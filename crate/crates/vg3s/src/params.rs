//! Named trainable parameters, their optimizer state, and tape binding.

use crate::rng;
use crate::tape::{Gradients, Tape, TensorId};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in registration order; stable for a given build recipe.
    pub fn index(&self) -> usize {
        self.0
    }
}

struct Entry {
    name: String,
    value: Tensor,
    /// Adam first and second moments, same length as the value.
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Registration order is the canonical parameter order; checkpoints and
/// tape bindings both follow it.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name '{}'",
            name
        );
        let n = value.numel();
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Copies every parameter onto a tape as a differentiable input.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            ids: self
                .entries
                .iter()
                .map(|e| tape.input(e.value.clone()))
                .collect(),
        }
    }

    /// Copies every parameter onto a tape as a constant (evaluation).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            ids: self
                .entries
                .iter()
                .map(|e| tape.constant(e.value.clone()))
                .collect(),
        }
    }

    /// Optimizer-state accessors for checkpointing.
    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        let e = &self.entries[id.0];
        (&e.m, &e.v)
    }

    pub fn set_moments(&mut self, id: ParamId, m: Vec<f64>, v: Vec<f64>) {
        let e = &mut self.entries[id.0];
        assert_eq!(m.len(), e.value.numel(), "moment length mismatch");
        assert_eq!(v.len(), e.value.numel(), "moment length mismatch");
        e.m = m;
        e.v = v;
    }
}

/// Tape ids of one binding of a store, indexed by `ParamId`.
pub struct Bound {
    ids: Vec<TensorId>,
}

impl Bound {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }
}

/// Adam with bias correction. Step count lives here so a checkpoint can
/// restore the exact schedule position.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }
}

impl Adam {
    /// One update over all parameters. Parameters without a gradient
    /// (unused in this step's graph) still advance their moments with a
    /// zero gradient so that resume stays bit-exact regardless of usage.
    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..store.entries.len() {
            let gid = bound.ids[i];
            let entry = &mut store.entries[i];
            let zero;
            let g: &[f64] = match grads.get(gid) {
                Some(t) => t.data(),
                None => {
                    zero = vec![0.0; entry.value.numel()];
                    &zero
                }
            };
            for (j, gj) in g.iter().enumerate() {
                entry.m[j] = self.beta1 * entry.m[j] + (1.0 - self.beta1) * gj;
                entry.v[j] = self.beta2 * entry.v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = entry.m[j] / bc1;
                let vhat = entry.v[j] / bc2;
                entry.value.data_mut()[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Uniform Glorot init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
/// Each parameter draws from its own stream keyed by name, so adding or
/// reordering registrations does not change other parameters' values.
pub fn glorot(shape: Vec<usize>, fan_in: usize, fan_out: usize, run_seed: u64, name: &str) -> Tensor {
    assert!(fan_in + fan_out > 0, "glorot: zero fan");
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut r = rng::stream(rng::stream_seed(
        run_seed,
        rng::domain::PARAM_INIT,
        rng::name_tag(name),
    ));
    Tensor::from_fn(shape, |_| r.gen_range(-a..a))
}
