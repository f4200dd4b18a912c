//! Finite-difference verification of analytic gradients.
//!
//! The forward computation is treated as a black box `f: inputs -> scalar`
//! and rebuilt from scratch for every probe, so the comparison exercises
//! the same code path training uses.

use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use rand::Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error tolerance for a passing comparison.
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor; below this magnitude errors are measured absolutely.
pub const FD_FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs())).max(FD_FLOOR)
}

/// Worst element found while comparing one input's gradient.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Builder contract: consume the input ids in order and return a scalar
/// loss id on the same tape. Must be a pure function of the input values.
pub trait LossBuilder {
    fn build(&self, tape: &mut Tape, inputs: &[TensorId]) -> TensorId;
}

impl<F: Fn(&mut Tape, &[TensorId]) -> TensorId> LossBuilder for F {
    fn build(&self, tape: &mut Tape, inputs: &[TensorId]) -> TensorId {
        self(tape, inputs)
    }
}

fn eval(builder: &impl LossBuilder, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = builder.build(&mut tape, &ids);
    tape.value(loss).item()
}

/// Compares analytic gradients of `builder` against central differences at
/// the given inputs. `probes_per_input` limits how many elements are
/// perturbed per input (chosen with `rng`); `None` checks every element.
/// Returns the worst comparison over everything probed.
pub fn check_gradients(
    builder: &impl LossBuilder,
    inputs: &[Tensor],
    probes_per_input: Option<usize>,
    rng: &mut impl Rng,
) -> GradCheck {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = builder.build(&mut tape, &ids);
    assert!(
        tape.value(loss).is_scalar(),
        "gradient check needs a scalar loss"
    );
    let grads = tape.backward(loss);

    let mut worst = GradCheck {
        input: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel_err: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[ii])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let n = input.numel();
        let elements: Vec<usize> = match probes_per_input {
            Some(k) if k < n => {
                let mut picked: Vec<usize> = (0..k).map(|_| rng.gen_range(0..n)).collect();
                picked.sort_unstable();
                picked.dedup();
                picked
            }
            _ => (0..n).collect(),
        };
        for e in elements {
            let orig = work[ii].data()[e];
            work[ii].data_mut()[e] = orig + FD_STEP;
            let plus = eval(builder, &work);
            work[ii].data_mut()[e] = orig - FD_STEP;
            let minus = eval(builder, &work);
            work[ii].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.data()[e];
            let err = rel_err(a, numeric);
            if err > worst.rel_err {
                worst = GradCheck {
                    input: ii,
                    element: e,
                    analytic: a,
                    numeric,
                    rel_err: err,
                };
            }
        }
    }
    worst
}

/// Panicking wrapper for unit tests.
pub fn assert_gradients_match(
    builder: &impl LossBuilder,
    inputs: &[Tensor],
    probes_per_input: Option<usize>,
    rng: &mut impl Rng,
) {
    let worst = check_gradients(builder, inputs, probes_per_input, rng);
    assert!(
        worst.rel_err < FD_TOL,
        "gradient mismatch: input {} element {} analytic {:.9e} numeric {:.9e} rel_err {:.3e}",
        worst.input,
        worst.element,
        worst.analytic,
        worst.numeric,
        worst.rel_err
    );
}

/// Random tensor with entries uniform in [-range, range].
pub fn random_tensor(shape: Vec<usize>, range: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-range..range))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn test_rng(salt: u64) -> impl Rng {
        rng::stream(rng::stream_seed(42, rng::domain::SELFTEST, salt))
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // y = sum(2x) but pretend dy/dx = 1 by building sum(x) for the
        // numeric probes via a deliberately inconsistent builder: instead,
        // simplest is to compare an op against a constant-offset loss and
        // confirm the checker reports a mismatch.
        struct Bad;
        impl LossBuilder for Bad {
            fn build(&self, tape: &mut Tape, inputs: &[TensorId]) -> TensorId {
                // analytic path sees scale-by-2, numeric path sees the
                // same; corrupt instead by routing through a stop-gradient
                // (constant) for half the contribution.
                let doubled = tape.scale(inputs[0], 2.0);
                let frozen = tape.constant(tape.value(inputs[0]).clone());
                let s1 = tape.sum(doubled);
                let s2 = tape.sum(frozen);
                tape.add(s1, s2)
            }
        }
        let mut r = test_rng(0);
        let x = random_tensor(vec![4], 1.0, &mut r);
        let worst = check_gradients(&Bad, &[x], None, &mut r);
        // numeric sees d/dx = 3, analytic sees 2
        assert!(worst.rel_err > 0.3);
    }

    #[test]
    fn elementwise_chain_passes() {
        let builder = |tape: &mut Tape, inputs: &[TensorId]| {
            let g = tape.gelu(inputs[0]);
            let s = tape.sigmoid(g);
            let t = tape.tanh(s);
            tape.sum(t)
        };
        let mut r = test_rng(1);
        let x = random_tensor(vec![3, 5], 2.0, &mut r);
        assert_gradients_match(&builder, &[x], None, &mut r);
    }
}
