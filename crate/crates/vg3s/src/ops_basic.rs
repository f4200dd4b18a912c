//! Elementwise, linear-algebra, and shape operations on the tape.

use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

pub(crate) fn mat_mul_raw(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn assert_same_shape(tape: &Tape, op: &str, a: TensorId, b: TensorId) {
    assert_eq!(
        tape.value(a).shape(),
        tape.value(b).shape(),
        "{}: operand shapes differ",
        op
    );
}

impl Tape {
    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_same_shape(self, "add", a, b);
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        );
        self.push_op("add", value, vec![a, b], move |_, up| {
            vec![up.clone(), up.clone()]
        })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_same_shape(self, "sub", a, b);
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x - y)
                .collect(),
        );
        self.push_op("sub", value, vec![a, b], move |_, up| {
            let neg = Tensor::new(
                up.shape().to_vec(),
                up.data().iter().map(|g| -g).collect(),
            );
            vec![up.clone(), neg]
        })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_same_shape(self, "mul", a, b);
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        );
        self.push_op("mul", value, vec![a, b], move |tape, up| {
            let ga = Tensor::new(
                up.shape().to_vec(),
                up.data()
                    .iter()
                    .zip(tape.value(b).data())
                    .map(|(g, y)| g * y)
                    .collect(),
            );
            let gb = Tensor::new(
                up.shape().to_vec(),
                up.data()
                    .iter()
                    .zip(tape.value(a).data())
                    .map(|(g, x)| g * x)
                    .collect(),
            );
            vec![ga, gb]
        })
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|v| v * factor).collect(),
        );
        self.push_op("scale", value, vec![x], move |_, up| {
            vec![Tensor::new(
                up.shape().to_vec(),
                up.data().iter().map(|g| g * factor).collect(),
            )]
        })
    }

    /// Adds a `[D]` bias to every row of an `[..., D]` tensor.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> TensorId {
        let xs = self.value(x).shape().to_vec();
        let d = *xs.last().expect("add_bias: operand must have rank >= 1");
        assert_eq!(
            self.value(bias).shape(),
            &[d],
            "add_bias: bias shape {:?} does not match last axis {}",
            self.value(bias).shape(),
            d
        );
        let bdata = self.value(bias).data().to_vec();
        let value = Tensor::new(
            xs,
            self.value(x)
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + bdata[i % d])
                .collect(),
        );
        self.push_op("add_bias", value, vec![x, bias], move |_, up| {
            let mut gb = vec![0.0; d];
            for (i, g) in up.data().iter().enumerate() {
                gb[i % d] += g;
            }
            vec![up.clone(), Tensor::from_vec(gb)]
        })
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = {
            let s = self.value(a).shape();
            assert_eq!(s.len(), 2, "matmul: left operand must be rank 2");
            (s[0], s[1])
        };
        let (k2, n) = {
            let s = self.value(b).shape();
            assert_eq!(s.len(), 2, "matmul: right operand must be rank 2");
            (s[0], s[1])
        };
        assert_eq!(k, k2, "matmul: inner dimensions {} and {} differ", k, k2);
        let value = Tensor::new(
            vec![m, n],
            mat_mul_raw(m, k, n, self.value(a).data(), self.value(b).data()),
        );
        self.push_op("matmul", value, vec![a, b], move |tape, up| {
            let bt = transpose_raw(k, n, tape.value(b).data());
            let ga = mat_mul_raw(m, n, k, up.data(), &bt);
            let at = transpose_raw(m, k, tape.value(a).data());
            let gb = mat_mul_raw(k, m, n, &at, up.data());
            vec![
                Tensor::new(vec![m, k], ga),
                Tensor::new(vec![k, n], gb),
            ]
        })
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let shape = self.value(x).shape().to_vec();
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push_op("sum", value, vec![x], move |_, up| {
            vec![Tensor::filled(shape.clone(), up.item())]
        })
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let shape = self.value(x).shape().to_vec();
        let n = self.value(x).numel() as f64;
        let value = Tensor::scalar(self.value(x).data().iter().sum::<f64>() / n);
        self.push_op("mean", value, vec![x], move |_, up| {
            vec![Tensor::filled(shape.clone(), up.item() / n)]
        })
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> TensorId {
        let old = self.value(x).shape().to_vec();
        let value = self.value(x).clone().reshaped(shape);
        self.push_op("reshape", value, vec![x], move |_, up| {
            vec![up.clone().reshaped(old.clone())]
        })
    }

    /// Stacks `[L_i, D]` blocks vertically into `[sum(L_i), D]`.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_rows: no operands");
        let d = self.value(parts[0]).extent(1);
        let mut rows = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rank(), 2, "concat_rows: operands must be rank 2");
            assert_eq!(t.extent(1), d, "concat_rows: column counts differ");
            rows.push(t.extent(0));
            data.extend_from_slice(t.data());
        }
        let total: usize = rows.iter().sum();
        let value = Tensor::new(vec![total, d], data);
        self.push_op("concat_rows", value, parts.to_vec(), move |_, up| {
            let mut out = Vec::with_capacity(rows.len());
            let mut offset = 0;
            for &r in &rows {
                let chunk = up.data()[offset * d..(offset + r) * d].to_vec();
                out.push(Tensor::new(vec![r, d], chunk));
                offset += r;
            }
            out
        })
    }

    /// Stacks `[R, C_i]` blocks side by side into `[R, sum(C_i)]`.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_cols: no operands");
        let r = self.value(parts[0]).extent(0);
        let mut cols = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rank(), 2, "concat_cols: operands must be rank 2");
            assert_eq!(t.extent(0), r, "concat_cols: row counts differ");
            cols.push(t.extent(1));
        }
        let total: usize = cols.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &c) in parts.iter().zip(&cols) {
            let src = self.value(p).data();
            for row in 0..r {
                data[row * total + offset..row * total + offset + c]
                    .copy_from_slice(&src[row * c..(row + 1) * c]);
            }
            offset += c;
        }
        let value = Tensor::new(vec![r, total], data);
        self.push_op("concat_cols", value, parts.to_vec(), move |_, up| {
            let mut out = Vec::with_capacity(cols.len());
            let mut offset = 0;
            for &c in &cols {
                let mut g = vec![0.0; r * c];
                for row in 0..r {
                    g[row * c..(row + 1) * c].copy_from_slice(
                        &up.data()[row * total + offset..row * total + offset + c],
                    );
                }
                out.push(Tensor::new(vec![r, c], g));
                offset += c;
            }
            out
        })
    }

    /// Columns `lo..hi` of a `[R, C]` tensor.
    pub fn slice_cols(&mut self, x: TensorId, lo: usize, hi: usize) -> TensorId {
        let (r, c) = {
            let s = self.value(x).shape();
            assert_eq!(s.len(), 2, "slice_cols: operand must be rank 2");
            (s[0], s[1])
        };
        assert!(lo < hi && hi <= c, "slice_cols: range {}..{} outside 0..{}", lo, hi, c);
        let w = hi - lo;
        let mut data = Vec::with_capacity(r * w);
        for row in 0..r {
            data.extend_from_slice(&self.value(x).data()[row * c + lo..row * c + hi]);
        }
        let value = Tensor::new(vec![r, w], data);
        self.push_op("slice_cols", value, vec![x], move |_, up| {
            let mut g = vec![0.0; r * c];
            for row in 0..r {
                g[row * c + lo..row * c + hi]
                    .copy_from_slice(&up.data()[row * w..(row + 1) * w]);
            }
            vec![Tensor::new(vec![r, c], g)]
        })
    }

    /// Gaussian-CDF form: 0.5 x (1 + erf(x / sqrt(2))).
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|&v| gelu_val(v)).collect(),
        );
        self.push_op("gelu", value, vec![x], move |tape, up| {
            vec![Tensor::new(
                up.shape().to_vec(),
                up.data()
                    .iter()
                    .zip(tape.value(x).data())
                    .map(|(g, &v)| g * gelu_grad(v))
                    .collect(),
            )]
        })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|&v| sigmoid_val(v)).collect(),
        );
        let y = value.clone();
        self.push_op("sigmoid", value, vec![x], move |_, up| {
            vec![Tensor::new(
                up.shape().to_vec(),
                up.data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, &s)| g * s * (1.0 - s))
                    .collect(),
            )]
        })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|&v| v.max(0.0)).collect(),
        );
        self.push_op("relu", value, vec![x], move |tape, up| {
            vec![Tensor::new(
                up.shape().to_vec(),
                up.data()
                    .iter()
                    .zip(tape.value(x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            )]
        })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|v| v.tanh()).collect(),
        );
        let y = value.clone();
        self.push_op("tanh", value, vec![x], move |_, up| {
            vec![Tensor::new(
                up.shape().to_vec(),
                up.data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, &t)| g * (1.0 - t * t))
                    .collect(),
            )]
        })
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|v| v.exp()).collect(),
        );
        let y = value.clone();
        self.push_op("exp", value, vec![x], move |_, up| {
            vec![Tensor::new(
                up.shape().to_vec(),
                up.data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, &e)| g * e)
                    .collect(),
            )]
        })
    }

    pub fn ln(&mut self, x: TensorId) -> TensorId {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|v| v.ln()).collect(),
        );
        self.push_op("ln", value, vec![x], move |tape, up| {
            vec![Tensor::new(
                up.shape().to_vec(),
                up.data()
                    .iter()
                    .zip(tape.value(x).data())
                    .map(|(g, &v)| g / v)
                    .collect(),
            )]
        })
    }

    /// Multiplies row r of a `[R, C]` tensor by the constant `weights[r]`.
    pub fn row_scale_const(&mut self, x: TensorId, weights: &[f64]) -> TensorId {
        let (r, c) = {
            let s = self.value(x).shape();
            assert_eq!(s.len(), 2, "row_scale_const: operand must be rank 2");
            (s[0], s[1])
        };
        assert_eq!(weights.len(), r, "row_scale_const: weight count != rows");
        let w = weights.to_vec();
        let value = Tensor::new(
            vec![r, c],
            self.value(x)
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * w[i / c])
                .collect(),
        );
        self.push_op("row_scale_const", value, vec![x], move |_, up| {
            vec![Tensor::new(
                vec![r, c],
                up.data()
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * w[i / c])
                    .collect(),
            )]
        })
    }

    /// Per-column affine map with constant coefficients:
    /// `y[r, c] = x[r, c] * scale[c] + shift[c]`.
    pub fn col_affine(&mut self, x: TensorId, scale: &[f64], shift: &[f64]) -> TensorId {
        let (r, c) = {
            let s = self.value(x).shape();
            assert_eq!(s.len(), 2, "col_affine: operand must be rank 2");
            (s[0], s[1])
        };
        assert_eq!(scale.len(), c, "col_affine: scale count != columns");
        assert_eq!(shift.len(), c, "col_affine: shift count != columns");
        let sc = scale.to_vec();
        let sh = shift.to_vec();
        let value = Tensor::new(
            vec![r, c],
            self.value(x)
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * sc[i % c] + sh[i % c])
                .collect(),
        );
        self.push_op("col_affine", value, vec![x], move |_, up| {
            vec![Tensor::new(
                vec![r, c],
                up.data()
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * sc[i % c])
                    .collect(),
            )]
        })
    }

    /// Clamps each column to `[lo[c], hi[c]]`. Gradient passes only where
    /// the input is strictly inside its interval.
    pub fn col_clamp(&mut self, x: TensorId, lo: &[f64], hi: &[f64]) -> TensorId {
        let (r, c) = {
            let s = self.value(x).shape();
            assert_eq!(s.len(), 2, "col_clamp: operand must be rank 2");
            (s[0], s[1])
        };
        assert_eq!(lo.len(), c, "col_clamp: lo count != columns");
        assert_eq!(hi.len(), c, "col_clamp: hi count != columns");
        for (l, h) in lo.iter().zip(hi) {
            assert!(l <= h, "col_clamp: empty interval [{}, {}]", l, h);
        }
        let lo = lo.to_vec();
        let hi = hi.to_vec();
        let value = Tensor::new(
            vec![r, c],
            self.value(x)
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v.clamp(lo[i % c], hi[i % c]))
                .collect(),
        );
        self.push_op("col_clamp", value, vec![x], move |tape, up| {
            vec![Tensor::new(
                vec![r, c],
                up.data()
                    .iter()
                    .zip(tape.value(x).data())
                    .enumerate()
                    .map(|(i, (g, &v))| {
                        if v > lo[i % c] && v < hi[i % c] {
                            *g
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )]
        })
    }

    /// Scales each row of `[R, C]` to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: TensorId) -> TensorId {
        let (r, c) = {
            let s = self.value(x).shape();
            assert_eq!(s.len(), 2, "normalize_rows: operand must be rank 2");
            (s[0], s[1])
        };
        let mut data = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for row in 0..r {
            let src = &self.value(x).data()[row * c..(row + 1) * c];
            let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 0.0, "normalize_rows: zero-norm row {}", row);
            norms[row] = norm;
            for (d, s) in data[row * c..(row + 1) * c].iter_mut().zip(src) {
                *d = s / norm;
            }
        }
        let value = Tensor::new(vec![r, c], data);
        let y = value.clone();
        self.push_op("normalize_rows", value, vec![x], move |_, up| {
            let mut g = vec![0.0; r * c];
            for row in 0..r {
                let u = &up.data()[row * c..(row + 1) * c];
                let yv = &y.data()[row * c..(row + 1) * c];
                let dot: f64 = u.iter().zip(yv).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    g[row * c + j] = (u[j] - dot * yv[j]) / norms[row];
                }
            }
            vec![Tensor::new(vec![r, c], g)]
        })
    }

    /// Inverted dropout. The mask is a pure function of `(seed, node id)`,
    /// so replaying a step reproduces it exactly. With `training == false`
    /// or `p == 0` the input id is returned unchanged.
    pub fn dropout(&mut self, x: TensorId, p: f64, seed: u64, training: bool) -> TensorId {
        assert!((0.0..1.0).contains(&p), "dropout: p must be in [0, 1)");
        if !training || p == 0.0 {
            return x;
        }
        use rand::Rng;
        let mut rng = crate::rng::stream(crate::rng::mix(seed, x.index() as u64));
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .zip(&mask)
                .map(|(v, m)| v * m)
                .collect(),
        );
        self.push_op("dropout", value, vec![x], move |_, up| {
            vec![Tensor::new(
                up.shape().to_vec(),
                up.data().iter().zip(&mask).map(|(g, m)| g * m).collect(),
            )]
        })
    }
}

pub(crate) fn sigmoid_val(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_grad(tape: &Tape, loss: TensorId, x: TensorId) -> Vec<f64> {
        tape.backward(loss).expect(x).data().to_vec()
    }

    #[test]
    fn matmul_values_and_grads() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.input(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let y = tape.matmul(a, b);
        assert_eq!(tape.value(y).data(), &[19.0, 22.0, 43.0, 50.0]);
        let loss = tape.sum(y);
        let grads = tape.backward(loss);
        // d(sum(AB))/dA = ones * B^T
        assert_eq!(grads.expect(a).data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.expect(b).data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    #[should_panic(expected = "inner dimensions")]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(vec![2, 3]));
        let b = tape.input(Tensor::zeros(vec![2, 2]));
        tape.matmul(a, b);
    }

    #[test]
    fn activation_fixed_points() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![0.0]));
        let s = tape.sigmoid(x);
        let g = tape.gelu(x);
        let t = tape.tanh(x);
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert_eq!(tape.value(g).data()[0], 0.0);
        assert_eq!(tape.value(t).data()[0], 0.0);
    }

    #[test]
    fn gelu_matches_gaussian_cdf_form() {
        // gelu(1) = 0.5 * (1 + erf(1/sqrt(2))) = Phi(1) with Phi the
        // standard normal CDF; Phi(1) = 0.841344746...
        assert!((gelu_val(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let m = tape.mean(x);
        assert_eq!(tape.value(m).item(), 2.5);
        assert_eq!(single_grad(&tape, m, x), vec![0.25; 4]);
    }

    #[test]
    fn concat_and_slice_roundtrip_gradients() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let b = tape.input(Tensor::new(vec![1, 3], vec![3.0, 4.0, 5.0]));
        let cat = tape.concat_cols(&[a, b]);
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let mid = tape.slice_cols(cat, 1, 4);
        let loss = tape.sum(mid);
        let grads = tape.backward(loss);
        assert_eq!(grads.expect(a).data(), &[0.0, 1.0]);
        assert_eq!(grads.expect(b).data(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn normalize_rows_produces_unit_rows_and_tangent_grads() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 2], vec![3.0, 4.0]));
        let y = tape.normalize_rows(x);
        assert!((tape.value(y).data()[0] - 0.6).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 0.8).abs() < 1e-15);
        // Loss = first component; its gradient must be orthogonal to y.
        let w = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]));
        let picked = tape.mul(y, w);
        let loss = tape.sum(picked);
        let g = single_grad(&tape, loss, x);
        let dot = g[0] * 0.6 + g[1] * 0.8;
        assert!(dot.abs() < 1e-15, "gradient not tangent: {:?}", g);
    }

    #[test]
    fn dropout_is_reproducible_and_identity_in_eval() {
        let build = |training: bool| {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::from_vec(vec![1.0; 64]));
            let y = tape.dropout(x, 0.5, 99, training);
            tape.value(y).data().to_vec()
        };
        assert_eq!(build(true), build(true));
        assert_eq!(build(false), vec![1.0; 64]);
        let dropped = build(true);
        assert!(dropped.iter().any(|&v| v == 0.0));
        assert!(dropped.iter().any(|&v| v == 2.0));
    }

    #[test]
    fn col_clamp_blocks_gradient_outside_interval() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2, 2], vec![-2.0, 0.5, 0.0, 3.0]));
        let y = tape.col_clamp(x, &[-1.0, -1.0], &[1.0, 1.0]);
        assert_eq!(tape.value(y).data(), &[-1.0, 0.5, 0.0, 1.0]);
        let loss = tape.sum(y);
        assert_eq!(single_grad(&tape, loss, x), vec![0.0, 1.0, 1.0, 0.0]);
    }
}
