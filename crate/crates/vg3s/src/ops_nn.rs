//! Network building blocks: normalization, convolutions, pooling,
//! bilinear sampling, and camera projection.

use crate::camera::CameraView;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Added to the variance before the square root in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Lane decomposition for softmax: positions `base + i * stride`.
fn softmax_lanes(shape: &[usize], axis: usize) -> (Vec<usize>, usize, usize) {
    match shape.len() {
        1 => {
            assert_eq!(axis, 0, "softmax: axis {} out of range for rank 1", axis);
            (vec![0], shape[0], 1)
        }
        2 => {
            let (r, c) = (shape[0], shape[1]);
            match axis {
                0 => ((0..c).collect(), r, c),
                1 => ((0..r).map(|i| i * c).collect(), c, 1),
                _ => panic!("softmax: axis {} out of range for rank 2", axis),
            }
        }
        _ => panic!("softmax: rank {} unsupported", shape.len()),
    }
}

impl Tape {
    /// Softmax along one axis of a rank-1 or rank-2 tensor.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> TensorId {
        let shape = self.value(x).shape().to_vec();
        let (bases, len, stride) = softmax_lanes(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for &base in &bases {
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(src[base + i * stride]);
            }
            let mut total = 0.0;
            for i in 0..len {
                let e = (src[base + i * stride] - max).exp();
                data[base + i * stride] = e;
                total += e;
            }
            for i in 0..len {
                data[base + i * stride] /= total;
            }
        }
        let value = Tensor::new(shape, data);
        let y = value.clone();
        self.push_op("softmax", value, vec![x], move |_, up| {
            let mut g = vec![0.0; up.numel()];
            for &base in &bases {
                let mut dot = 0.0;
                for i in 0..len {
                    let idx = base + i * stride;
                    dot += up.data()[idx] * y.data()[idx];
                }
                for i in 0..len {
                    let idx = base + i * stride;
                    g[idx] = y.data()[idx] * (up.data()[idx] - dot);
                }
            }
            vec![Tensor::new(up.shape().to_vec(), g)]
        })
    }

    /// Normalizes the last axis to zero mean and unit variance (variance
    /// computed with the biased estimator plus `LAYER_NORM_EPS`), then
    /// applies the learned per-channel gain and bias.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> TensorId {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().expect("layer_norm: operand must have rank >= 1");
        assert_eq!(self.value(gain).shape(), &[d], "layer_norm: gain shape");
        assert_eq!(self.value(bias).shape(), &[d], "layer_norm: bias shape");
        let rows = self.value(x).numel() / d;
        let src = self.value(x).data();
        let gamma = self.value(gain).data();
        let beta = self.value(bias).data();
        let mut norm = vec![0.0; src.len()];
        let mut inv_sigma = vec![0.0; rows];
        for r in 0..rows {
            let lane = &src[r * d..(r + 1) * d];
            let mu = lane.iter().sum::<f64>() / d as f64;
            let var = lane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_sigma[r] = is;
            for (o, v) in norm[r * d..(r + 1) * d].iter_mut().zip(lane) {
                *o = (v - mu) * is;
            }
        }
        let data: Vec<f64> = norm
            .iter()
            .enumerate()
            .map(|(i, xh)| xh * gamma[i % d] + beta[i % d])
            .collect();
        let value = Tensor::new(shape.clone(), data);
        self.push_op(
            "layer_norm",
            value,
            vec![x, gain, bias],
            move |tape, up| {
                let gamma = tape.value(gain).data();
                let mut gx = vec![0.0; up.numel()];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for r in 0..rows {
                    let u = &up.data()[r * d..(r + 1) * d];
                    let xh = &norm[r * d..(r + 1) * d];
                    let mut mean_gy = 0.0;
                    let mut mean_gy_xh = 0.0;
                    for j in 0..d {
                        let gy = u[j] * gamma[j];
                        mean_gy += gy;
                        mean_gy_xh += gy * xh[j];
                        ggain[j] += u[j] * xh[j];
                        gbias[j] += u[j];
                    }
                    mean_gy /= d as f64;
                    mean_gy_xh /= d as f64;
                    for j in 0..d {
                        let gy = u[j] * gamma[j];
                        gx[r * d + j] = inv_sigma[r] * (gy - mean_gy - xh[j] * mean_gy_xh);
                    }
                }
                vec![
                    Tensor::new(up.shape().to_vec(), gx),
                    Tensor::from_vec(ggain),
                    Tensor::from_vec(gbias),
                ]
            },
        )
    }

    /// Depthwise 2-D convolution on an `[H, W, C]` map with a
    /// `[kh, kw, C]` kernel, stride 1 and symmetric zero padding.
    pub fn conv2d_depthwise(&mut self, x: TensorId, kernel: TensorId, padding: usize) -> TensorId {
        let (h, w, c) = rank3(self.value(x).shape(), "conv2d_depthwise input");
        let ks = self.value(kernel).shape().to_vec();
        assert_eq!(ks.len(), 3, "conv2d_depthwise: kernel must be [kh, kw, C]");
        let (kh, kw) = (ks[0], ks[1]);
        assert_eq!(ks[2], c, "conv2d_depthwise: kernel channels != input channels");
        let oh = h + 2 * padding + 1 - kh;
        let ow = w + 2 * padding + 1 - kw;
        let src = self.value(x).data();
        let ker = self.value(kernel).data();
        let mut out = vec![0.0; oh * ow * c];
        for oi in 0..oh {
            for oj in 0..ow {
                for u in 0..kh {
                    let ii = (oi + u) as isize - padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for v in 0..kw {
                        let jj = (oj + v) as isize - padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let xb = ((ii as usize) * w + jj as usize) * c;
                        let kb = (u * kw + v) * c;
                        let ob = (oi * ow + oj) * c;
                        for ch in 0..c {
                            out[ob + ch] += src[xb + ch] * ker[kb + ch];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![oh, ow, c], out);
        self.push_op(
            "conv2d_depthwise",
            value,
            vec![x, kernel],
            move |tape, up| {
                let src = tape.value(x).data();
                let ker = tape.value(kernel).data();
                let mut gx = vec![0.0; h * w * c];
                let mut gk = vec![0.0; kh * kw * c];
                for oi in 0..oh {
                    for oj in 0..ow {
                        let ob = (oi * ow + oj) * c;
                        for u in 0..kh {
                            let ii = (oi + u) as isize - padding as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let jj = (oj + v) as isize - padding as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                let xb = ((ii as usize) * w + jj as usize) * c;
                                let kb = (u * kw + v) * c;
                                for ch in 0..c {
                                    let g = up.data()[ob + ch];
                                    gx[xb + ch] += g * ker[kb + ch];
                                    gk[kb + ch] += g * src[xb + ch];
                                }
                            }
                        }
                    }
                }
                vec![
                    Tensor::new(vec![h, w, c], gx),
                    Tensor::new(vec![kh, kw, c], gk),
                ]
            },
        )
    }

    /// 1x1 convolution: per-pixel linear map with a `[Cin, Cout]` kernel.
    pub fn conv2d_pointwise(&mut self, x: TensorId, kernel: TensorId) -> TensorId {
        let (h, w, cin) = rank3(self.value(x).shape(), "conv2d_pointwise input");
        let ks = self.value(kernel).shape().to_vec();
        assert_eq!(ks.len(), 2, "conv2d_pointwise: kernel must be [Cin, Cout]");
        assert_eq!(ks[0], cin, "conv2d_pointwise: kernel rows != input channels");
        let cout = ks[1];
        let out = crate::ops_basic::mat_mul_raw(
            h * w,
            cin,
            cout,
            self.value(x).data(),
            self.value(kernel).data(),
        );
        let value = Tensor::new(vec![h, w, cout], out);
        self.push_op(
            "conv2d_pointwise",
            value,
            vec![x, kernel],
            move |tape, up| {
                let kt = crate::ops_basic::transpose_raw(cin, cout, tape.value(kernel).data());
                let gx = crate::ops_basic::mat_mul_raw(h * w, cout, cin, up.data(), &kt);
                let xt = crate::ops_basic::transpose_raw(h * w, cin, tape.value(x).data());
                let gk = crate::ops_basic::mat_mul_raw(cin, h * w, cout, &xt, up.data());
                vec![
                    Tensor::new(vec![h, w, cin], gx),
                    Tensor::new(vec![cin, cout], gk),
                ]
            },
        )
    }

    /// Full 2-D convolution with a `[kh, kw, Cin, Cout]` kernel, arbitrary
    /// stride, and symmetric zero padding. Used for downsampling.
    pub fn conv2d_strided(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        stride: usize,
        padding: usize,
    ) -> TensorId {
        assert!(stride >= 1, "conv2d_strided: stride must be >= 1");
        let (h, w, cin) = rank3(self.value(x).shape(), "conv2d_strided input");
        let ks = self.value(kernel).shape().to_vec();
        assert_eq!(ks.len(), 4, "conv2d_strided: kernel must be [kh, kw, Cin, Cout]");
        let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
        assert_eq!(ks[2], cin, "conv2d_strided: kernel channels != input channels");
        assert!(
            h + 2 * padding >= kh && w + 2 * padding >= kw,
            "conv2d_strided: kernel larger than padded input"
        );
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let src = self.value(x).data();
        let ker = self.value(kernel).data();
        let mut out = vec![0.0; oh * ow * cout];
        for oi in 0..oh {
            for oj in 0..ow {
                let ob = (oi * ow + oj) * cout;
                for u in 0..kh {
                    let ii = (oi * stride + u) as isize - padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for v in 0..kw {
                        let jj = (oj * stride + v) as isize - padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let xb = ((ii as usize) * w + jj as usize) * cin;
                        let kb = ((u * kw + v) * cin) * cout;
                        for ci in 0..cin {
                            let xv = src[xb + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let krow = &ker[kb + ci * cout..kb + (ci + 1) * cout];
                            for co in 0..cout {
                                out[ob + co] += xv * krow[co];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![oh, ow, cout], out);
        self.push_op(
            "conv2d_strided",
            value,
            vec![x, kernel],
            move |tape, up| {
                let src = tape.value(x).data();
                let ker = tape.value(kernel).data();
                let mut gx = vec![0.0; h * w * cin];
                let mut gk = vec![0.0; kh * kw * cin * cout];
                for oi in 0..oh {
                    for oj in 0..ow {
                        let ob = (oi * ow + oj) * cout;
                        for u in 0..kh {
                            let ii = (oi * stride + u) as isize - padding as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let jj = (oj * stride + v) as isize - padding as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                let xb = ((ii as usize) * w + jj as usize) * cin;
                                let kb = ((u * kw + v) * cin) * cout;
                                for ci in 0..cin {
                                    let mut acc = 0.0;
                                    let krow = &ker[kb + ci * cout..kb + (ci + 1) * cout];
                                    let gkrow = &mut gk[kb + ci * cout..kb + (ci + 1) * cout];
                                    let xv = src[xb + ci];
                                    for co in 0..cout {
                                        let g = up.data()[ob + co];
                                        acc += g * krow[co];
                                        gkrow[co] += g * xv;
                                    }
                                    gx[xb + ci] += acc;
                                }
                            }
                        }
                    }
                }
                vec![
                    Tensor::new(vec![h, w, cin], gx),
                    Tensor::new(vec![kh, kw, cin, cout], gk),
                ]
            },
        )
    }

    /// Transposed convolution with kernel size equal to stride (exact
    /// integer upsampling; output windows do not overlap).
    pub fn conv2d_transposed(&mut self, x: TensorId, kernel: TensorId, stride: usize) -> TensorId {
        assert!(stride >= 2, "conv2d_transposed: stride must be >= 2");
        let (h, w, cin) = rank3(self.value(x).shape(), "conv2d_transposed input");
        let ks = self.value(kernel).shape().to_vec();
        assert_eq!(
            ks.len(),
            4,
            "conv2d_transposed: kernel must be [k, k, Cin, Cout]"
        );
        assert!(
            ks[0] == stride && ks[1] == stride,
            "conv2d_transposed: kernel size {}x{} must equal stride {}",
            ks[0],
            ks[1],
            stride
        );
        assert_eq!(ks[2], cin, "conv2d_transposed: kernel channels != input channels");
        let cout = ks[3];
        let (oh, ow) = (h * stride, w * stride);
        let src = self.value(x).data();
        let ker = self.value(kernel).data();
        let mut out = vec![0.0; oh * ow * cout];
        for i in 0..h {
            for j in 0..w {
                let xb = (i * w + j) * cin;
                for u in 0..stride {
                    for v in 0..stride {
                        let ob = ((i * stride + u) * ow + (j * stride + v)) * cout;
                        let kb = ((u * stride + v) * cin) * cout;
                        for ci in 0..cin {
                            let xv = src[xb + ci];
                            let krow = &ker[kb + ci * cout..kb + (ci + 1) * cout];
                            for co in 0..cout {
                                out[ob + co] += xv * krow[co];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![oh, ow, cout], out);
        self.push_op(
            "conv2d_transposed",
            value,
            vec![x, kernel],
            move |tape, up| {
                let src = tape.value(x).data();
                let ker = tape.value(kernel).data();
                let mut gx = vec![0.0; h * w * cin];
                let mut gk = vec![0.0; stride * stride * cin * cout];
                for i in 0..h {
                    for j in 0..w {
                        let xb = (i * w + j) * cin;
                        for u in 0..stride {
                            for v in 0..stride {
                                let ob = ((i * stride + u) * ow + (j * stride + v)) * cout;
                                let kb = ((u * stride + v) * cin) * cout;
                                for ci in 0..cin {
                                    let mut acc = 0.0;
                                    let krow = &ker[kb + ci * cout..kb + (ci + 1) * cout];
                                    let gkrow = &mut gk[kb + ci * cout..kb + (ci + 1) * cout];
                                    let xv = src[xb + ci];
                                    for co in 0..cout {
                                        let g = up.data()[ob + co];
                                        acc += g * krow[co];
                                        gkrow[co] += g * xv;
                                    }
                                    gx[xb + ci] += acc;
                                }
                            }
                        }
                    }
                }
                vec![
                    Tensor::new(vec![h, w, cin], gx),
                    Tensor::new(vec![stride, stride, cin, cout], gk),
                ]
            },
        )
    }

    /// Mean over the spatial axes of `[H, W, C]`, giving `[C]`.
    pub fn global_avg_pool(&mut self, x: TensorId) -> TensorId {
        let (h, w, c) = rank3(self.value(x).shape(), "global_avg_pool input");
        let n = (h * w) as f64;
        let mut out = vec![0.0; c];
        for (i, v) in self.value(x).data().iter().enumerate() {
            out[i % c] += v;
        }
        for o in &mut out {
            *o /= n;
        }
        let value = Tensor::from_vec(out);
        self.push_op("global_avg_pool", value, vec![x], move |_, up| {
            let mut g = vec![0.0; h * w * c];
            for (i, gv) in g.iter_mut().enumerate() {
                *gv = up.data()[i % c] / n;
            }
            vec![Tensor::new(vec![h, w, c], g)]
        })
    }

    /// Multiplies each channel of `[H, W, C]` by the matching entry of a
    /// `[C]` gate (broadcast over the spatial axes).
    pub fn channel_scale(&mut self, x: TensorId, gate: TensorId) -> TensorId {
        let (h, w, c) = rank3(self.value(x).shape(), "channel_scale input");
        assert_eq!(self.value(gate).shape(), &[c], "channel_scale: gate shape");
        let gv = self.value(gate).data().to_vec();
        let value = Tensor::new(
            vec![h, w, c],
            self.value(x)
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * gv[i % c])
                .collect(),
        );
        self.push_op("channel_scale", value, vec![x, gate], move |tape, up| {
            let src = tape.value(x).data();
            let gate_vals = tape.value(gate).data();
            let gx: Vec<f64> = up
                .data()
                .iter()
                .enumerate()
                .map(|(i, g)| g * gate_vals[i % c])
                .collect();
            let mut gg = vec![0.0; c];
            for (i, g) in up.data().iter().enumerate() {
                gg[i % c] += g * src[i];
            }
            vec![Tensor::new(vec![h, w, c], gx), Tensor::from_vec(gg)]
        })
    }

    /// Convex-style combination over the first axis:
    /// `out[l, d] = sum_m weights[m, l] * stack[m, l, d]`.
    pub fn weighted_layer_sum(&mut self, weights: TensorId, stack: TensorId) -> TensorId {
        let ws = self.value(weights).shape().to_vec();
        let ss = self.value(stack).shape().to_vec();
        assert_eq!(ws.len(), 2, "weighted_layer_sum: weights must be [M, L]");
        assert_eq!(ss.len(), 3, "weighted_layer_sum: stack must be [M, L, D]");
        assert_eq!(&ws[..], &ss[..2], "weighted_layer_sum: leading axes differ");
        let (m, l, d) = (ss[0], ss[1], ss[2]);
        let wv = self.value(weights).data();
        let sv = self.value(stack).data();
        let mut out = vec![0.0; l * d];
        for mi in 0..m {
            for li in 0..l {
                let wml = wv[mi * l + li];
                let sb = (mi * l + li) * d;
                let ob = li * d;
                for di in 0..d {
                    out[ob + di] += wml * sv[sb + di];
                }
            }
        }
        let value = Tensor::new(vec![l, d], out);
        self.push_op(
            "weighted_layer_sum",
            value,
            vec![weights, stack],
            move |tape, up| {
                let wv = tape.value(weights).data();
                let sv = tape.value(stack).data();
                let mut gw = vec![0.0; m * l];
                let mut gs = vec![0.0; m * l * d];
                for mi in 0..m {
                    for li in 0..l {
                        let sb = (mi * l + li) * d;
                        let ub = li * d;
                        let mut acc = 0.0;
                        for di in 0..d {
                            let g = up.data()[ub + di];
                            acc += g * sv[sb + di];
                            gs[sb + di] = wv[mi * l + li] * g;
                        }
                        gw[mi * l + li] = acc;
                    }
                }
                vec![
                    Tensor::new(vec![m, l], gw),
                    Tensor::new(vec![m, l, d], gs),
                ]
            },
        )
    }

    /// Bilinear lookup of P points in an `[H, W, C]` map. Coordinates are
    /// normalized to [0, 1] per axis and refer to cell centers, so the
    /// coordinate (i + 0.5) / W reads column i exactly. Out-of-range
    /// lookups clamp to the border.
    pub fn bilinear_sample_many(&mut self, map: TensorId, uv: TensorId) -> TensorId {
        let (h, w, c) = rank3(self.value(map).shape(), "bilinear_sample_many map");
        let us = self.value(uv).shape().to_vec();
        assert_eq!(us.len(), 2, "bilinear_sample_many: uv must be [P, 2]");
        assert_eq!(us[1], 2, "bilinear_sample_many: uv must be [P, 2]");
        let p = us[0];
        let corners = move |gx: f64, gy: f64| {
            let x0f = gx.floor();
            let y0f = gy.floor();
            let tx = gx - x0f;
            let ty = gy - y0f;
            let clampi = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi - 1);
            let x0 = clampi(x0f, w);
            let x1 = clampi(x0f + 1.0, w);
            let y0 = clampi(y0f, h);
            let y1 = clampi(y0f + 1.0, h);
            (x0, x1, y0, y1, tx, ty)
        };
        let mv = self.value(map).data();
        let uvv = self.value(uv).data();
        let mut out = vec![0.0; p * c];
        for pi in 0..p {
            let gx = uvv[pi * 2] * w as f64 - 0.5;
            let gy = uvv[pi * 2 + 1] * h as f64 - 0.5;
            let (x0, x1, y0, y1, tx, ty) = corners(gx, gy);
            for ch in 0..c {
                let v00 = mv[(y0 * w + x0) * c + ch];
                let v01 = mv[(y0 * w + x1) * c + ch];
                let v10 = mv[(y1 * w + x0) * c + ch];
                let v11 = mv[(y1 * w + x1) * c + ch];
                out[pi * c + ch] = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01)
                    + ty * ((1.0 - tx) * v10 + tx * v11);
            }
        }
        let value = Tensor::new(vec![p, c], out);
        self.push_op(
            "bilinear_sample_many",
            value,
            vec![map, uv],
            move |tape, up| {
                let mv = tape.value(map).data();
                let uvv = tape.value(uv).data();
                let mut gmap = vec![0.0; h * w * c];
                let mut guv = vec![0.0; p * 2];
                for pi in 0..p {
                    let gx = uvv[pi * 2] * w as f64 - 0.5;
                    let gy = uvv[pi * 2 + 1] * h as f64 - 0.5;
                    let (x0, x1, y0, y1, tx, ty) = corners(gx, gy);
                    let mut dgx = 0.0;
                    let mut dgy = 0.0;
                    for ch in 0..c {
                        let g = up.data()[pi * c + ch];
                        let v00 = mv[(y0 * w + x0) * c + ch];
                        let v01 = mv[(y0 * w + x1) * c + ch];
                        let v10 = mv[(y1 * w + x0) * c + ch];
                        let v11 = mv[(y1 * w + x1) * c + ch];
                        gmap[(y0 * w + x0) * c + ch] += g * (1.0 - ty) * (1.0 - tx);
                        gmap[(y0 * w + x1) * c + ch] += g * (1.0 - ty) * tx;
                        gmap[(y1 * w + x0) * c + ch] += g * ty * (1.0 - tx);
                        gmap[(y1 * w + x1) * c + ch] += g * ty * tx;
                        dgx += g * ((1.0 - ty) * (v01 - v00) + ty * (v11 - v10));
                        dgy += g * ((1.0 - tx) * (v10 - v00) + tx * (v11 - v01));
                    }
                    guv[pi * 2] = dgx * w as f64;
                    guv[pi * 2 + 1] = dgy * h as f64;
                }
                vec![
                    Tensor::new(vec![h, w, c], gmap),
                    Tensor::new(vec![p, 2], guv),
                ]
            },
        )
    }

    /// Projects world points `[P, 3]` through a pinhole camera into
    /// normalized image coordinates `[P, 2]`, plus a visibility mask
    /// (point in front of the near plane and inside the image).
    ///
    /// Depth is clamped from below for the division so that points at or
    /// behind the camera still produce finite coordinates; such points are
    /// masked out rather than trusted.
    pub fn pinhole_project(&mut self, points: TensorId, view: &CameraView) -> (TensorId, Vec<bool>) {
        let ps = self.value(points).shape().to_vec();
        assert_eq!(ps.len(), 2, "pinhole_project: points must be [P, 3]");
        assert_eq!(ps[1], 3, "pinhole_project: points must be [P, 3]");
        let p = ps[0];
        let cam = view.clone();
        const Z_GUARD: f64 = 1e-6;
        let pv = self.value(points).data();
        let mut out = vec![0.0; p * 2];
        let mut mask = vec![false; p];
        for pi in 0..p {
            let world = [pv[pi * 3], pv[pi * 3 + 1], pv[pi * 3 + 2]];
            let c = cam.world_to_cam(world);
            let z = c[2].max(Z_GUARD);
            let u = (cam.fx * c[0] / z + cam.cx) / cam.width;
            let v = (cam.fy * c[1] / z + cam.cy) / cam.height;
            out[pi * 2] = u;
            out[pi * 2 + 1] = v;
            mask[pi] = c[2] > cam.znear && (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v);
        }
        let value = Tensor::new(vec![p, 2], out);
        let id = self.push_op("pinhole_project", value, vec![points], move |tape, up| {
            let pv = tape.value(points).data();
            let mut g = vec![0.0; p * 3];
            for pi in 0..p {
                let world = [pv[pi * 3], pv[pi * 3 + 1], pv[pi * 3 + 2]];
                let c = cam.world_to_cam(world);
                let z = c[2].max(Z_GUARD);
                let gu = up.data()[pi * 2] / cam.width;
                let gv = up.data()[pi * 2 + 1] / cam.height;
                // d(u,v)/d(cam coords); z contributes only when unclamped.
                let mut gc = [gu * cam.fx / z, gv * cam.fy / z, 0.0];
                if c[2] > Z_GUARD {
                    gc[2] = -(gu * cam.fx * c[0] + gv * cam.fy * c[1]) / (z * z);
                }
                // cam = R * world + t, so d(cam)/d(world) = R.
                for a in 0..3 {
                    g[pi * 3 + a] = cam.rot[0][a] * gc[0]
                        + cam.rot[1][a] * gc[1]
                        + cam.rot[2][a] * gc[2];
                }
            }
            vec![Tensor::new(vec![p, 3], g)]
        });
        (id, mask)
    }
}

fn rank3(shape: &[usize], what: &str) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "{}: expected rank 3, got {:?}", what, shape);
    (shape[0], shape[1], shape[2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0);
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_axis0_normalizes_columns() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 3.0, 0.0, 2.0]));
        let y = tape.softmax(x, 0);
        let v = tape.value(y);
        for col in 0..3 {
            let s = v.at2(0, col) + v.at2(1, col);
            assert!((s - 1.0).abs() < 1e-12, "column {} sums to {}", col, s);
        }
        assert!(v.at2(1, 0) > v.at2(0, 0));
    }

    #[test]
    fn softmax_shift_invariance() {
        let logits = vec![0.3, -1.2, 2.0, 0.0];
        let run = |shift: f64| {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::from_vec(
                logits.iter().map(|v| v + shift).collect(),
            ));
            let y = tape.softmax(x, 0);
            tape.value(y).data().to_vec()
        };
        let a = run(0.0);
        let b = run(100.0);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]));
        let gain = tape.input(Tensor::from_vec(vec![1.0; 4]));
        let bias = tape.input(Tensor::from_vec(vec![0.0; 4]));
        let y = tape.layer_norm(x, gain, bias);
        for r in 0..2 {
            let row: Vec<f64> = (0..4).map(|c| tape.value(y).at2(r, c)).collect();
            let mu: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 4.0;
            assert!(mu.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5, "row variance {}", var);
        }
    }

    #[test]
    fn depthwise_identity_kernel_with_padding_preserves_map() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_fn(vec![4, 4, 2], |i| i as f64 * 0.1));
        let mut k = Tensor::zeros(vec![3, 3, 2]);
        // center tap = 1 for both channels
        k.data_mut()[(1 * 3 + 1) * 2] = 1.0;
        k.data_mut()[(1 * 3 + 1) * 2 + 1] = 1.0;
        let kid = tape.input(k);
        let y = tape.conv2d_depthwise(x, kid, 1);
        assert_eq!(tape.value(y).shape(), &[4, 4, 2]);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn pointwise_matches_per_pixel_matmul() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let k = tape.input(Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]));
        let y = tape.conv2d_pointwise(x, k);
        assert_eq!(tape.value(y).shape(), &[1, 2, 3]);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 3.0, 4.0, 7.0]);
    }

    #[test]
    fn strided_conv_halves_spatial_size() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_fn(vec![8, 8, 3], |i| (i % 7) as f64));
        let k = tape.input(Tensor::from_fn(vec![3, 3, 3, 5], |i| (i % 5) as f64 * 0.1));
        let y = tape.conv2d_strided(x, k, 2, 1);
        assert_eq!(tape.value(y).shape(), &[4, 4, 5]);
    }

    #[test]
    fn transposed_conv_scales_by_stride_and_inverts_avg_downsample() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_fn(vec![2, 2, 1], |i| i as f64 + 1.0));
        // kernel of ones: each input pixel is replicated into a 2x2 block
        let k = tape.input(Tensor::filled(vec![2, 2, 1, 1], 1.0));
        let y = tape.conv2d_transposed(x, k, 2);
        assert_eq!(tape.value(y).shape(), &[4, 4, 1]);
        assert_eq!(tape.value(y).at3(0, 1, 0), 1.0);
        assert_eq!(tape.value(y).at3(3, 2, 0), 4.0);
        assert_eq!(tape.value(y).at3(2, 3, 0), 4.0);
    }

    #[test]
    fn global_avg_pool_means_per_channel() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2, 1, 2], vec![1.0, 10.0, 3.0, 30.0]));
        let y = tape.global_avg_pool(x);
        assert_eq!(tape.value(y).data(), &[2.0, 20.0]);
    }

    #[test]
    fn weighted_layer_sum_with_one_hot_weights_selects_layer() {
        let mut tape = Tape::new();
        let w = tape.input(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let g = tape.input(Tensor::from_fn(vec![2, 2, 3], |i| i as f64));
        let y = tape.weighted_layer_sum(w, g);
        // token 0 from layer 0, token 1 from layer 1
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 2.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn bilinear_sampling_is_exact_at_cell_centers() {
        let mut tape = Tape::new();
        let map = tape.input(Tensor::from_fn(vec![4, 4, 1], |i| i as f64));
        // cell (row 2, col 1): u = (1+0.5)/4, v = (2+0.5)/4
        let uv = tape.input(Tensor::new(vec![1, 2], vec![1.5 / 4.0, 2.5 / 4.0]));
        let y = tape.bilinear_sample_many(map, uv);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn bilinear_sampling_interpolates_midpoints() {
        let mut tape = Tape::new();
        let map = tape.input(Tensor::new(vec![1, 2, 1], vec![0.0, 10.0]));
        // halfway between the two cell centers of a 1x2 map
        let uv = tape.input(Tensor::new(vec![1, 2], vec![0.5, 0.5]));
        let y = tape.bilinear_sample_many(map, uv);
        assert!((tape.value(y).data()[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn projection_puts_forward_point_at_principal_point() {
        let mut tape = Tape::new();
        let view = CameraView::look_at(
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 10.0],
            [0.0, 1.0, 0.0],
            100.0,
            100.0,
            64.0,
            64.0,
            128.0,
            128.0,
        );
        let pts = tape.input(Tensor::new(vec![2, 3], vec![0.0, 0.0, 10.0, 0.0, 0.0, -5.0]));
        let (uv, mask) = tape.pinhole_project(pts, &view);
        assert!((tape.value(uv).at2(0, 0) - 0.5).abs() < 1e-12);
        assert!((tape.value(uv).at2(0, 1) - 0.5).abs() < 1e-12);
        assert!(mask[0]);
        assert!(!mask[1], "point behind the camera must be masked");
        assert!(tape.value(uv).all_finite());
    }
}
