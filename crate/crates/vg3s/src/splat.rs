//! Gaussian-to-voxel splatting: alpha compositing of anisotropic
//! primitives into a dense occupancy and semantics grid.
//!
//! Per voxel center x and primitive i, the contribution is
//! `alpha_i = opacity_i * exp(-0.5 * d^T Cov_i^{-1} d)` with d = x - m_i.
//! Occupancy is `1 - prod_i (1 - alpha_i)` and semantics are the
//! alpha-weighted mean of the per-primitive class distributions.
//!
//! Determinism: the forward pass parallelizes over voxel tiles, with each
//! voxel folding primitives in ascending index order; the backward pass
//! parallelizes over primitives, each folding its voxels in ascending
//! linear order. Results are bitwise identical for any worker count.

use crate::gaussians::{
    quat_normalize, rotation_matrix, rotation_matrix_jacobian, GaussianSet,
};
use crate::ops_basic::sigmoid_val;
use crate::parallel;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use crate::voxel::{GridSpec, ProbGrid};

/// Survival factors (1 - alpha) are clamped to at least this before the
/// product, keeping the log-space accumulation finite for saturated
/// primitives. Forward and backward apply it identically.
pub const SURVIVAL_FLOOR: f64 = 1e-12;

/// Voxels per parallel tile in the forward pass.
const TILE: usize = 256;

/// Per-primitive quantities fixed for one splat call.
struct Prepared {
    rot: [[f64; 3]; 3],
    inv_s2: [f64; 3],
    opacity: f64,
    /// softmax of the class logits
    probs: Vec<f64>,
    /// voxel index ranges [lo, hi) covered after culling; None = skipped
    range: Option<[(usize, usize); 3]>,
}

fn prepare(set: &GaussianSet, grid: &GridSpec, kappa: f64) -> Vec<Prepared> {
    assert!(kappa > 0.0, "cull radius must be positive");
    parallel::map_indexed(set.count, |i| {
        let s = set.scale(i);
        let rot = rotation_matrix(set.rotation(i));
        let inv_s2 = [1.0 / (s[0] * s[0]), 1.0 / (s[1] * s[1]), 1.0 / (s[2] * s[2])];
        let logits = &set.class_logits[i * set.classes..(i + 1) * set.classes];
        let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut probs: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
        let range = if kappa.is_finite() {
            let m = set.position(i);
            let radius = kappa * s.iter().fold(0.0f64, |a, &b| a.max(b));
            grid.clip_box(
                [m[0] - radius, m[1] - radius, m[2] - radius],
                [m[0] + radius, m[1] + radius, m[2] + radius],
            )
        } else {
            Some([(0, grid.dims[0]), (0, grid.dims[1]), (0, grid.dims[2])])
        };
        Prepared {
            rot,
            inv_s2,
            opacity: sigmoid_val(set.opacity_logits[i]),
            probs,
            range,
        }
    })
}

fn covers(range: &[(usize, usize); 3], v: [usize; 3]) -> bool {
    (0..3).all(|a| v[a] >= range[a].0 && v[a] < range[a].1)
}

/// Squared Mahalanobis distance of `d` under the prepared primitive.
fn mahalanobis(p: &Prepared, d: [f64; 3]) -> f64 {
    let mut q = 0.0;
    for j in 0..3 {
        let u = p.rot[0][j] * d[0] + p.rot[1][j] * d[1] + p.rot[2][j] * d[2];
        q += u * u * p.inv_s2[j];
    }
    q
}

/// Raw forward accumulators, the inputs to both outputs and the backward
/// pass. All indexed by linear voxel id.
pub struct SplatRaw {
    pub classes: usize,
    pub log_survival: Vec<f64>,
    pub alpha_sum: Vec<f64>,
    /// `V x classes`: alpha-weighted class distributions
    pub class_weight: Vec<f64>,
}

impl SplatRaw {
    pub fn occupancy(&self, v: usize) -> f64 {
        -f64::exp_m1(self.log_survival[v])
    }
}

fn splat_forward(set: &GaussianSet, grid: &GridSpec, prep: &[Prepared]) -> SplatRaw {
    let v = grid.num_voxels();
    let c = set.classes;
    let row = 2 + c;
    let mut rows = vec![0.0; v * row];
    parallel::for_each_chunk_mut(&mut rows, TILE * row, |tile, chunk| {
        let base = tile * TILE;
        for (local, out) in chunk.chunks_mut(row).enumerate() {
            let vi = base + local;
            let [x, y, z] = grid.coords(vi);
            let center = grid.center(x, y, z);
            let mut log_surv = 0.0;
            let mut alpha_sum = 0.0;
            for (i, p) in prep.iter().enumerate() {
                let Some(range) = &p.range else { continue };
                if !covers(range, [x, y, z]) {
                    continue;
                }
                let m = set.position(i);
                let d = [center[0] - m[0], center[1] - m[1], center[2] - m[2]];
                let q = mahalanobis(p, d);
                let alpha = p.opacity * (-0.5 * q).exp();
                log_surv += (1.0 - alpha).max(SURVIVAL_FLOOR).ln();
                alpha_sum += alpha;
                for (o, pb) in out[2..].iter_mut().zip(&p.probs) {
                    *o += alpha * pb;
                }
            }
            out[0] = log_surv;
            out[1] = alpha_sum;
        }
    });
    let mut raw = SplatRaw {
        classes: c,
        log_survival: vec![0.0; v],
        alpha_sum: vec![0.0; v],
        class_weight: vec![0.0; v * c],
    };
    for (vi, r) in rows.chunks(row).enumerate() {
        raw.log_survival[vi] = r[0];
        raw.alpha_sum[vi] = r[1];
        raw.class_weight[vi * c..(vi + 1) * c].copy_from_slice(&r[2..]);
    }
    raw
}

/// Evaluation-facing output: occupancy plus the alpha-weighted class
/// distribution (zeros where nothing contributed).
pub fn splat(set: &GaussianSet, grid: &GridSpec, kappa: f64) -> ProbGrid {
    let prep = prepare(set, grid, kappa);
    let raw = splat_forward(set, grid, &prep);
    raw_to_prob_grid(&raw, grid)
}

/// `splat` under a dedicated pool of `workers` threads.
pub fn splat_with_workers(
    set: &GaussianSet,
    grid: &GridSpec,
    kappa: f64,
    workers: usize,
) -> ProbGrid {
    parallel::with_pool(workers, || splat(set, grid, kappa))
}

fn raw_to_prob_grid(raw: &SplatRaw, grid: &GridSpec) -> ProbGrid {
    let v = grid.num_voxels();
    let c = raw.classes;
    let mut occupancy = vec![0.0; v];
    let mut class_probs = vec![0.0; v * c];
    for vi in 0..v {
        occupancy[vi] = raw.occupancy(vi);
        let a = raw.alpha_sum[vi];
        if a > 0.0 {
            for ci in 0..c {
                class_probs[vi * c + ci] = raw.class_weight[vi * c + ci] / a;
            }
        }
    }
    ProbGrid {
        spec: grid.clone(),
        classes: c,
        occupancy,
        class_probs,
    }
}

/// Loss-facing fused distribution over `classes + 1` outcomes per voxel:
/// occupied classes get `occupancy * weight_c / alpha_sum`, the final
/// column is `1 - occupancy`. Untouched voxels are exactly
/// (0, ..., 0, 1).
pub fn distribution_from_raw(raw: &SplatRaw, v: usize) -> Vec<f64> {
    let c = raw.classes;
    let mut out = vec![0.0; v * (c + 1)];
    for vi in 0..v {
        let o = raw.occupancy(vi);
        let a = raw.alpha_sum[vi];
        let row = &mut out[vi * (c + 1)..(vi + 1) * (c + 1)];
        if a > 0.0 {
            for ci in 0..c {
                row[ci] = o * raw.class_weight[vi * c + ci] / a;
            }
        }
        row[c] = 1.0 - o;
    }
    out
}

/// Upper bound on how much occupancy the kappa cull can remove at any
/// voxel: every culled contribution satisfies q >= kappa^2.
pub fn occupancy_tail_bound(set: &GaussianSet, kappa: f64) -> f64 {
    if !kappa.is_finite() {
        return 0.0;
    }
    let cap = (-0.5 * kappa * kappa).exp();
    let mut survival = 1.0;
    for i in 0..set.count {
        survival *= 1.0 - set.opacity(i) * cap;
    }
    1.0 - survival
}

/// Naive reference: every voxel against every primitive, no culling, no
/// log-space product, rotation matrices recomputed in place. Guarded to
/// small problem sizes; use only in tests.
pub fn splat_oracle(set: &GaussianSet, grid: &GridSpec) -> ProbGrid {
    assert!(set.count <= 1000, "oracle limited to 1000 primitives");
    assert!(
        grid.num_voxels() <= 32 * 32 * 32,
        "oracle limited to 32^3 voxels"
    );
    let v = grid.num_voxels();
    let c = set.classes;
    let mut occupancy = vec![0.0; v];
    let mut class_probs = vec![0.0; v * c];
    for x in 0..grid.dims[0] {
        for y in 0..grid.dims[1] {
            for z in 0..grid.dims[2] {
                let vi = grid.index(x, y, z);
                let center = grid.center(x, y, z);
                let mut survival = 1.0;
                let mut alpha_sum = 0.0;
                let mut weights = vec![0.0; c];
                for i in 0..set.count {
                    let m = set.position(i);
                    let s = set.scale(i);
                    let rot = rotation_matrix(set.rotation(i));
                    let d = [center[0] - m[0], center[1] - m[1], center[2] - m[2]];
                    let mut q = 0.0;
                    for j in 0..3 {
                        let u = rot[0][j] * d[0] + rot[1][j] * d[1] + rot[2][j] * d[2];
                        q += (u / s[j]) * (u / s[j]);
                    }
                    let alpha = set.opacity(i) * (-0.5 * q).exp();
                    survival *= (1.0 - alpha).max(SURVIVAL_FLOOR);
                    alpha_sum += alpha;
                    let logits = &set.class_logits[i * c..(i + 1) * c];
                    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                    for (wc, l) in weights.iter_mut().zip(logits) {
                        *wc += alpha * (l - max).exp() / total;
                    }
                }
                occupancy[vi] = 1.0 - survival;
                if alpha_sum > 0.0 {
                    for ci in 0..c {
                        class_probs[vi * c + ci] = weights[ci] / alpha_sum;
                    }
                }
            }
        }
    }
    ProbGrid {
        spec: grid.clone(),
        classes: c,
        occupancy,
        class_probs,
    }
}

/// Per-primitive gradients produced by the backward kernel.
struct GaussGrad {
    m: [f64; 3],
    s: [f64; 3],
    r: [f64; 4],
    a: f64,
    c: Vec<f64>,
}

/// Reverse pass: `upstream` is dL/d(distribution) laid out `V x (C+1)`.
/// Returns flat gradients matching the parameter layouts of the set.
#[allow(clippy::type_complexity)]
fn splat_backward(
    set: &GaussianSet,
    grid: &GridSpec,
    prep: &[Prepared],
    raw: &SplatRaw,
    upstream: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let v = grid.num_voxels();
    let c = set.classes;
    assert_eq!(upstream.len(), v * (c + 1));
    // voxel-level quantities shared by every primitive
    let mut p_surv = vec![0.0; v];
    let mut occ = vec![0.0; v];
    // T = sum_c U_c W_c / A per voxel (0 where A = 0)
    let mut t = vec![0.0; v];
    for vi in 0..v {
        p_surv[vi] = raw.log_survival[vi].exp();
        occ[vi] = 1.0 - p_surv[vi];
        let a = raw.alpha_sum[vi];
        if a > 0.0 {
            let u = &upstream[vi * (c + 1)..vi * (c + 1) + c];
            let w = &raw.class_weight[vi * c..(vi + 1) * c];
            t[vi] = u.iter().zip(w).map(|(uc, wc)| uc * wc).sum::<f64>() / a;
        }
    }

    let grads: Vec<GaussGrad> = parallel::map_indexed(set.count, |i| {
        let p = &prep[i];
        let mut g = GaussGrad {
            m: [0.0; 3],
            s: [0.0; 3],
            r: [0.0; 4],
            a: 0.0,
            c: vec![0.0; c],
        };
        let Some(range) = &p.range else { return g };
        let m = set.position(i);
        let s = set.scale(i);
        // accumulated dL/dR for the rotation chain
        let mut rot_bar = [[0.0; 3]; 3];
        for x in range[0].0..range[0].1 {
            for y in range[1].0..range[1].1 {
                for z in range[2].0..range[2].1 {
                    let vi = grid.index(x, y, z);
                    let a_sum = raw.alpha_sum[vi];
                    if a_sum == 0.0 {
                        continue;
                    }
                    let center = grid.center(x, y, z);
                    let d = [center[0] - m[0], center[1] - m[1], center[2] - m[2]];
                    let mut u = [0.0; 3];
                    let mut q = 0.0;
                    for j in 0..3 {
                        u[j] = p.rot[0][j] * d[0] + p.rot[1][j] * d[1] + p.rot[2][j] * d[2];
                        q += u[j] * u[j] * p.inv_s2[j];
                    }
                    let alpha = p.opacity * (-0.5 * q).exp();
                    if alpha == 0.0 {
                        continue;
                    }
                    let urow = &upstream[vi * (c + 1)..(vi + 1) * (c + 1)];
                    // dL/d(occupancy) via this primitive's survival factor
                    let docc_dalpha = if 1.0 - alpha > SURVIVAL_FLOOR {
                        p_surv[vi] / (1.0 - alpha)
                    } else {
                        0.0
                    };
                    let gi: f64 = urow[..c]
                        .iter()
                        .zip(&p.probs)
                        .map(|(uc, pc)| uc * pc)
                        .sum();
                    let dl_dalpha = docc_dalpha * (t[vi] - urow[c])
                        + occ[vi] / a_sum * (gi - t[vi]);
                    // opacity logit: dalpha/dlogit = alpha * (1 - opacity)
                    g.a += dl_dalpha * alpha * (1.0 - p.opacity);
                    // class logits: softmax pullback of o*alpha/A weights
                    let coef = occ[vi] * alpha / a_sum;
                    for (gc, pc, uc) in itertools_zip(&mut g.c, &p.probs, &urow[..c]) {
                        *gc += coef * pc * (uc - gi);
                    }
                    // geometry: dalpha/dq = -alpha / 2
                    let dl_dq = dl_dalpha * (-0.5 * alpha);
                    let w = [
                        2.0 * u[0] * p.inv_s2[0],
                        2.0 * u[1] * p.inv_s2[1],
                        2.0 * u[2] * p.inv_s2[2],
                    ];
                    for a_axis in 0..3 {
                        // dq/dd = R w; dd/dm = -I
                        let rw = p.rot[a_axis][0] * w[0]
                            + p.rot[a_axis][1] * w[1]
                            + p.rot[a_axis][2] * w[2];
                        g.m[a_axis] -= dl_dq * rw;
                        for b in 0..3 {
                            rot_bar[a_axis][b] += dl_dq * d[a_axis] * w[b];
                        }
                    }
                    for j in 0..3 {
                        g.s[j] += dl_dq * (-2.0 * u[j] * u[j] * p.inv_s2[j] / s[j]);
                    }
                }
            }
        }
        // rotation chain: through the unit-quaternion matrix formula, then
        // through the normalization of the stored quaternion
        let rq = set.rotation(i);
        let unit = quat_normalize(rq);
        let jac = rotation_matrix_jacobian(unit);
        let mut g_unit = [0.0; 4];
        for k in 0..4 {
            for a_axis in 0..3 {
                for b in 0..3 {
                    g_unit[k] += rot_bar[a_axis][b] * jac[k][a_axis][b];
                }
            }
        }
        let norm = (rq.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let dot: f64 = (0..4).map(|k| g_unit[k] * unit[k]).sum();
        for k in 0..4 {
            g.r[k] = (g_unit[k] - dot * unit[k]) / norm;
        }
        g
    });

    let mut dm = vec![0.0; set.count * 3];
    let mut ds = vec![0.0; set.count * 3];
    let mut dr = vec![0.0; set.count * 4];
    let mut da = vec![0.0; set.count];
    let mut dc = vec![0.0; set.count * c];
    for (i, g) in grads.iter().enumerate() {
        dm[i * 3..(i + 1) * 3].copy_from_slice(&g.m);
        ds[i * 3..(i + 1) * 3].copy_from_slice(&g.s);
        dr[i * 4..(i + 1) * 4].copy_from_slice(&g.r);
        da[i] = g.a;
        dc[i * c..(i + 1) * c].copy_from_slice(&g.c);
    }
    (dm, ds, dr, da, dc)
}

fn itertools_zip<'a>(
    a: &'a mut [f64],
    b: &'a [f64],
    c: &'a [f64],
) -> impl Iterator<Item = (&'a mut f64, &'a f64, &'a f64)> {
    a.iter_mut().zip(b).zip(c).map(|((x, y), z)| (x, y, z))
}

impl Tape {
    /// Differentiable splat producing the `V x (classes + 1)` loss-facing
    /// distribution. Operands: positions `[J,3]`, scales `[J,3]`,
    /// rotations `[J,4]`, opacity logits `[J]`, class logits `[J,C]`.
    pub fn splat_distribution(
        &mut self,
        positions: TensorId,
        scales: TensorId,
        rotations: TensorId,
        opacity_logits: TensorId,
        class_logits: TensorId,
        grid: &GridSpec,
        kappa: f64,
    ) -> TensorId {
        let count = {
            let s = self.value(positions).shape();
            assert_eq!(s.len(), 2, "splat: positions must be [J, 3]");
            assert_eq!(s[1], 3, "splat: positions must be [J, 3]");
            s[0]
        };
        let classes = {
            let s = self.value(class_logits).shape();
            assert_eq!(s.len(), 2, "splat: class logits must be [J, C]");
            assert_eq!(s[0], count, "splat: class logit rows != J");
            s[1]
        };
        assert_eq!(self.value(scales).shape(), &[count, 3], "splat: scales shape");
        assert_eq!(
            self.value(rotations).shape(),
            &[count, 4],
            "splat: rotations shape"
        );
        assert_eq!(
            self.value(opacity_logits).shape(),
            &[count],
            "splat: opacity shape"
        );
        let build_set = move |tape: &Tape| {
            GaussianSet::new(
                count,
                classes,
                tape.value(positions).data().to_vec(),
                tape.value(scales).data().to_vec(),
                tape.value(rotations).data().to_vec(),
                tape.value(opacity_logits).data().to_vec(),
                tape.value(class_logits).data().to_vec(),
            )
        };
        let set = build_set(self);
        let prep = prepare(&set, grid, kappa);
        let raw = splat_forward(&set, grid, &prep);
        let vcount = grid.num_voxels();
        let value = Tensor::new(vec![vcount, classes + 1], distribution_from_raw(&raw, vcount));
        let grid = grid.clone();
        self.push_op(
            "splat_distribution",
            value,
            vec![positions, scales, rotations, opacity_logits, class_logits],
            move |tape, up| {
                let set = build_set(tape);
                let prep = prepare(&set, &grid, kappa);
                let (dm, ds, dr, da, dc) =
                    splat_backward(&set, &grid, &prep, &raw, up.data());
                vec![
                    Tensor::new(vec![count, 3], dm),
                    Tensor::new(vec![count, 3], ds),
                    Tensor::new(vec![count, 4], dr),
                    Tensor::new(vec![count], da),
                    Tensor::new(vec![count, classes], dc),
                ]
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check;
    use crate::rng;
    use rand::Rng;

    fn small_grid() -> GridSpec {
        GridSpec::new([8, 8, 4], [-2.0, -2.0, -1.0], 0.5)
    }

    fn random_set(count: usize, classes: usize, seed: u64) -> GaussianSet {
        let grid = small_grid();
        let mut r = rng::stream(rng::stream_seed(seed, rng::domain::SELFTEST, 77));
        let hi = grid.max_corner();
        let mut positions = Vec::new();
        let mut scales = Vec::new();
        let mut rotations = Vec::new();
        let mut opacity = Vec::new();
        let mut class_logits = Vec::new();
        for _ in 0..count {
            for a in 0..3 {
                positions.push(r.gen_range(grid.origin[a]..hi[a]));
                scales.push(r.gen_range(0.15..0.8));
            }
            let q: [f64; 4] = [
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
            ];
            let q = if q.iter().map(|v| v * v).sum::<f64>() < 1e-3 {
                [1.0, 0.0, 0.0, 0.0]
            } else {
                q
            };
            rotations.extend_from_slice(&q);
            opacity.push(r.gen_range(-2.0..1.5));
            for _ in 0..classes {
                class_logits.push(r.gen_range(-1.0..1.0));
            }
        }
        GaussianSet::new(count, classes, positions, scales, rotations, opacity, class_logits)
    }

    #[test]
    fn uncalled_splat_matches_oracle_to_float_noise() {
        let grid = small_grid();
        let set = random_set(40, 3, 1);
        let fast = splat(&set, &grid, f64::INFINITY);
        let oracle = splat_oracle(&set, &grid);
        let occ_diff = fast
            .occupancy
            .iter()
            .zip(&oracle.occupancy)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let prob_diff = fast
            .class_probs
            .iter()
            .zip(&oracle.class_probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(occ_diff < 1e-12, "occupancy diff {}", occ_diff);
        assert!(prob_diff < 1e-12, "class prob diff {}", prob_diff);
    }

    #[test]
    fn culled_splat_stays_within_tail_bound() {
        let grid = small_grid();
        let set = random_set(40, 3, 2);
        let culled = splat(&set, &grid, 3.0);
        let full = splat_oracle(&set, &grid);
        let bound = occupancy_tail_bound(&set, 3.0);
        let diff = culled
            .occupancy
            .iter()
            .zip(&full.occupancy)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(
            diff <= bound,
            "culling changed occupancy by {} > bound {}",
            diff,
            bound
        );
        // the bound is meaningful: a tight cull must actually drop mass
        let tight = splat(&set, &grid, 1.0);
        let tight_diff = tight
            .occupancy
            .iter()
            .zip(&full.occupancy)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(tight_diff > 0.0);
        assert!(tight_diff <= occupancy_tail_bound(&set, 1.0));
    }

    #[test]
    fn single_gaussian_peak_at_its_center() {
        let grid = GridSpec::new([5, 5, 5], [-1.25, -1.25, -1.25], 0.5);
        // centered on the middle voxel center, isotropic
        let set = GaussianSet::new(
            1,
            2,
            vec![0.0, 0.0, 0.0],
            vec![0.4, 0.4, 0.4],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0],
            vec![3.0, -3.0],
        );
        let p = splat(&set, &grid, f64::INFINITY);
        let center = grid.index(2, 2, 2);
        // alpha at the center voxel is exactly the opacity (q = 0)
        assert!((p.occupancy[center] - 0.5).abs() < 1e-12);
        let best = p
            .occupancy
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(best, center);
        // class distribution matches the softmax of the logits
        let e = (3.0f64).exp() + (-3.0f64).exp();
        assert!((p.class_probs[center * 2] - (3.0f64).exp() / e).abs() < 1e-12);
    }

    #[test]
    fn distribution_rows_sum_to_one_where_consistent() {
        let grid = small_grid();
        let set = random_set(25, 4, 3);
        let prep = prepare(&set, &grid, f64::INFINITY);
        let raw = splat_forward(&set, &grid, &prep);
        let dist = distribution_from_raw(&raw, grid.num_voxels());
        // occupied mass splits over classes, so each row sums to
        // (1 - o) + o * sum(W/A) = 1 exactly when weights are normalized
        for vi in 0..grid.num_voxels() {
            let row = &dist[vi * 5..(vi + 1) * 5];
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-9, "voxel {} sums to {}", vi, total);
            assert!(row.iter().all(|&p| (-1e-12..=1.0 + 1e-12).contains(&p)));
        }
    }

    #[test]
    fn worker_count_does_not_change_bits() {
        let grid = small_grid();
        let set = random_set(30, 3, 4);
        let base = splat_with_workers(&set, &grid, 3.0, 1);
        for workers in [2, 8] {
            let other = splat_with_workers(&set, &grid, 3.0, workers);
            assert!(
                base.occupancy
                    .iter()
                    .zip(&other.occupancy)
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
                "occupancy differs with {} workers",
                workers
            );
            assert!(base
                .class_probs
                .iter()
                .zip(&other.class_probs)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn splat_gradients_match_finite_differences() {
        let grid = GridSpec::new([4, 4, 3], [-1.0, -1.0, -0.75], 0.5);
        let set = random_set(4, 3, 5);
        let builder = |tape: &mut Tape, inputs: &[TensorId]| {
            let dist = tape.splat_distribution(
                inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], &grid, f64::INFINITY,
            );
            // random fixed projection to a scalar
            let mut r = rng::stream(999);
            let w = tape.constant(Tensor::from_fn(
                vec![grid.num_voxels(), 4],
                |_| r.gen_range(-1.0..1.0),
            ));
            let weighted = tape.mul(dist, w);
            tape.sum(weighted)
        };
        let inputs = vec![
            Tensor::new(vec![4, 3], set.positions.clone()),
            Tensor::new(vec![4, 3], set.scales.clone()),
            Tensor::new(vec![4, 4], set.rotations.clone()),
            Tensor::new(vec![4], set.opacity_logits.clone()),
            Tensor::new(vec![4, 3], set.class_logits.clone()),
        ];
        let mut r = rng::stream(rng::stream_seed(5, rng::domain::SELFTEST, 31));
        check::assert_gradients_match(&builder, &inputs, Some(6), &mut r);
    }

    #[test]
    fn culled_splat_gradients_match_finite_differences() {
        // kappa large enough that the AABB boundary has negligible mass,
        // so the cull discontinuity stays far below FD resolution
        let grid = GridSpec::new([4, 4, 3], [-1.0, -1.0, -0.75], 0.5);
        let set = random_set(4, 2, 6);
        let builder = |tape: &mut Tape, inputs: &[TensorId]| {
            let dist = tape.splat_distribution(
                inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], &grid, 12.0,
            );
            let mut r = rng::stream(1234);
            let w = tape.constant(Tensor::from_fn(
                vec![grid.num_voxels(), 3],
                |_| r.gen_range(-1.0..1.0),
            ));
            let weighted = tape.mul(dist, w);
            tape.sum(weighted)
        };
        let inputs = vec![
            Tensor::new(vec![4, 3], set.positions.clone()),
            Tensor::new(vec![4, 3], set.scales.clone()),
            Tensor::new(vec![4, 4], set.rotations.clone()),
            Tensor::new(vec![4], set.opacity_logits.clone()),
            Tensor::new(vec![4, 2], set.class_logits.clone()),
        ];
        let mut r = rng::stream(rng::stream_seed(6, rng::domain::SELFTEST, 32));
        check::assert_gradients_match(&builder, &inputs, Some(5), &mut r);
    }
}
