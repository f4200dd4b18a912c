//! Semantic 3-D Gaussian primitives: storage, covariance construction,
//! deterministic initialization, and the on-disk format.

use crate::fileio::{self, FormatError};
use crate::ops_basic::sigmoid_val;
use crate::rng;
use crate::voxel::GridSpec;
use rand::Rng;
use std::io::{Read, Write};

/// A set of J primitives. Parameters are stored flat, struct-of-arrays:
/// positions `[J*3]`, scales `[J*3]` (standard deviations, meters),
/// rotations `[J*4]` as w-first quaternions, opacity logits `[J]`, and
/// class logits `[J*classes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub count: usize,
    pub classes: usize,
    pub positions: Vec<f64>,
    pub scales: Vec<f64>,
    pub rotations: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub class_logits: Vec<f64>,
}

impl GaussianSet {
    pub fn new(
        count: usize,
        classes: usize,
        positions: Vec<f64>,
        scales: Vec<f64>,
        rotations: Vec<f64>,
        opacity_logits: Vec<f64>,
        class_logits: Vec<f64>,
    ) -> Self {
        assert_eq!(positions.len(), count * 3, "positions length");
        assert_eq!(scales.len(), count * 3, "scales length");
        assert_eq!(rotations.len(), count * 4, "rotations length");
        assert_eq!(opacity_logits.len(), count, "opacity length");
        assert_eq!(class_logits.len(), count * classes, "class logits length");
        Self {
            count,
            classes,
            positions,
            scales,
            rotations,
            opacity_logits,
            class_logits,
        }
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        [
            self.positions[i * 3],
            self.positions[i * 3 + 1],
            self.positions[i * 3 + 2],
        ]
    }

    pub fn scale(&self, i: usize) -> [f64; 3] {
        [
            self.scales[i * 3],
            self.scales[i * 3 + 1],
            self.scales[i * 3 + 2],
        ]
    }

    pub fn rotation(&self, i: usize) -> [f64; 4] {
        [
            self.rotations[i * 4],
            self.rotations[i * 4 + 1],
            self.rotations[i * 4 + 2],
            self.rotations[i * 4 + 3],
        ]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid_val(self.opacity_logits[i])
    }

    /// Structural checks: finite values, positive scales, nonzero
    /// quaternions. Returns the first problem found.
    pub fn validate(&self) -> Result<(), String> {
        let all = self
            .positions
            .iter()
            .chain(&self.scales)
            .chain(&self.rotations)
            .chain(&self.opacity_logits)
            .chain(&self.class_logits);
        for (i, v) in all.enumerate() {
            if !v.is_finite() {
                return Err(format!("non-finite value at flattened offset {}", i));
            }
        }
        for i in 0..self.count {
            let s = self.scale(i);
            if s.iter().any(|&v| v <= 0.0) {
                return Err(format!("gaussian {} has non-positive scale {:?}", i, s));
            }
            let r = self.rotation(i);
            let n2: f64 = r.iter().map(|v| v * v).sum();
            if n2 < 1e-12 {
                return Err(format!("gaussian {} has near-zero quaternion", i));
            }
        }
        Ok(())
    }
}

pub fn quat_normalize(r: [f64; 4]) -> [f64; 4] {
    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(n > 0.0, "zero quaternion");
    [r[0] / n, r[1] / n, r[2] / n, r[3] / n]
}

/// Rotation matrix of a w-first quaternion, normalized internally.
pub fn rotation_matrix(r: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = quat_normalize(r);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Partial derivatives of the unit-quaternion rotation matrix with respect
/// to (w, x, y, z), evaluated at a unit quaternion. Index order
/// `[component][row][col]`.
pub fn rotation_matrix_jacobian(unit: [f64; 4]) -> [[[f64; 3]; 3]; 4] {
    let [w, x, y, z] = unit;
    [
        [
            [0.0, -2.0 * z, 2.0 * y],
            [2.0 * z, 0.0, -2.0 * x],
            [-2.0 * y, 2.0 * x, 0.0],
        ],
        [
            [0.0, 2.0 * y, 2.0 * z],
            [2.0 * y, -4.0 * x, -2.0 * w],
            [2.0 * z, 2.0 * w, -4.0 * x],
        ],
        [
            [-4.0 * y, 2.0 * x, 2.0 * w],
            [2.0 * x, 0.0, 2.0 * z],
            [-2.0 * w, 2.0 * z, -4.0 * y],
        ],
        [
            [-4.0 * z, -2.0 * w, 2.0 * x],
            [2.0 * w, -4.0 * z, 2.0 * y],
            [2.0 * x, 2.0 * y, 0.0],
        ],
    ]
}

/// Full covariance R diag(s^2) R^T; eigenvalues are exactly the squared
/// scales.
pub fn covariance_from(scale: [f64; 3], rotation: [f64; 4]) -> [[f64; 3]; 3] {
    let r = rotation_matrix(rotation);
    let s2 = [scale[0] * scale[0], scale[1] * scale[1], scale[2] * scale[2]];
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| r[i][k] * s2[k] * r[j][k]).sum();
        }
    }
    out
}

/// Initial primitive layout: a jittered lattice filling the grid volume,
/// isotropic scales, identity rotations, uniform class logits, and a
/// shared starting opacity.
pub fn lattice_init(
    grid: &GridSpec,
    count: usize,
    classes: usize,
    scale: f64,
    opacity: f64,
    run_seed: u64,
) -> GaussianSet {
    assert!(count > 0, "need at least one gaussian");
    assert!((0.0..1.0).contains(&opacity) && opacity > 0.0, "opacity must be in (0, 1)");
    let extent = [
        grid.dims[0] as f64 * grid.voxel_size,
        grid.dims[1] as f64 * grid.voxel_size,
        grid.dims[2] as f64 * grid.voxel_size,
    ];
    // lattice resolution proportional to the volume's aspect ratio
    let volume = extent[0] * extent[1] * extent[2];
    let cell = (volume / count as f64).cbrt();
    let n = [
        (extent[0] / cell).round().max(1.0) as usize,
        (extent[1] / cell).round().max(1.0) as usize,
        (extent[2] / cell).round().max(1.0) as usize,
    ];
    let mut r = rng::stream(rng::stream_seed(run_seed, rng::domain::GAUSSIAN_JITTER, 0));
    let mut positions = Vec::with_capacity(count * 3);
    'fill: for ix in 0.. {
        for iy in 0..n[1] {
            for iz in 0..n[2] {
                if positions.len() == count * 3 {
                    break 'fill;
                }
                let lx = ix % n[0];
                let base = [
                    grid.origin[0] + (lx as f64 + 0.5) / n[0] as f64 * extent[0],
                    grid.origin[1] + (iy as f64 + 0.5) / n[1] as f64 * extent[1],
                    grid.origin[2] + (iz as f64 + 0.5) / n[2] as f64 * extent[2],
                ];
                for (a, b) in base.iter().enumerate() {
                    let jitter = 0.25 * extent[a] / n[a] as f64;
                    positions.push(b + r.gen_range(-jitter..jitter));
                }
            }
        }
    }
    let logit = (opacity / (1.0 - opacity)).ln();
    let mut rotations = vec![0.0; count * 4];
    for i in 0..count {
        rotations[i * 4] = 1.0;
    }
    GaussianSet::new(
        count,
        classes,
        positions,
        vec![scale; count * 3],
        rotations,
        vec![logit; count],
        vec![0.0; count * classes],
    )
}

const GAUSSIAN_MAGIC: &[u8; 8] = b"VG3SGAU1";

/// Layout: magic, u32 count, u32 classes, then per primitive f32 fields:
/// position xyz, scale xyz, rotation wxyz, opacity logit, class logits.
pub fn write_gaussians(w: &mut impl Write, g: &GaussianSet) -> Result<(), FormatError> {
    g.validate().map_err(FormatError::Inconsistent)?;
    w.write_all(GAUSSIAN_MAGIC)?;
    fileio::write_u32(w, u32::try_from(g.count).expect("count exceeds u32"))?;
    fileio::write_u32(w, g.classes as u32)?;
    for i in 0..g.count {
        let fields: Vec<f32> = g.positions[i * 3..i * 3 + 3]
            .iter()
            .chain(&g.scales[i * 3..i * 3 + 3])
            .chain(&g.rotations[i * 4..i * 4 + 4])
            .chain(std::iter::once(&g.opacity_logits[i]))
            .chain(&g.class_logits[i * g.classes..(i + 1) * g.classes])
            .map(|&v| v as f32)
            .collect();
        fileio::write_f32_slice(w, &fields)?;
    }
    Ok(())
}

pub fn read_gaussians(r: &mut impl Read) -> Result<GaussianSet, FormatError> {
    fileio::check_magic(r, GAUSSIAN_MAGIC)?;
    let count = fileio::read_u32(r, "count")? as u64;
    let classes = fileio::read_u32(r, "classes")? as u64;
    if count == 0 || classes == 0 {
        return Err(FormatError::Inconsistent(
            "count and classes must be positive".into(),
        ));
    }
    let per = 3 + 3 + 4 + 1 + classes;
    let n = fileio::checked_payload(&[count, per], 4)?;
    let vals = fileio::read_f32_vec(r, n, "gaussian payload")?;
    let (count, classes) = (count as usize, classes as usize);
    let per = per as usize;
    let mut g = GaussianSet::new(
        count,
        classes,
        vec![0.0; count * 3],
        vec![0.0; count * 3],
        vec![0.0; count * 4],
        vec![0.0; count],
        vec![0.0; count * classes],
    );
    for i in 0..count {
        let row = &vals[i * per..(i + 1) * per];
        for a in 0..3 {
            g.positions[i * 3 + a] = row[a] as f64;
            g.scales[i * 3 + a] = row[3 + a] as f64;
        }
        for a in 0..4 {
            g.rotations[i * 4 + a] = row[6 + a] as f64;
        }
        g.opacity_logits[i] = row[10] as f64;
        for c in 0..classes {
            g.class_logits[i * classes + c] = row[11 + c] as f64;
        }
    }
    g.validate().map_err(FormatError::Inconsistent)?;
    Ok(g)
}
