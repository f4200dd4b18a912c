//! Dense voxel grids: geometry, label storage, prediction storage, and
//! the on-disk / PLY representations.

use crate::fileio::{self, FormatError};
use std::io::{Read, Write};

/// Label byte marking an unoccupied voxel.
pub const EMPTY_LABEL: u8 = 255;

/// Axis-aligned grid over the reconstruction volume. Voxel (0,0,0) starts
/// at `origin`; linear index is `(x * dims[1] + y) * dims[2] + z`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub voxel_size: f64,
}

impl GridSpec {
    pub fn new(dims: [usize; 3], origin: [f64; 3], voxel_size: f64) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "grid dims must be positive");
        assert!(voxel_size > 0.0, "voxel size must be positive");
        Self {
            dims,
            origin,
            voxel_size,
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let z = index % self.dims[2];
        let y = (index / self.dims[2]) % self.dims[1];
        let x = index / (self.dims[2] * self.dims[1]);
        [x, y, z]
    }

    pub fn center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin[0] + (x as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (y as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (z as f64 + 0.5) * self.voxel_size,
        ]
    }

    pub fn max_corner(&self) -> [f64; 3] {
        [
            self.origin[0] + self.dims[0] as f64 * self.voxel_size,
            self.origin[1] + self.dims[1] as f64 * self.voxel_size,
            self.origin[2] + self.dims[2] as f64 * self.voxel_size,
        ]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let hi = self.max_corner();
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] <= hi[a])
    }

    /// Voxel index range [lo, hi) per axis covering a world-space box,
    /// clipped to the grid. Empty if the box misses the grid.
    pub fn clip_box(&self, lo: [f64; 3], hi: [f64; 3]) -> Option<[(usize, usize); 3]> {
        let mut out = [(0usize, 0usize); 3];
        for a in 0..3 {
            let lof = ((lo[a] - self.origin[a]) / self.voxel_size).floor();
            let hif = ((hi[a] - self.origin[a]) / self.voxel_size).ceil();
            let l = lof.max(0.0) as usize;
            let h = (hif.max(0.0) as usize).min(self.dims[a]);
            if l >= h {
                return None;
            }
            out[a] = (l, h);
        }
        Some(out)
    }
}

/// Hard semantic labels, one byte per voxel (`EMPTY_LABEL` = unoccupied).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelGrid {
    pub spec: GridSpec,
    /// Number of occupied semantic classes; valid labels are
    /// `0..classes` and `EMPTY_LABEL`.
    pub classes: usize,
    pub labels: Vec<u8>,
}

impl LabelGrid {
    pub fn empty(spec: GridSpec, classes: usize) -> Self {
        let n = spec.num_voxels();
        Self {
            spec,
            classes,
            labels: vec![EMPTY_LABEL; n],
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != EMPTY_LABEL).count()
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        if self.labels.len() != self.spec.num_voxels() {
            return Err(FormatError::Inconsistent(format!(
                "label count {} != voxel count {}",
                self.labels.len(),
                self.spec.num_voxels()
            )));
        }
        if let Some(bad) = self
            .labels
            .iter()
            .find(|&&l| l != EMPTY_LABEL && l as usize >= self.classes)
        {
            return Err(FormatError::Inconsistent(format!(
                "label {} outside 0..{} and not the empty marker",
                bad, self.classes
            )));
        }
        Ok(())
    }
}

/// Soft prediction per voxel: occupancy in [0, 1] plus a distribution
/// over occupied classes (class_probs is `V x classes`, row-major).
#[derive(Clone, Debug)]
pub struct ProbGrid {
    pub spec: GridSpec,
    pub classes: usize,
    pub occupancy: Vec<f64>,
    pub class_probs: Vec<f64>,
}

impl ProbGrid {
    /// Hard labels: argmax over classes where occupancy exceeds the
    /// threshold, otherwise empty. Ties pick the lowest class index.
    pub fn labels_from(&self, threshold: f64) -> LabelGrid {
        let v = self.spec.num_voxels();
        let mut labels = vec![EMPTY_LABEL; v];
        for i in 0..v {
            if self.occupancy[i] > threshold {
                let row = &self.class_probs[i * self.classes..(i + 1) * self.classes];
                let mut best = 0usize;
                for (c, p) in row.iter().enumerate() {
                    if *p > row[best] {
                        best = c;
                    }
                }
                labels[i] = best as u8;
            }
        }
        LabelGrid {
            spec: self.spec.clone(),
            classes: self.classes,
            labels,
        }
    }
}

const VOXEL_MAGIC: &[u8; 8] = b"VG3SVOX1";

/// Layout: magic, u32 dims xyz, u32 classes, f64 origin xyz, f64 voxel
/// size, then one label byte per voxel in linear index order.
pub fn write_label_grid(w: &mut impl Write, grid: &LabelGrid) -> Result<(), FormatError> {
    grid.validate()?;
    w.write_all(VOXEL_MAGIC)?;
    for d in grid.spec.dims {
        fileio::write_u32(w, u32::try_from(d).expect("grid dim exceeds u32"))?;
    }
    fileio::write_u32(w, grid.classes as u32)?;
    for o in grid.spec.origin {
        fileio::write_f64(w, o)?;
    }
    fileio::write_f64(w, grid.spec.voxel_size)?;
    w.write_all(&grid.labels)?;
    Ok(())
}

pub fn read_label_grid(r: &mut impl Read) -> Result<LabelGrid, FormatError> {
    fileio::check_magic(r, VOXEL_MAGIC)?;
    let dx = fileio::read_u32(r, "dims")? as u64;
    let dy = fileio::read_u32(r, "dims")? as u64;
    let dz = fileio::read_u32(r, "dims")? as u64;
    let classes = fileio::read_u32(r, "classes")? as usize;
    if classes == 0 || classes >= EMPTY_LABEL as usize {
        return Err(FormatError::Inconsistent(format!(
            "class count {} unusable (must be 1..{})",
            classes, EMPTY_LABEL
        )));
    }
    let n = fileio::checked_payload(&[dx, dy, dz], 1)?;
    let origin = [
        fileio::read_f64(r, "origin")?,
        fileio::read_f64(r, "origin")?,
        fileio::read_f64(r, "origin")?,
    ];
    let voxel_size = fileio::read_f64(r, "voxel size")?;
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(FormatError::Inconsistent(format!(
            "voxel size {} must be positive and finite",
            voxel_size
        )));
    }
    let mut labels = vec![0u8; n];
    fileio::read_exact(r, &mut labels, "labels")?;
    let grid = LabelGrid {
        spec: GridSpec::new(
            [dx as usize, dy as usize, dz as usize],
            origin,
            voxel_size,
        ),
        classes,
        labels,
    };
    grid.validate()?;
    Ok(grid)
}

/// Distinct colors for rendering classes; reused cyclically past 12.
pub const CLASS_PALETTE: [(u8, u8, u8); 12] = [
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (250, 190, 212),
    (0, 128, 128),
    (220, 190, 255),
];

/// ASCII point cloud of occupied voxel centers, colored by class.
pub fn export_ply(w: &mut impl Write, grid: &LabelGrid) -> Result<(), FormatError> {
    grid.validate()?;
    let count = grid.occupied_count();
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", count)?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "property uchar red")?;
    writeln!(w, "property uchar green")?;
    writeln!(w, "property uchar blue")?;
    writeln!(w, "end_header")?;
    for (i, &label) in grid.labels.iter().enumerate() {
        if label == EMPTY_LABEL {
            continue;
        }
        let [x, y, z] = grid.spec.coords(i);
        let c = grid.spec.center(x, y, z);
        let (r, g, b) = CLASS_PALETTE[label as usize % CLASS_PALETTE.len()];
        writeln!(w, "{} {} {} {} {} {}", c[0], c[1], c[2], r, g, b)?;
    }
    Ok(())
}
