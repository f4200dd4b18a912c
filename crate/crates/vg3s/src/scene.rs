//! Synthetic desk-scale scenes: a ground slab plus axis-aligned boxes,
//! with closed-form point classification and ray casting.

use crate::voxel::{GridSpec, LabelGrid};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneBox {
    pub class: u8,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneBox {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Slab-method ray intersection; returns the entry distance along the
    /// ray if it hits with t > 0.
    pub fn ray_entry(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let mut near = (self.min[a] - origin[a]) * inv;
            let mut far = (self.max[a] - origin[a]) * inv;
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return None;
            }
        }
        if t0 > 0.0 {
            Some(t0)
        } else {
            None
        }
    }
}

/// Ground is a solid slab from the volume floor up to `ground_height`;
/// boxes sit on top of (or anywhere in) the volume. Where solids overlap,
/// the first box in the list wins, and any box beats the ground.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SyntheticScene {
    pub ground_height: Option<f64>,
    pub ground_class: u8,
    pub boxes: Vec<SceneBox>,
}

impl SyntheticScene {
    /// Class of the solid containing `p`, if any.
    pub fn class_at(&self, p: [f64; 3]) -> Option<u8> {
        for b in &self.boxes {
            if b.contains(p) {
                return Some(b.class);
            }
        }
        match self.ground_height {
            Some(h) if p[2] < h => Some(self.ground_class),
            _ => None,
        }
    }

    /// Nearest solid hit by a ray, searching boxes in list order and then
    /// the ground slab (clipped to `volume`); strictly smaller distance
    /// wins, equal distance keeps the earlier candidate.
    pub fn ray_hit(&self, origin: [f64; 3], dir: [f64; 3], volume: &GridSpec) -> Option<(f64, u8)> {
        let mut best: Option<(f64, u8)> = None;
        let mut consider = |t: f64, class: u8| {
            if best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, class));
            }
        };
        for b in &self.boxes {
            if let Some(t) = b.ray_entry(origin, dir) {
                consider(t, b.class);
            }
        }
        if let Some(h) = self.ground_height {
            let hi = volume.max_corner();
            let slab = SceneBox {
                class: self.ground_class,
                min: volume.origin,
                max: [hi[0], hi[1], h.min(hi[2])],
            };
            if slab.max[2] > slab.min[2] {
                if let Some(t) = slab.ray_entry(origin, dir) {
                    consider(t, slab.class);
                }
            }
        }
        best
    }

    /// Checks classes are in range and boxes overlap the grid volume.
    pub fn validate(&self, grid: &GridSpec, classes: usize) -> Result<(), String> {
        if self.ground_height.is_some() && self.ground_class as usize >= classes {
            return Err(format!(
                "ground class {} outside 0..{}",
                self.ground_class, classes
            ));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if b.class as usize >= classes {
                return Err(format!("box {} class {} outside 0..{}", i, b.class, classes));
            }
            if (0..3).any(|a| b.min[a] >= b.max[a]) {
                return Err(format!(
                    "box {} is degenerate: min {:?} max {:?}",
                    i, b.min, b.max
                ));
            }
            if grid.clip_box(b.min, b.max).is_none() {
                return Err(format!("box {} lies entirely outside the grid volume", i));
            }
        }
        Ok(())
    }

    /// Ground-truth labels: each voxel takes the class of the solid
    /// containing its center.
    pub fn rasterize(&self, grid: &GridSpec, classes: usize) -> LabelGrid {
        let mut out = LabelGrid::empty(grid.clone(), classes);
        for x in 0..grid.dims[0] {
            for y in 0..grid.dims[1] {
                for z in 0..grid.dims[2] {
                    if let Some(c) = self.class_at(grid.center(x, y, z)) {
                        out.labels[grid.index(x, y, z)] = c;
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::EMPTY_LABEL;

    fn grid() -> GridSpec {
        GridSpec::new([8, 8, 4], [-4.0, -4.0, -2.0], 1.0)
    }

    fn scene() -> SyntheticScene {
        SyntheticScene {
            ground_height: Some(-1.0),
            ground_class: 0,
            boxes: vec![
                SceneBox {
                    class: 1,
                    min: [-1.0, -1.0, -2.0],
                    max: [1.0, 1.0, 1.0],
                },
                SceneBox {
                    class: 2,
                    min: [2.0, 2.0, -1.0],
                    max: [3.0, 3.0, 0.0],
                },
            ],
        }
    }

    #[test]
    fn point_classification_priorities() {
        let s = scene();
        assert_eq!(s.class_at([0.0, 0.0, 0.0]), Some(1));
        assert_eq!(s.class_at([-3.0, -3.0, -1.5]), Some(0));
        assert_eq!(s.class_at([-3.0, -3.0, 0.5]), None);
        // box overrides ground where both contain the point
        assert_eq!(s.class_at([0.0, 0.0, -1.5]), Some(1));
    }

    #[test]
    fn rasterization_counts_are_plausible() {
        let s = scene();
        let g = s.rasterize(&grid(), 3);
        g.validate().unwrap();
        // ground occupies the bottom layer of voxel centers (z = -1.5)
        // except where box 1 reaches down through it
        let ground = g.labels.iter().filter(|&&l| l == 0).count();
        // box 1 covers 2x2 centers in xy and 3 in z (-1.5, -0.5, 0.5)
        let c1 = g.labels.iter().filter(|&&l| l == 1).count();
        let c2 = g.labels.iter().filter(|&&l| l == 2).count();
        assert_eq!(c1, 12);
        assert_eq!(c2, 1);
        assert_eq!(ground, 64 - 4);
    }

    #[test]
    fn ray_hits_nearest_solid() {
        let s = scene();
        let g = grid();
        // straight down onto the central box
        let hit = s.ray_hit([0.0, 0.0, 5.0], [0.0, 0.0, -1.0], &g).unwrap();
        assert_eq!(hit.1, 1);
        assert!((hit.0 - 4.0).abs() < 1e-12);
        // straight down onto bare ground
        let hit = s.ray_hit([-3.0, -3.0, 5.0], [0.0, 0.0, -1.0], &g).unwrap();
        assert_eq!(hit.1, 0);
        assert!((hit.0 - 6.0).abs() < 1e-12);
        // miss everything
        assert!(s
            .ray_hit([0.0, 0.0, 5.0], [0.0, 0.0, 1.0], &g)
            .is_none());
    }

    #[test]
    fn validation_catches_out_of_volume_boxes() {
        let mut s = scene();
        s.boxes.push(SceneBox {
            class: 1,
            min: [50.0, 50.0, 0.0],
            max: [51.0, 51.0, 1.0],
        });
        assert!(s.validate(&grid(), 3).unwrap_err().contains("outside the grid"));
    }

    #[test]
    fn empty_scene_has_no_hits_or_labels() {
        let s = SyntheticScene::default();
        let g = s.rasterize(&grid(), 3);
        assert_eq!(g.occupied_count(), 0);
        assert!(g.labels.iter().all(|&l| l == EMPTY_LABEL));
        assert!(s
            .ray_hit([0.0, 0.0, 5.0], [0.0, 0.0, -1.0], &grid())
            .is_none());
    }
}
