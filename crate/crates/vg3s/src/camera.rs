//! Pinhole cameras and the multi-view rig around the reconstruction volume.

/// One calibrated pinhole view. `rot`/`trans` map world points into camera
/// coordinates (`cam = rot * world + trans`), camera looks down +z.
/// Intrinsics are in pixels; `width`/`height` give the image extent so
/// projections can be normalized to [0, 1].
#[derive(Clone, Debug)]
pub struct CameraView {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rot: [[f64; 3]; 3],
    pub trans: [f64; 3],
    pub width: f64,
    pub height: f64,
    /// Points with camera-space depth at or below this are invisible.
    pub znear: f64,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    assert!(n > 0.0, "cannot normalize a zero vector");
    [a[0] / n, a[1] / n, a[2] / n]
}

impl CameraView {
    /// Camera at `eye` looking at `target`. `up` is the approximate image
    /// up direction (must not be parallel to the view direction).
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: f64,
        height: f64,
    ) -> Self {
        let forward = normalize(sub(target, eye));
        let right = normalize(cross(forward, up));
        // image y grows downward
        let down = cross(forward, right);
        let rot = [right, down, forward];
        let trans = [-dot(right, eye), -dot(down, eye), -dot(forward, eye)];
        Self {
            fx,
            fy,
            cx,
            cy,
            rot,
            trans,
            width,
            height,
            znear: 0.1,
        }
    }

    pub fn world_to_cam(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rot;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.trans[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.trans[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.trans[2],
        ]
    }

    /// Camera center in world coordinates (-R^T t).
    pub fn position(&self) -> [f64; 3] {
        let r = &self.rot;
        let t = &self.trans;
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    /// World-space unit ray through a pixel (px, py measured in pixels).
    pub fn pixel_ray(&self, px: f64, py: f64) -> ([f64; 3], [f64; 3]) {
        let dir_cam = [(px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0];
        let r = &self.rot;
        // world direction = R^T * dir_cam
        let dir = normalize([
            r[0][0] * dir_cam[0] + r[1][0] * dir_cam[1] + r[2][0] * dir_cam[2],
            r[0][1] * dir_cam[0] + r[1][1] * dir_cam[1] + r[2][1] * dir_cam[2],
            r[0][2] * dir_cam[0] + r[1][2] * dir_cam[1] + r[2][2] * dir_cam[2],
        ]);
        (self.position(), dir)
    }

    /// Checks the rotation is orthonormal with determinant +1 and the
    /// intrinsics are usable. Returns a description of the first problem.
    pub fn validate(&self) -> Result<(), String> {
        let r = &self.rot;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                let got = dot(r[i], r[j]);
                if (got - want).abs() > 1e-9 {
                    return Err(format!(
                        "rotation rows {} and {} have inner product {}, want {}",
                        i, j, got, want
                    ));
                }
            }
        }
        let det = dot(r[0], cross(r[1], r[2]));
        if (det - 1.0).abs() > 1e-9 {
            return Err(format!("rotation determinant {} != 1", det));
        }
        if !(self.fx > 0.0 && self.fy > 0.0 && self.width > 0.0 && self.height > 0.0) {
            return Err("focal lengths and image size must be positive".into());
        }
        Ok(())
    }
}

/// All views of one capture.
#[derive(Clone, Debug)]
pub struct CameraRig {
    pub views: Vec<CameraView>,
}

impl CameraRig {
    /// Evenly spaced ring of cameras around `target`, all at the given
    /// horizontal distance and height, looking at the target.
    #[allow(clippy::too_many_arguments)]
    pub fn orbit(
        count: usize,
        target: [f64; 3],
        distance: f64,
        height: f64,
        fov_deg: f64,
        width: f64,
        height_px: f64,
    ) -> Self {
        assert!(count >= 1, "rig needs at least one view");
        assert!(distance > 0.0, "orbit distance must be positive");
        let fx = 0.5 * width / (0.5 * fov_deg.to_radians()).tan();
        let fy = fx;
        let views = (0..count)
            .map(|i| {
                let angle = std::f64::consts::TAU * i as f64 / count as f64;
                let eye = [
                    target[0] + distance * angle.cos(),
                    target[1] + distance * angle.sin(),
                    target[2] + height,
                ];
                CameraView::look_at(
                    eye,
                    target,
                    [0.0, 0.0, 1.0],
                    fx,
                    fy,
                    0.5 * width,
                    0.5 * height_px,
                    width,
                    height_px,
                )
            })
            .collect();
        Self { views }
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}
