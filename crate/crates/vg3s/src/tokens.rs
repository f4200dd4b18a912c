//! Synthetic stand-in for a frozen vision backbone: per-view, per-layer
//! token grids derived from scene geometry, plus the token file format.

use crate::camera::CameraRig;
use crate::fileio::{self, FormatError};
use crate::rng;
use crate::scene::SyntheticScene;
use crate::voxel::GridSpec;
use rand::Rng;
use std::io::{Read, Write};

/// Token stack for one capture: `views x layers x tokens x channels`,
/// where tokens form a `patch_h x patch_w` grid in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStack {
    pub views: usize,
    pub layers: usize,
    pub tokens: usize,
    pub channels: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    data: Vec<f64>,
}

impl TokenStack {
    pub fn new(
        views: usize,
        layers: usize,
        patch_h: usize,
        patch_w: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Self {
        let tokens = patch_h * patch_w;
        assert_eq!(
            data.len(),
            views * layers * tokens * channels,
            "token data length does not match dimensions"
        );
        Self {
            views,
            layers,
            tokens,
            channels,
            patch_h,
            patch_w,
            data,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, view: usize, layer: usize, token: usize, channel: usize) -> f64 {
        self.data[((view * self.layers + layer) * self.tokens + token) * self.channels + channel]
    }

    /// The `[tokens * channels]` slab of one (view, layer).
    pub fn layer_slab(&self, view: usize, layer: usize) -> &[f64] {
        let stride = self.tokens * self.channels;
        let base = (view * self.layers + layer) * stride;
        &self.data[base..base + stride]
    }
}

/// Knobs for synthetic token generation.
#[derive(Clone, Debug)]
pub struct TokenConfig {
    pub layers: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub channels: usize,
    /// Rays per patch side; each patch casts the square of this.
    pub rays_per_side: usize,
    /// Distances are divided by this; misses read exactly 1.
    pub far_distance: f64,
    /// Uniform noise amplitude added to every token channel.
    pub noise: f64,
}

/// Geometry summary of one patch: normalized mean ray distance, a one-hot
/// over the majority class among hitting rays, and a final slot set when
/// no ray hits anything. Length `2 + classes`.
pub fn patch_descriptor(
    scene: &SyntheticScene,
    volume: &GridSpec,
    view: &crate::camera::CameraView,
    cfg: &TokenConfig,
    classes: usize,
    patch_row: usize,
    patch_col: usize,
) -> Vec<f64> {
    let rs = cfg.rays_per_side;
    let px_w = view.width / cfg.patch_w as f64;
    let px_h = view.height / cfg.patch_h as f64;
    let mut depth_sum = 0.0;
    let mut counts = vec![0usize; classes];
    let mut hits = 0usize;
    for i in 0..rs {
        for j in 0..rs {
            let px = (patch_col as f64 + (j as f64 + 0.5) / rs as f64) * px_w;
            let py = (patch_row as f64 + (i as f64 + 0.5) / rs as f64) * px_h;
            let (origin, dir) = view.pixel_ray(px, py);
            match scene.ray_hit(origin, dir, volume) {
                Some((t, class)) => {
                    depth_sum += (t / cfg.far_distance).min(1.0);
                    counts[class as usize] += 1;
                    hits += 1;
                }
                None => depth_sum += 1.0,
            }
        }
    }
    let total = (rs * rs) as f64;
    let mut desc = vec![0.0; 2 + classes];
    desc[0] = depth_sum / total;
    if hits == 0 {
        desc[1 + classes] = 1.0;
    } else {
        // majority class; ties resolve to the lowest index
        let mut best = 0usize;
        for (c, &n) in counts.iter().enumerate() {
            if n > counts[best] {
                best = c;
            }
        }
        desc[1 + best] = 1.0;
    }
    desc
}

/// Fixed per-layer random projection of descriptors into token space,
/// mimicking how different backbone depths re-encode the same content.
pub fn layer_projection(run_seed: u64, layer: usize, desc_dim: usize, channels: usize) -> Vec<f64> {
    let mut r = rng::stream(rng::stream_seed(
        run_seed,
        rng::domain::TOKEN_PROJECTION,
        layer as u64,
    ));
    (0..desc_dim * channels)
        .map(|_| r.gen_range(-1.0..1.0))
        .collect()
}

pub fn generate_synthetic_tokens(
    scene: &SyntheticScene,
    rig: &CameraRig,
    volume: &GridSpec,
    cfg: &TokenConfig,
    classes: usize,
    run_seed: u64,
) -> TokenStack {
    let desc_dim = 2 + classes;
    let tokens = cfg.patch_h * cfg.patch_w;
    let projections: Vec<Vec<f64>> = (0..cfg.layers)
        .map(|l| layer_projection(run_seed, l, desc_dim, cfg.channels))
        .collect();
    let mut data = vec![0.0; rig.len() * cfg.layers * tokens * cfg.channels];
    for (v, view) in rig.views.iter().enumerate() {
        // descriptors depend on the view only; layers share them
        let descs: Vec<Vec<f64>> = (0..tokens)
            .map(|t| {
                patch_descriptor(
                    scene,
                    volume,
                    view,
                    cfg,
                    classes,
                    t / cfg.patch_w,
                    t % cfg.patch_w,
                )
            })
            .collect();
        for l in 0..cfg.layers {
            let proj = &projections[l];
            let mut noise = rng::stream(rng::stream_seed(
                run_seed,
                rng::domain::TOKEN_NOISE,
                (v * cfg.layers + l) as u64,
            ));
            for (t, desc) in descs.iter().enumerate() {
                let base = ((v * cfg.layers + l) * tokens + t) * cfg.channels;
                for ch in 0..cfg.channels {
                    let mut acc = 0.0;
                    for (d, dv) in desc.iter().enumerate() {
                        acc += dv * proj[d * cfg.channels + ch];
                    }
                    if cfg.noise > 0.0 {
                        acc += noise.gen_range(-cfg.noise..cfg.noise);
                    }
                    data[base + ch] = acc;
                }
            }
        }
    }
    TokenStack::new(
        rig.len(),
        cfg.layers,
        cfg.patch_h,
        cfg.patch_w,
        cfg.channels,
        data,
    )
}

const TOKEN_MAGIC: &[u8; 8] = b"VG3STOK1";
const DTYPE_F32: u32 = 1;
const DTYPE_F64: u32 = 2;

/// Layout: magic, u32 views/layers/tokens/channels/patch_h/patch_w, u32
/// dtype tag (1 = f32, 2 = f64), then the payload in (view, layer, token,
/// channel) row-major order.
pub fn write_token_stack(w: &mut impl Write, stack: &TokenStack) -> Result<(), FormatError> {
    w.write_all(TOKEN_MAGIC)?;
    for d in [
        stack.views,
        stack.layers,
        stack.tokens,
        stack.channels,
        stack.patch_h,
        stack.patch_w,
    ] {
        fileio::write_u32(w, u32::try_from(d).expect("token dim exceeds u32"))?;
    }
    fileio::write_u32(w, DTYPE_F64)?;
    fileio::write_f64_slice(w, &stack.data)?;
    Ok(())
}

pub fn read_token_stack(r: &mut impl Read) -> Result<TokenStack, FormatError> {
    fileio::check_magic(r, TOKEN_MAGIC)?;
    let views = fileio::read_u32(r, "views")? as u64;
    let layers = fileio::read_u32(r, "layers")? as u64;
    let tokens = fileio::read_u32(r, "tokens")? as u64;
    let channels = fileio::read_u32(r, "channels")? as u64;
    let patch_h = fileio::read_u32(r, "patch height")? as u64;
    let patch_w = fileio::read_u32(r, "patch width")? as u64;
    if views == 0 || layers == 0 || tokens == 0 || channels == 0 {
        return Err(FormatError::Inconsistent(
            "all token dimensions must be positive".into(),
        ));
    }
    if patch_h * patch_w != tokens {
        return Err(FormatError::Inconsistent(format!(
            "token count {} != patch grid {}x{}",
            tokens, patch_h, patch_w
        )));
    }
    let dtype = fileio::read_u32(r, "dtype")?;
    let elem = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        other => return Err(FormatError::UnknownDtype(other)),
    };
    let n = fileio::checked_payload(&[views, layers, tokens, channels], elem)?;
    let data = match dtype {
        DTYPE_F32 => fileio::read_f32_vec(r, n, "token payload")?
            .into_iter()
            .map(f64::from)
            .collect(),
        _ => fileio::read_f64_vec(r, n, "token payload")?,
    };
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(FormatError::Inconsistent(
            "trailing bytes after token payload".into(),
        ));
    }
    Ok(TokenStack::new(
        views as usize,
        layers as usize,
        patch_h as usize,
        patch_w as usize,
        channels as usize,
        data,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SceneBox;
    use std::io::Cursor;

    fn setup() -> (SyntheticScene, CameraRig, GridSpec, TokenConfig) {
        let scene = SyntheticScene {
            ground_height: Some(-1.0),
            ground_class: 0,
            boxes: vec![SceneBox {
                class: 1,
                min: [-2.5, -2.5, -1.0],
                max: [2.5, 2.5, 1.5],
            }],
        };
        let rig = CameraRig::orbit(2, [0.0, 0.0, 0.0], 10.0, 4.0, 60.0, 64.0, 64.0);
        let grid = GridSpec::new([16, 16, 8], [-4.0, -4.0, -2.0], 0.5);
        let cfg = TokenConfig {
            layers: 4,
            patch_h: 4,
            patch_w: 4,
            channels: 8,
            rays_per_side: 2,
            far_distance: 30.0,
            noise: 0.01,
        };
        (scene, rig, grid, cfg)
    }

    #[test]
    fn empty_scene_descriptor_is_far_plane_sentinel() {
        let (_, rig, grid, cfg) = setup();
        let empty = SyntheticScene::default();
        let d = patch_descriptor(&empty, &grid, &rig.views[0], &cfg, 3, 1, 2);
        assert_eq!(d[0], 1.0);
        assert_eq!(d[4], 1.0);
        assert_eq!(&d[1..4], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn descriptors_cover_box_ground_and_sky() {
        let (scene, rig, grid, cfg) = setup();
        let mut box_major = 0;
        let mut ground_major = 0;
        let mut sky = 0;
        for r in 0..cfg.patch_h {
            for c in 0..cfg.patch_w {
                let d = patch_descriptor(&scene, &grid, &rig.views[0], &cfg, 3, r, c);
                assert!((d.iter().skip(1).sum::<f64>() - 1.0).abs() < 1e-15);
                if d[2] == 1.0 {
                    box_major += 1;
                    assert!(d[0] < 1.0, "a box patch must see finite depth: {:?}", d);
                }
                if d[1] == 1.0 {
                    ground_major += 1;
                }
                if d[4] == 1.0 {
                    sky += 1;
                }
            }
        }
        assert!(box_major > 0, "no patch sees the box as majority");
        assert!(ground_major > 0, "no patch sees the ground as majority");
        assert!(sky > 0, "no patch misses everything");
    }

    #[test]
    fn generation_is_deterministic_and_layer_dependent() {
        let (scene, rig, grid, cfg) = setup();
        let a = generate_synthetic_tokens(&scene, &rig, &grid, &cfg, 3, 11);
        let b = generate_synthetic_tokens(&scene, &rig, &grid, &cfg, 3, 11);
        assert_eq!(a, b);
        let c = generate_synthetic_tokens(&scene, &rig, &grid, &cfg, 3, 12);
        assert_ne!(a, c);
        // different layers encode the same view differently
        assert_ne!(a.layer_slab(0, 0), a.layer_slab(0, 1));
    }

    #[test]
    fn file_roundtrip_is_bit_exact() {
        let (scene, rig, grid, cfg) = setup();
        let stack = generate_synthetic_tokens(&scene, &rig, &grid, &cfg, 3, 5);
        let mut buf = Vec::new();
        write_token_stack(&mut buf, &stack).unwrap();
        let back = read_token_stack(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(back, stack);
    }

    #[test]
    fn reader_rejects_mismatched_patch_grid() {
        let (scene, rig, grid, cfg) = setup();
        let stack = generate_synthetic_tokens(&scene, &rig, &grid, &cfg, 3, 5);
        let mut buf = Vec::new();
        write_token_stack(&mut buf, &stack).unwrap();
        // patch_w field is the 6th u32 after the magic
        let off = 8 + 4 * 5;
        buf[off..off + 4].copy_from_slice(&7u32.to_le_bytes());
        match read_token_stack(&mut Cursor::new(&buf)) {
            Err(FormatError::Inconsistent(msg)) => assert!(msg.contains("patch grid")),
            other => panic!("expected patch grid error, got {:?}", other),
        }
    }

    #[test]
    fn reader_rejects_unknown_dtype_and_trailing_bytes() {
        let (scene, rig, grid, cfg) = setup();
        let stack = generate_synthetic_tokens(&scene, &rig, &grid, &cfg, 3, 5);
        let mut buf = Vec::new();
        write_token_stack(&mut buf, &stack).unwrap();
        let mut bad_dtype = buf.clone();
        let off = 8 + 4 * 6;
        bad_dtype[off..off + 4].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            read_token_stack(&mut Cursor::new(&bad_dtype)),
            Err(FormatError::UnknownDtype(9))
        ));
        buf.push(0);
        assert!(matches!(
            read_token_stack(&mut Cursor::new(&buf)),
            Err(FormatError::Inconsistent(_))
        ));
    }

    #[test]
    fn f32_payloads_are_accepted() {
        let (scene, rig, grid, cfg) = setup();
        let stack = generate_synthetic_tokens(&scene, &rig, &grid, &cfg, 3, 5);
        // hand-encode an f32 variant of the same stack
        let mut buf = Vec::new();
        buf.extend_from_slice(b"VG3STOK1");
        for d in [
            stack.views,
            stack.layers,
            stack.tokens,
            stack.channels,
            stack.patch_h,
            stack.patch_w,
        ] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&1u32.to_le_bytes());
        for v in stack.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let back = read_token_stack(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(back.views, stack.views);
        let err: f64 = back
            .data()
            .iter()
            .zip(stack.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "f32 roundtrip drift {}", err);
    }
}
