//! Flat `key = value` run configuration. Unknown keys are rejected by
//! name, every scalar has a desk-scale default, and `validate` performs
//! the cross-module consistency checks before anything runs.

use crate::camera::CameraRig;
use crate::decoder::DecoderConfig;
use crate::hgfa::HgfaConfig;
use crate::loss::LossConfig;
use crate::scene::{SceneBox, SyntheticScene};
use crate::tokens::TokenConfig;
use crate::voxel::GridSpec;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub run_seed: u64,
    // cameras and synthetic tokens
    pub views: usize,
    pub cam_distance: f64,
    pub cam_height: f64,
    pub cam_fov_deg: f64,
    pub image_width: f64,
    pub image_height: f64,
    pub token_rays: usize,
    pub token_far: f64,
    pub token_noise: f64,
    // backbone stack
    pub layers: usize,
    pub channels: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    // adapter
    pub groups: usize,
    pub layers_per_group: usize,
    pub expansion: Vec<f64>,
    pub hidden_dims: Vec<usize>,
    pub scales: Vec<f64>,
    pub out_channels: usize,
    pub se_reduction: usize,
    pub se_bypass: bool,
    pub dropout: f64,
    // decoder
    pub blocks: usize,
    pub decoder_hidden: usize,
    pub pos_cap: f64,
    pub scale_cap: f64,
    pub rot_cap: f64,
    pub opacity_cap: f64,
    pub class_cap: f64,
    // gaussians
    pub gaussians: usize,
    pub init_scale: f64,
    pub init_opacity: f64,
    pub learn_init: bool,
    pub scale_min_factor: f64,
    pub scale_max_factor: f64,
    pub kappa: f64,
    // occupancy grid
    pub grid_dims: [usize; 3],
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub classes: usize,
    // scene
    pub ground_height: Option<f64>,
    pub ground_class: u8,
    pub boxes: Vec<SceneBox>,
    // training and evaluation
    pub steps: usize,
    pub warmup: usize,
    pub peak_lr: f64,
    pub ce_weight: f64,
    pub lovasz_weight: f64,
    pub threshold: f64,
    pub workers: usize,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_seed: 42,
            views: 2,
            cam_distance: 10.0,
            cam_height: 4.0,
            cam_fov_deg: 60.0,
            image_width: 64.0,
            image_height: 64.0,
            token_rays: 2,
            token_far: 30.0,
            token_noise: 0.05,
            layers: 8,
            channels: 32,
            patch_h: 8,
            patch_w: 8,
            groups: 4,
            layers_per_group: 2,
            expansion: vec![4.0, 3.0, 2.0, 1.5],
            hidden_dims: vec![96, 64, 48, 32],
            scales: vec![4.0, 2.0, 1.0, 0.5],
            out_channels: 32,
            se_reduction: 4,
            se_bypass: false,
            dropout: 0.1,
            blocks: 2,
            decoder_hidden: 64,
            pos_cap: 0.5,
            scale_cap: 0.5,
            rot_cap: 0.5,
            opacity_cap: 1.0,
            class_cap: 1.0,
            gaussians: 512,
            init_scale: 0.2,
            init_opacity: 0.1,
            learn_init: true,
            scale_min_factor: 0.1,
            scale_max_factor: 8.0,
            kappa: 3.0,
            grid_dims: [32, 32, 8],
            origin: [-8.0, -8.0, -2.0],
            voxel_size: 0.5,
            classes: 4,
            ground_height: Some(-1.0),
            ground_class: 0,
            boxes: vec![
                SceneBox {
                    class: 1,
                    min: [-4.0, -4.0, -1.0],
                    max: [-1.0, -1.0, 1.0],
                },
                SceneBox {
                    class: 2,
                    min: [1.0, 0.0, -1.0],
                    max: [4.0, 2.5, 0.5],
                },
                SceneBox {
                    class: 3,
                    min: [-2.0, 2.0, -1.0],
                    max: [2.0, 5.0, 0.0],
                },
            ],
            steps: 300,
            warmup: 30,
            peak_lr: 1e-2,
            ce_weight: 1.0,
            lovasz_weight: 1.0,
            threshold: 0.5,
            workers: 0,
            log_every: 10,
        }
    }
}

/// Parsed lines of a config file plus bookkeeping for unknown keys.
struct KeyMap {
    entries: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl KeyMap {
    fn parse(text: &str) -> Result<Self, String> {
        let mut entries = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", ln + 1))?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(format!("line {}: empty key", ln + 1));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(format!("line {}: duplicate key '{}'", ln + 1, key));
            }
        }
        Ok(Self {
            entries,
            used: BTreeSet::new(),
        })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.get(key).map(|v| {
            self.used.insert(key.to_string());
            v.clone()
        })
    }

    fn set<T, F>(&mut self, key: &str, slot: &mut T, parse: F) -> Result<(), String>
    where
        F: FnOnce(&str) -> Result<T, String>,
    {
        if let Some(v) = self.take(key) {
            *slot = parse(&v).map_err(|e| format!("key '{}': {}", key, e))?;
        }
        Ok(())
    }

    fn unknown(&self) -> Option<&String> {
        self.entries.keys().find(|k| !self.used.contains(*k))
    }
}

fn parse_u64(v: &str) -> Result<u64, String> {
    v.parse().map_err(|_| format!("'{}' is not an integer", v))
}

fn parse_usize(v: &str) -> Result<usize, String> {
    v.parse().map_err(|_| format!("'{}' is not an integer", v))
}

fn parse_u8(v: &str) -> Result<u8, String> {
    v.parse().map_err(|_| format!("'{}' is not a small integer", v))
}

fn parse_f64(v: &str) -> Result<f64, String> {
    v.parse().map_err(|_| format!("'{}' is not a number", v))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("'{}' is not true/false", v)),
    }
}

fn parse_f64_list(v: &str) -> Result<Vec<f64>, String> {
    v.split(',').map(|p| parse_f64(p.trim())).collect()
}

fn parse_usize_list(v: &str) -> Result<Vec<usize>, String> {
    v.split(',').map(|p| parse_usize(p.trim())).collect()
}

fn parse_opt_f64(v: &str) -> Result<Option<f64>, String> {
    if v == "none" {
        Ok(None)
    } else {
        parse_f64(v).map(Some)
    }
}

fn parse_scene_box(v: &str) -> Result<SceneBox, String> {
    let parts: Vec<&str> = v.split(',').map(|p| p.trim()).collect();
    if parts.len() != 7 {
        return Err(format!(
            "expected class,minx,miny,minz,maxx,maxy,maxz (7 fields), got {}",
            parts.len()
        ));
    }
    let class = parse_u8(parts[0])?;
    let nums: Vec<f64> = parts[1..]
        .iter()
        .map(|p| parse_f64(p))
        .collect::<Result<_, _>>()?;
    Ok(SceneBox {
        class,
        min: [nums[0], nums[1], nums[2]],
        max: [nums[3], nums[4], nums[5]],
    })
}

impl RunConfig {
    /// Applies overrides from config text onto the desk defaults. Any
    /// `scene_box_<i>` key replaces the default boxes entirely.
    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut m = KeyMap::parse(text)?;
        let mut c = RunConfig::default();
        m.set("run_seed", &mut c.run_seed, parse_u64)?;
        m.set("views", &mut c.views, parse_usize)?;
        m.set("cam_distance", &mut c.cam_distance, parse_f64)?;
        m.set("cam_height", &mut c.cam_height, parse_f64)?;
        m.set("cam_fov_deg", &mut c.cam_fov_deg, parse_f64)?;
        m.set("image_width", &mut c.image_width, parse_f64)?;
        m.set("image_height", &mut c.image_height, parse_f64)?;
        m.set("token_rays", &mut c.token_rays, parse_usize)?;
        m.set("token_far", &mut c.token_far, parse_f64)?;
        m.set("token_noise", &mut c.token_noise, parse_f64)?;
        m.set("layers", &mut c.layers, parse_usize)?;
        m.set("channels", &mut c.channels, parse_usize)?;
        m.set("patch_h", &mut c.patch_h, parse_usize)?;
        m.set("patch_w", &mut c.patch_w, parse_usize)?;
        m.set("groups", &mut c.groups, parse_usize)?;
        m.set("layers_per_group", &mut c.layers_per_group, parse_usize)?;
        m.set("expansion", &mut c.expansion, parse_f64_list)?;
        m.set("hidden_dims", &mut c.hidden_dims, parse_usize_list)?;
        m.set("scales", &mut c.scales, parse_f64_list)?;
        m.set("out_channels", &mut c.out_channels, parse_usize)?;
        m.set("se_reduction", &mut c.se_reduction, parse_usize)?;
        m.set("se_bypass", &mut c.se_bypass, parse_bool)?;
        m.set("dropout", &mut c.dropout, parse_f64)?;
        m.set("blocks", &mut c.blocks, parse_usize)?;
        m.set("decoder_hidden", &mut c.decoder_hidden, parse_usize)?;
        m.set("pos_cap", &mut c.pos_cap, parse_f64)?;
        m.set("scale_cap", &mut c.scale_cap, parse_f64)?;
        m.set("rot_cap", &mut c.rot_cap, parse_f64)?;
        m.set("opacity_cap", &mut c.opacity_cap, parse_f64)?;
        m.set("class_cap", &mut c.class_cap, parse_f64)?;
        m.set("gaussians", &mut c.gaussians, parse_usize)?;
        m.set("init_scale", &mut c.init_scale, parse_f64)?;
        m.set("init_opacity", &mut c.init_opacity, parse_f64)?;
        m.set("learn_init", &mut c.learn_init, parse_bool)?;
        m.set("scale_min_factor", &mut c.scale_min_factor, parse_f64)?;
        m.set("scale_max_factor", &mut c.scale_max_factor, parse_f64)?;
        m.set("kappa", &mut c.kappa, parse_f64)?;
        m.set("grid_x", &mut c.grid_dims[0], parse_usize)?;
        m.set("grid_y", &mut c.grid_dims[1], parse_usize)?;
        m.set("grid_z", &mut c.grid_dims[2], parse_usize)?;
        m.set("origin_x", &mut c.origin[0], parse_f64)?;
        m.set("origin_y", &mut c.origin[1], parse_f64)?;
        m.set("origin_z", &mut c.origin[2], parse_f64)?;
        m.set("voxel_size", &mut c.voxel_size, parse_f64)?;
        m.set("classes", &mut c.classes, parse_usize)?;
        m.set("ground_height", &mut c.ground_height, parse_opt_f64)?;
        m.set("ground_class", &mut c.ground_class, parse_u8)?;
        m.set("steps", &mut c.steps, parse_usize)?;
        m.set("warmup", &mut c.warmup, parse_usize)?;
        m.set("peak_lr", &mut c.peak_lr, parse_f64)?;
        m.set("ce_weight", &mut c.ce_weight, parse_f64)?;
        m.set("lovasz_weight", &mut c.lovasz_weight, parse_f64)?;
        m.set("threshold", &mut c.threshold, parse_f64)?;
        m.set("workers", &mut c.workers, parse_usize)?;
        m.set("log_every", &mut c.log_every, parse_usize)?;

        let box_keys: Vec<String> = m
            .entries
            .keys()
            .filter(|k| k.starts_with("scene_box_"))
            .cloned()
            .collect();
        if !box_keys.is_empty() {
            let mut indexed: Vec<(usize, SceneBox)> = Vec::new();
            for key in &box_keys {
                let idx: usize = key["scene_box_".len()..]
                    .parse()
                    .map_err(|_| format!("key '{}': suffix must be an integer", key))?;
                let v = m.take(key).unwrap();
                let b = parse_scene_box(&v).map_err(|e| format!("key '{}': {}", key, e))?;
                indexed.push((idx, b));
            }
            indexed.sort_by_key(|(i, _)| *i);
            c.boxes = indexed.into_iter().map(|(_, b)| b).collect();
        }

        if let Some(k) = m.unknown() {
            return Err(format!("unknown key '{}'", k));
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {}", path.display(), e))?;
        Self::from_text(&text)
    }

    pub fn scale_min(&self) -> f64 {
        self.scale_min_factor * self.voxel_size
    }

    pub fn scale_max(&self) -> f64 {
        self.scale_max_factor * self.voxel_size
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec::new(self.grid_dims, self.origin, self.voxel_size)
    }

    pub fn rig(&self) -> CameraRig {
        let spec = self.grid_spec();
        let hi = spec.max_corner();
        let target = [
            0.5 * (self.origin[0] + hi[0]),
            0.5 * (self.origin[1] + hi[1]),
            0.5 * (self.origin[2] + hi[2]),
        ];
        CameraRig::orbit(
            self.views,
            target,
            self.cam_distance,
            self.cam_height,
            self.cam_fov_deg,
            self.image_width,
            self.image_height,
        )
    }

    pub fn token_config(&self) -> TokenConfig {
        TokenConfig {
            layers: self.layers,
            patch_h: self.patch_h,
            patch_w: self.patch_w,
            channels: self.channels,
            rays_per_side: self.token_rays,
            far_distance: self.token_far,
            noise: self.token_noise,
        }
    }

    pub fn hgfa_config(&self) -> HgfaConfig {
        HgfaConfig {
            layers: self.layers,
            groups: self.groups,
            layers_per_group: self.layers_per_group,
            channels: self.channels,
            patch_h: self.patch_h,
            patch_w: self.patch_w,
            expansion: self.expansion.clone(),
            hidden_dims: self.hidden_dims.clone(),
            scales: self.scales.clone(),
            out_channels: self.out_channels,
            se_reduction: self.se_reduction,
            se_bypass: self.se_bypass,
            dropout: self.dropout,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            blocks: self.blocks,
            hidden: self.decoder_hidden,
            classes: self.classes,
            feature_channels: self.out_channels,
            levels: self.groups,
            pos_cap: self.pos_cap,
            scale_cap: self.scale_cap,
            rot_cap: self.rot_cap,
            opacity_cap: self.opacity_cap,
            class_cap: self.class_cap,
            scale_min: self.scale_min(),
            scale_max: self.scale_max(),
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            ce_weight: self.ce_weight,
            lovasz_weight: self.lovasz_weight,
            class_weights: None,
        }
    }

    pub fn scene(&self) -> SyntheticScene {
        SyntheticScene {
            ground_height: self.ground_height,
            ground_class: self.ground_class,
            boxes: self.boxes.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.views == 0 {
            return Err("views must be positive".into());
        }
        if !(self.cam_distance > 0.0) {
            return Err("cam_distance must be positive".into());
        }
        if !(self.cam_fov_deg > 0.0 && self.cam_fov_deg < 180.0) {
            return Err("cam_fov_deg must be in (0, 180)".into());
        }
        if !(self.image_width >= 1.0 && self.image_height >= 1.0) {
            return Err("image dimensions must be at least one pixel".into());
        }
        if self.token_rays == 0 {
            return Err("token_rays must be positive".into());
        }
        if !(self.token_far > 0.0) {
            return Err("token_far must be positive".into());
        }
        if self.token_noise < 0.0 {
            return Err("token_noise must be nonnegative".into());
        }
        self.hgfa_config()
            .validate()
            .map_err(|e| format!("adapter: {}", e))?;
        self.decoder_config()
            .validate()
            .map_err(|e| format!("decoder: {}", e))?;
        if self.grid_dims.iter().any(|&d| d == 0) {
            return Err("grid dimensions must be positive".into());
        }
        if !(self.voxel_size > 0.0) {
            return Err("voxel_size must be positive".into());
        }
        if self.classes == 0 || self.classes >= 255 {
            return Err("classes must be in 1..255".into());
        }
        self.scene()
            .validate(&self.grid_spec(), self.classes)
            .map_err(|e| format!("scene: {}", e))?;
        if self.gaussians == 0 {
            return Err("gaussians must be positive".into());
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return Err("init_opacity must be in (0, 1)".into());
        }
        if !(self.init_scale >= self.scale_min() && self.init_scale <= self.scale_max()) {
            return Err(format!(
                "init_scale {} outside [{}, {}]",
                self.init_scale,
                self.scale_min(),
                self.scale_max()
            ));
        }
        if !(self.kappa > 0.0) {
            return Err("kappa must be positive".into());
        }
        if self.steps == 0 {
            return Err("steps must be positive".into());
        }
        if self.warmup > self.steps {
            return Err("warmup cannot exceed steps".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err("peak_lr must be positive and finite".into());
        }
        if self.ce_weight < 0.0 || self.lovasz_weight < 0.0 {
            return Err("loss weights must be nonnegative".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err("threshold must be in (0, 1)".into());
        }
        if self.log_every == 0 {
            return Err("log_every must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn empty_text_gives_defaults() {
        let c = RunConfig::from_text("# nothing here\n\n").unwrap();
        assert_eq!(c.gaussians, RunConfig::default().gaussians);
        assert_eq!(c.boxes.len(), 3);
    }

    #[test]
    fn overrides_apply_and_unknown_keys_are_named() {
        let c = RunConfig::from_text("gaussians = 64\nkappa = 5.0\nse_bypass = true\n").unwrap();
        assert_eq!(c.gaussians, 64);
        assert_eq!(c.kappa, 5.0);
        assert!(c.se_bypass);
        let err = RunConfig::from_text("gausians = 64\n").unwrap_err();
        assert!(err.contains("gausians"), "{}", err);
    }

    #[test]
    fn scene_boxes_replace_defaults_in_index_order() {
        let text = "scene_box_2 = 2, 1, 1, -1, 2, 2, 0\nscene_box_1 = 1, -2, -2, -1, 0, 0, 0\n";
        let c = RunConfig::from_text(text).unwrap();
        assert_eq!(c.boxes.len(), 2);
        assert_eq!(c.boxes[0].class, 1);
        assert_eq!(c.boxes[1].class, 2);
        let bad = RunConfig::from_text("scene_box_1 = 1, 0, 0\n").unwrap_err();
        assert!(bad.contains("7 fields"), "{}", bad);
    }

    #[test]
    fn duplicate_and_malformed_lines_are_rejected() {
        assert!(RunConfig::from_text("steps = 10\nsteps = 20\n")
            .unwrap_err()
            .contains("duplicate"));
        assert!(RunConfig::from_text("just words\n")
            .unwrap_err()
            .contains("key = value"));
        assert!(RunConfig::from_text("steps = ten\n")
            .unwrap_err()
            .contains("steps"));
    }

    #[test]
    fn validation_names_the_failing_constraint() {
        let mut c = RunConfig::default();
        c.warmup = 1000;
        assert!(c.validate().unwrap_err().contains("warmup"));
        let mut c = RunConfig::default();
        c.scales = vec![4.0, 2.0, 1.0, 0.4];
        let err = c.validate().unwrap_err();
        assert!(err.starts_with("adapter:"), "{}", err);
        let mut c = RunConfig::default();
        c.boxes[0].class = 9;
        assert!(c.validate().unwrap_err().starts_with("scene:"));
    }

    #[test]
    fn ground_can_be_disabled() {
        let c = RunConfig::from_text("ground_height = none\n").unwrap();
        assert_eq!(c.ground_height, None);
        let c = RunConfig::from_text("ground_height = -0.5\n").unwrap();
        assert_eq!(c.ground_height, Some(-0.5));
    }

    #[test]
    fn shipped_configs_parse_and_validate() {
        let desk = RunConfig::from_text(include_str!("../../../configs/desk.cfg")).unwrap();
        desk.validate().unwrap();
        assert_eq!(desk.gaussians, 512);
        assert_eq!(desk.boxes.len(), 3);
        let full = RunConfig::from_text(include_str!("../../../configs/full.cfg")).unwrap();
        full.validate().unwrap();
        assert_eq!(full.layers, 24);
        // L * (16 + 4 + 1 + 0.25) with L = 56 * 88
        assert_eq!(full.hgfa_config().flattened_len(), 56 * 88 * 21 + 56 * 88 / 4);
    }

    #[test]
    fn derived_views_agree_with_grid_volume() {
        let c = RunConfig::default();
        let rig = c.rig();
        assert_eq!(rig.views.len(), c.views);
        let spec = c.grid_spec();
        assert_eq!(spec.dims, [32, 32, 8]);
        assert_eq!(spec.max_corner(), [8.0, 8.0, 2.0]);
        assert_eq!(c.scale_min(), 0.05);
    }
}
