//! Procedural camouflaged-motion clips.
//!
//! A clip is a single smooth blob ("sprite") translating over a value-noise
//! background. With `camo_strength = 1` the sprite is cut from the same
//! texture field as the background, so only its motion gives it away.
//!
//! Flow convention: `flows_gt[k]` is the forward flow `F_{k -> k+1}` on the
//! pixel grid of frame `k`. A pixel `p` of frame `k` lands at `p + F(p)` in
//! frame `k + 1`. Backward warping frame `k` into frame `k + 1` therefore
//! samples at `p - F`, i.e. uses the negated field (see [`VideoClip::backward_flow`]).
//! Pixels uncovered by the sprite (dis-occlusions) carry the background flow.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::noise::{derive_seed, fbm};

/// Backbone stride that frame sizes must be divisible by.
pub const FRAME_DIVISOR: usize = 32;

const BG_CELL: f64 = 16.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid `{field}`: {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

impl ConfigError {
    fn new(field: &'static str, reason: impl Into<String>) -> Self {
        Self {
            field,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamoGenConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub clip_len: usize,
    /// Target sprite area as a fraction of the frame, in `(0, 0.25]`.
    pub sprite_area_frac: f64,
    /// 1 = sprite texture from the background family, 0 = contrasting palette.
    pub camo_strength: f64,
    /// Per-axis bound of the per-frame sprite displacement, in pixels.
    pub max_step: i32,
    /// Global background translation per frame `(dx, dy)`.
    pub bg_drift: (i32, i32),
    pub texture_octaves: u32,
}

impl Default for CamoGenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            clip_len: 8,
            sprite_area_frac: 0.12,
            camo_strength: 1.0,
            max_step: 4,
            bg_drift: (0, 0),
            texture_octaves: 4,
        }
    }
}

impl CamoGenConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.height == 0 || self.height % FRAME_DIVISOR != 0 {
            return Err(ConfigError::new("height", "must be a positive multiple of 32"));
        }
        if self.width == 0 || self.width % FRAME_DIVISOR != 0 {
            return Err(ConfigError::new("width", "must be a positive multiple of 32"));
        }
        if self.clip_len < 2 {
            return Err(ConfigError::new("clip_len", "must be at least 2"));
        }
        if !(self.sprite_area_frac > 0.0 && self.sprite_area_frac <= 0.25) {
            return Err(ConfigError::new("sprite_area_frac", "must lie in (0, 0.25]"));
        }
        if !(0.0..=1.0).contains(&self.camo_strength) {
            return Err(ConfigError::new("camo_strength", "must lie in [0, 1]"));
        }
        if self.max_step < 0 {
            return Err(ConfigError::new("max_step", "must be non-negative"));
        }
        if self.texture_octaves == 0 {
            return Err(ConfigError::new("texture_octaves", "must be at least 1"));
        }
        Ok(())
    }

    pub fn target_area(&self) -> usize {
        libm::round(self.sprite_area_frac * (self.height * self.width) as f64).max(1.0) as usize
    }
}

/// One generated sequence. Arrays are dense and row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoClip {
    /// `[T, H, W, 3]` in `[0, 1]`.
    pub frames: Vec<f32>,
    /// `[T, H, W]`, 1 = sprite.
    pub masks: Vec<u8>,
    /// `[T - 1, H, W, 2]` forward flow `(dx, dy)` in pixels.
    pub flows_gt: Option<Vec<f32>>,
    /// Sprite displacement applied between frame `t - 1` and `t`, index `t - 1`.
    pub sprite_steps: Vec<(i32, i32)>,
    pub meta: CamoGenConfig,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.meta.clip_len
    }

    pub fn is_empty(&self) -> bool {
        self.meta.clip_len == 0
    }

    pub fn height(&self) -> usize {
        self.meta.height
    }

    pub fn width(&self) -> usize {
        self.meta.width
    }

    fn plane(&self) -> usize {
        self.meta.height * self.meta.width
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.plane() * 3;
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn mask(&self, t: usize) -> &[u8] {
        let n = self.plane();
        &self.masks[t * n..(t + 1) * n]
    }

    /// Forward flow `F_{t-1 -> t}` on the grid of frame `t - 1`; `t >= 1`.
    pub fn flow_into(&self, t: usize) -> Option<&[f32]> {
        let n = self.plane() * 2;
        self.flows_gt
            .as_ref()
            .map(|f| &f[(t - 1) * n..t * n])
    }

    pub fn mask_area(&self, t: usize) -> usize {
        self.mask(t).iter().filter(|&&m| m != 0).count()
    }

    /// Flow on the grid of frame `t` pointing back into frame `t - 1`.
    ///
    /// Sampling frame `t - 1` at `p + backward_flow(t)[p]` reproduces frame `t`
    /// exactly wherever the source pixel is inside the image.
    pub fn backward_flow(&self, t: usize) -> Vec<f32> {
        let (dx, dy) = self.sprite_steps[t - 1];
        let (bx, by) = self.meta.bg_drift;
        self.mask(t)
            .iter()
            .flat_map(|&m| {
                if m != 0 {
                    [-dx as f32, -dy as f32]
                } else {
                    [-bx as f32, -by as f32]
                }
            })
            .collect()
    }
}

/// Sprite silhouette in its own tight bounding box.
struct Shape {
    width: usize,
    height: usize,
    inside: Vec<bool>,
}

impl Shape {
    fn contains(&self, u: i64, v: i64) -> bool {
        u >= 0
            && v >= 0
            && (u as usize) < self.width
            && (v as usize) < self.height
            && self.inside[v as usize * self.width + u as usize]
    }
}

/// Thresholded low-frequency noise over a radial falloff, cut to exactly `area` pixels.
fn make_shape(seed: u64, area: usize) -> Shape {
    let diameter = 2.0 * libm::sqrt(area as f64 / core::f64::consts::PI);
    let side = libm::ceil(diameter * 1.6) as usize + 2;
    let half = side as f64 / 2.0;
    let mut scored: Vec<(f64, usize)> = (0..side * side)
        .map(|i| {
            let (u, v) = ((i % side) as f64 + 0.5, (i / side) as f64 + 0.5);
            let r = libm::hypot(u - half, v - half) / half;
            let wobble = fbm(seed, u, v, side as f64 / 2.5, 2) - 0.5;
            (1.0 - r + 0.6 * wobble, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut full = vec![false; side * side];
    for &(_, i) in scored.iter().take(area.min(side * side)) {
        full[i] = true;
    }
    let (mut u0, mut v0, mut u1, mut v1) = (side, side, 0, 0);
    for (i, _) in full.iter().enumerate().filter(|(_, &b)| b) {
        let (u, v) = (i % side, i / side);
        u0 = u0.min(u);
        v0 = v0.min(v);
        u1 = u1.max(u);
        v1 = v1.max(v);
    }
    let (width, height) = (u1 - u0 + 1, v1 - v0 + 1);
    let mut inside = vec![false; width * height];
    for v in 0..height {
        for u in 0..width {
            inside[v * width + u] = full[(v + v0) * side + u + u0];
        }
    }
    Shape {
        width,
        height,
        inside,
    }
}

/// Colored texture: a shared luminance field plus weak per-channel chroma.
struct Texture {
    lum_seed: u64,
    chroma_seeds: [u64; 3],
    octaves: u32,
}

impl Texture {
    fn sample(&self, palette: &[f64; 3], x: f64, y: f64) -> [f64; 3] {
        let lum = fbm(self.lum_seed, x, y, BG_CELL, self.octaves) - 0.5;
        let mut out = [0.0; 3];
        for c in 0..3 {
            let chroma = fbm(self.chroma_seeds[c], x, y, BG_CELL, self.octaves) - 0.5;
            out[c] = (palette[c] + 0.9 * lum + 0.3 * chroma).clamp(0.0, 1.0);
        }
        out
    }
}

/// Keeps `pos + step` inside `[0, limit]` by reflecting, then clamping.
fn bounded_step(pos: i64, step: i64, limit: i64) -> i64 {
    let in_range = |p: i64| (0..=limit).contains(&p);
    if in_range(pos + step) {
        step
    } else if in_range(pos - step) {
        -step
    } else {
        (pos + step).clamp(0, limit) - pos
    }
}

/// Generates one clip. The output is a pure function of `cfg`.
pub fn generate_clip(cfg: &CamoGenConfig) -> Result<VideoClip, ConfigError> {
    cfg.validate()?;
    let (h, w, t_len) = (cfg.height, cfg.width, cfg.clip_len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let texture = Texture {
        lum_seed: derive_seed(cfg.seed, 1),
        chroma_seeds: [
            derive_seed(cfg.seed, 2),
            derive_seed(cfg.seed, 3),
            derive_seed(cfg.seed, 4),
        ],
        octaves: cfg.texture_octaves,
    };
    let palette: [f64; 3] = core::array::from_fn(|_| rng.gen_range(0.28..0.45));
    let contrast: [f64; 3] = core::array::from_fn(|c| 1.0 - palette[c]);
    let tex_offset = (
        rng.gen_range(2_000..8_000i64) as f64,
        rng.gen_range(2_000..8_000i64) as f64,
    );

    let shape = make_shape(derive_seed(cfg.seed, 5), cfg.target_area());
    if shape.width > w || shape.height > h {
        return Err(ConfigError::new(
            "sprite_area_frac",
            "sprite does not fit inside the frame",
        ));
    }
    let limit_x = (w - shape.width) as i64;
    let limit_y = (h - shape.height) as i64;

    let mut positions = Vec::with_capacity(t_len);
    let mut steps = Vec::with_capacity(t_len - 1);
    let mut pos = (rng.gen_range(0..=limit_x), rng.gen_range(0..=limit_y));
    positions.push(pos);
    let m = cfg.max_step as i64;
    for _ in 1..t_len {
        let dx = rng.gen_range(-m..=m);
        let dy = rng.gen_range(-m..=m);
        let dx = bounded_step(pos.0, dx, limit_x);
        let dy = bounded_step(pos.1, dy, limit_y);
        pos = (pos.0 + dx, pos.1 + dy);
        positions.push(pos);
        steps.push((dx as i32, dy as i32));
    }

    let alpha = cfg.camo_strength;
    let plane = h * w;
    let mut frames = vec![0f32; t_len * plane * 3];
    let mut masks = vec![0u8; t_len * plane];
    let (bx, by) = (cfg.bg_drift.0 as i64, cfg.bg_drift.1 as i64);
    for (t, &(px, py)) in positions.iter().enumerate() {
        let shift = (t as i64 * bx, t as i64 * by);
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                let (u, v) = (x as i64 - px, y as i64 - py);
                let color = if shape.contains(u, v) {
                    masks[t * plane + idx] = 1;
                    let (su, sv) = (u as f64 + tex_offset.0, v as f64 + tex_offset.1);
                    let camo = texture.sample(&palette, su, sv);
                    let loud = texture.sample(&contrast, su, sv);
                    core::array::from_fn(|c| alpha * camo[c] + (1.0 - alpha) * loud[c])
                } else {
                    texture.sample(
                        &palette,
                        (x as i64 - shift.0) as f64,
                        (y as i64 - shift.1) as f64,
                    )
                };
                let base = (t * plane + idx) * 3;
                for c in 0..3 {
                    frames[base + c] = color[c] as f32;
                }
            }
        }
    }

    let mut flows = vec![0f32; (t_len - 1) * plane * 2];
    for t in 1..t_len {
        let (dx, dy) = steps[t - 1];
        let prev_mask = &masks[(t - 1) * plane..t * plane];
        for (idx, &m) in prev_mask.iter().enumerate() {
            let (fx, fy) = if m != 0 {
                (dx, dy)
            } else {
                cfg.bg_drift
            };
            let base = ((t - 1) * plane + idx) * 2;
            flows[base] = fx as f32;
            flows[base + 1] = fy as f32;
        }
    }

    Ok(VideoClip {
        frames,
        masks,
        flows_gt: Some(flows),
        sprite_steps: steps,
        meta: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> CamoGenConfig {
        CamoGenConfig {
            seed,
            clip_len: 4,
            ..CamoGenConfig::default()
        }
    }

    #[test]
    fn identical_configs_give_identical_clips() {
        let a = generate_clip(&small(11)).unwrap();
        let b = generate_clip(&small(11)).unwrap();
        assert_eq!(a, b);
        let c = generate_clip(&small(12)).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn invalid_fields_are_named() {
        let bad = |f: fn(&mut CamoGenConfig)| {
            let mut c = CamoGenConfig::default();
            f(&mut c);
            generate_clip(&c).unwrap_err().field
        };
        assert_eq!(bad(|c| c.height = 60), "height");
        assert_eq!(bad(|c| c.width = 0), "width");
        assert_eq!(bad(|c| c.clip_len = 1), "clip_len");
        assert_eq!(bad(|c| c.sprite_area_frac = 0.3), "sprite_area_frac");
        assert_eq!(bad(|c| c.sprite_area_frac = 0.0), "sprite_area_frac");
        assert_eq!(bad(|c| c.camo_strength = 1.5), "camo_strength");
        assert_eq!(bad(|c| c.max_step = -1), "max_step");
        assert_eq!(bad(|c| c.texture_octaves = 0), "texture_octaves");
    }

    #[test]
    fn mask_area_matches_target() {
        let clip = generate_clip(&small(3)).unwrap();
        let target = clip.meta.target_area();
        for t in 0..clip.len() {
            assert_eq!(clip.mask_area(t), target);
        }
    }

    #[test]
    fn no_motion_means_zero_flow() {
        let cfg = CamoGenConfig {
            max_step: 0,
            bg_drift: (0, 0),
            ..small(5)
        };
        let clip = generate_clip(&cfg).unwrap();
        assert!(clip.flows_gt.as_ref().unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(clip.frame(0), clip.frame(3));
    }

    #[test]
    fn flow_inside_mask_is_sprite_step() {
        let cfg = CamoGenConfig {
            bg_drift: (1, -2),
            ..small(9)
        };
        let clip = generate_clip(&cfg).unwrap();
        for t in 1..clip.len() {
            let (dx, dy) = clip.sprite_steps[t - 1];
            let flow = clip.flow_into(t).unwrap();
            for (i, &m) in clip.mask(t - 1).iter().enumerate() {
                let expect = if m != 0 { (dx, dy) } else { (1, -2) };
                assert_eq!((flow[2 * i], flow[2 * i + 1]), (expect.0 as f32, expect.1 as f32));
            }
        }
    }

    #[test]
    fn steps_respect_bound() {
        for seed in 0..20 {
            let clip = generate_clip(&CamoGenConfig {
                seed,
                ..CamoGenConfig::default()
            })
            .unwrap();
            for &(dx, dy) in &clip.sprite_steps {
                assert!(dx.abs() <= 4 && dy.abs() <= 4);
            }
        }
    }

    #[test]
    fn bounded_step_reflects_then_clamps() {
        assert_eq!(bounded_step(0, -3, 10), 3);
        assert_eq!(bounded_step(9, 3, 10), -3);
        assert_eq!(bounded_step(1, 5, 3), 2);
        assert_eq!(bounded_step(5, 0, 10), 0);
    }
}
