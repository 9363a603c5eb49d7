//! Synthetic dataset generation and its on-disk layout.
//!
//! ```text
//! root/manifest.json
//! root/<clip_id>/frames/00000.png   RGB, 8 bit
//! root/<clip_id>/masks/00000.png    gray, 255 = object
//! root/<clip_id>/flow/00001.cfl     forward flow from frame 0 into frame 1
//! ```
//!
//! Flow files use the `CFL1` encoding (magic, `u32` height and width, then
//! `f32` `(dx, dy)` pairs, all little-endian). The manifest lists each clip's
//! split, generator settings, sprite displacements and a SHA-256 per file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use emip_core::noise::derive_seed;
use emip_core::{decode_flow, encode_flow, generate_clip, CamoGenConfig, VideoClip};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EmipError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "emip-synthcamo-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Settings of one `datagen` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenConfig {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Train / val / test fractions.
    pub split_frac: [f64; 3],
    pub sprite_area_frac: f64,
    pub max_step: i32,
    pub bg_drift: (i32, i32),
    pub texture_octaves: u32,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        let g = CamoGenConfig::default();
        Self {
            clips: 200,
            frames: 8,
            height: 64,
            width: 64,
            alpha: 1.0,
            seed: 0,
            split_frac: [0.7, 0.1, 0.2],
            sprite_area_frac: g.sprite_area_frac,
            max_step: g.max_step,
            bg_drift: g.bg_drift,
            texture_octaves: g.texture_octaves,
        }
    }
}

impl DatagenConfig {
    pub fn clip_config(&self, index: usize) -> CamoGenConfig {
        CamoGenConfig {
            seed: derive_seed(self.seed, index as u64),
            height: self.height,
            width: self.width,
            clip_len: self.frames,
            sprite_area_frac: self.sprite_area_frac,
            camo_strength: self.alpha,
            max_step: self.max_step,
            bg_drift: self.bg_drift,
            texture_octaves: self.texture_octaves,
        }
    }

    /// Split of clip `index`: the first clips train, then val, then test.
    pub fn split_of(&self, index: usize) -> Split {
        let total = self.split_frac.iter().sum::<f64>().max(f64::MIN_POSITIVE);
        let n_train = (self.split_frac[0] / total * self.clips as f64).round() as usize;
        let n_val = (self.split_frac[1] / total * self.clips as f64).round() as usize;
        if index < n_train {
            Split::Train
        } else if index < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.split_frac.iter().any(|f| *f < 0.0 || !f.is_finite()) || self.split_frac.iter().sum::<f64>() <= 0.0 {
            return Err(EmipError::Config("split fractions must be non-negative with a positive sum".into()));
        }
        self.clip_config(0).validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    pub split: Split,
    pub clip: VideoClip,
}

pub fn clip_id(index: usize) -> String {
    format!("clip{index:04}")
}

/// Generates every clip of a configuration in memory.
pub fn generate(cfg: &DatagenConfig) -> Result<Vec<ClipRecord>> {
    cfg.validate()?;
    (0..cfg.clips)
        .map(|i| {
            Ok(ClipRecord {
                id: clip_id(i),
                split: cfg.split_of(i),
                clip: generate_clip(&cfg.clip_config(i))?,
            })
        })
        .collect()
}

pub fn select(records: &[ClipRecord], split: Split) -> Vec<ClipRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub generator: CamoGenConfig,
    pub sprite_steps: Vec<(i32, i32)>,
    /// Relative path to SHA-256 hex digest.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub datagen: Option<DatagenConfig>,
    pub clips: Vec<ManifestEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn write_file(root: &Path, rel: &str, bytes: &[u8], files: &mut BTreeMap<String, String>) -> Result<()> {
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| EmipError::io(dir, e))?;
    }
    fs::write(&path, bytes).map_err(|e| EmipError::io(&path, e))?;
    files.insert(rel.to_string(), sha256_hex(bytes));
    Ok(())
}

fn png_bytes(img: image::DynamicImage, path: &str) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| EmipError::data(path, e.to_string()))?;
    Ok(buf.into_inner())
}

/// Quantizes a `[H, W, 3]` frame in `[0, 1]` to 8-bit RGB.
pub fn frame_to_rgb(frame: &[f32], height: usize, width: usize) -> image::RgbImage {
    let px: Vec<u8> = frame.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::RgbImage::from_raw(width as u32, height as u32, px).expect("frame buffer matches its size")
}

/// Writes clips and a manifest under `root`.
pub fn write_dataset(records: &[ClipRecord], root: &Path, datagen: Option<&DatagenConfig>) -> Result<Manifest> {
    fs::create_dir_all(root).map_err(|e| EmipError::io(root, e))?;
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let clip = &r.clip;
        let (h, w) = (clip.height(), clip.width());
        let mut files = BTreeMap::new();
        for t in 0..clip.len() {
            let rel = format!("{}/frames/{t:05}.png", r.id);
            let rgb = frame_to_rgb(clip.frame(t), h, w);
            write_file(root, &rel, &png_bytes(rgb.into(), &rel)?, &mut files)?;
            let rel = format!("{}/masks/{t:05}.png", r.id);
            let m: Vec<u8> = clip.mask(t).iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
            let gray = image::GrayImage::from_raw(w as u32, h as u32, m).expect("mask buffer matches its size");
            write_file(root, &rel, &png_bytes(gray.into(), &rel)?, &mut files)?;
            if t >= 1 {
                if let Some(flow) = clip.flow_into(t) {
                    let rel = format!("{}/flow/{t:05}.cfl", r.id);
                    write_file(root, &rel, &encode_flow(h, w, flow)?, &mut files)?;
                }
            }
        }
        entries.push(ManifestEntry {
            id: r.id.clone(),
            split: r.split,
            generator: clip.meta.clone(),
            sprite_steps: clip.sprite_steps.clone(),
            files,
        });
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        datagen: datagen.cloned(),
        clips: entries,
    };
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| EmipError::io(&path, e))?;
    Ok(manifest)
}

fn read_checked(root: &Path, rel: &str, entry: &ManifestEntry) -> Result<Vec<u8>> {
    let path = root.join(rel);
    let bytes = fs::read(&path).map_err(|e| EmipError::io(&path, e))?;
    let expected = entry
        .files
        .get(rel)
        .ok_or_else(|| EmipError::data(&path, "file is not listed in the manifest"))?;
    if &sha256_hex(&bytes) != expected {
        return Err(EmipError::data(&path, "checksum mismatch"));
    }
    Ok(bytes)
}

fn decode_png(bytes: &[u8], path: PathBuf) -> Result<image::DynamicImage> {
    image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| EmipError::data(path, e.to_string()))
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| EmipError::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| EmipError::data(&path, e.to_string()))?;
    if m.format != FORMAT {
        return Err(EmipError::data(&path, format!("unknown format `{}`", m.format)));
    }
    Ok(m)
}

/// Loads every clip listed in `root/manifest.json`, verifying checksums.
/// Missing flow files are an error only when `require_flow` is set.
pub fn read_dataset(root: &Path, require_flow: bool) -> Result<Vec<ClipRecord>> {
    let manifest = read_manifest(root)?;
    let mut out = Vec::with_capacity(manifest.clips.len());
    for e in &manifest.clips {
        let g = &e.generator;
        let (h, w, t_len) = (g.height, g.width, g.clip_len);
        let mut frames = Vec::with_capacity(t_len * h * w * 3);
        let mut masks = Vec::with_capacity(t_len * h * w);
        let mut flows = Vec::with_capacity(t_len.saturating_sub(1) * h * w * 2);
        let mut have_flow = true;
        for t in 0..t_len {
            let rel = format!("{}/frames/{t:05}.png", e.id);
            let img = decode_png(&read_checked(root, &rel, e)?, root.join(&rel))?.to_rgb8();
            if (img.height() as usize, img.width() as usize) != (h, w) {
                return Err(EmipError::data(root.join(&rel), format!("expected {h}x{w}")));
            }
            frames.extend(img.as_raw().iter().map(|&v| v as f32 / 255.0));
            let rel = format!("{}/masks/{t:05}.png", e.id);
            let img = decode_png(&read_checked(root, &rel, e)?, root.join(&rel))?.to_luma8();
            masks.extend(img.as_raw().iter().map(|&v| u8::from(v >= 128)));
            if t >= 1 {
                let rel = format!("{}/flow/{t:05}.cfl", e.id);
                if e.files.contains_key(&rel) {
                    let (fh, fw, f) = decode_flow(&read_checked(root, &rel, e)?)?;
                    if (fh, fw) != (h, w) {
                        return Err(EmipError::data(root.join(&rel), format!("flow is {fh}x{fw}, expected {h}x{w}")));
                    }
                    flows.extend(f);
                } else if require_flow {
                    return Err(EmipError::data(root.join(&rel), "flow file missing"));
                } else {
                    have_flow = false;
                }
            }
        }
        out.push(ClipRecord {
            id: e.id.clone(),
            split: e.split,
            clip: VideoClip {
                frames,
                masks,
                flows_gt: have_flow.then_some(flows),
                sprite_steps: e.sprite_steps.clone(),
                meta: g.clone(),
            },
        });
    }
    Ok(out)
}

/// A clip as NCHW tensors.
#[derive(Debug, Clone)]
pub struct ClipTensors {
    pub id: String,
    /// `[T, 3, H, W]`.
    pub frames: Tensor,
    /// `[T, 1, H, W]` with values 0 / 1.
    pub masks: Tensor,
    /// `[T, 2, H, W]`; entry `t >= 1` is the backward flow into frame `t - 1`,
    /// entry 0 is zero.
    pub back_flow: Tensor,
    /// `[T, 1, H, W]` 0 / 1 masks as booleans, row-major per frame.
    pub mask_bits: Vec<Vec<bool>>,
}

impl ClipTensors {
    pub fn new(record: &ClipRecord) -> Result<Self> {
        let clip = &record.clip;
        let (t_len, h, w) = (clip.len(), clip.height(), clip.width());
        let dev = Device::Cpu;
        let frames = Tensor::from_slice(&clip.frames, (t_len, h, w, 3), &dev)?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        let mask_f: Vec<f32> = clip.masks.iter().map(|&m| f32::from(m != 0)).collect();
        let masks = Tensor::from_vec(mask_f, (t_len, 1, h, w), &dev)?;
        let mut flow = vec![0f32; h * w * 2];
        for t in 1..t_len {
            flow.extend(clip.backward_flow(t));
        }
        let back_flow = Tensor::from_vec(flow, (t_len, h, w, 2), &dev)?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        let mask_bits = (0..t_len).map(|t| clip.mask(t).iter().map(|&m| m != 0).collect()).collect();
        Ok(Self {
            id: record.id.clone(),
            frames,
            masks,
            back_flow,
            mask_bits,
        })
    }

    pub fn len(&self) -> usize {
        self.mask_bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask_bits.is_empty()
    }

    pub fn frame(&self, t: usize) -> Result<Tensor> {
        Ok(self.frames.narrow(0, t, 1)?)
    }
}

pub fn to_tensors(records: &[ClipRecord]) -> Result<Vec<ClipTensors>> {
    records.iter().map(ClipTensors::new).collect()
}
