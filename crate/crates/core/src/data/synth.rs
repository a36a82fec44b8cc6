//! Synthetic RGB-D scenes whose labels need depth.
//!
//! Class 0 is a far, gray, textured background. Class 1 objects have warm
//! colours and sit at any depth plane. Classes 2 and 3 draw their colours
//! from the same cool palette; class 2 lies on the nearest plane and class 3
//! on the farthest, so depth alone separates them. Further classes get their
//! own palettes. The depth map is translated `misalignment_px` pixels to the
//! right relative to RGB and labels.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::pnm::{Pnm, PnmKind};
use super::{depth_from_mm, rgb_from_interleaved, Manifest, RgbdSample, SampleFiles};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NEAR_PLANE_M: f64 = 1.5;
pub const FAR_PLANE_M: f64 = 3.0;
pub const BACKGROUND_M: f64 = 4.5;

const EXTRA_PALETTES: [[f64; 3]; 4] = [
    [0.9, 0.9, 0.2],
    [0.8, 0.2, 0.8],
    [0.95, 0.95, 0.95],
    [0.1, 0.1, 0.1],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Inclusive range of objects per image.
    pub shapes_per_image: (usize, usize),
    /// Object extent range as a fraction of the image side.
    pub shape_size: (f64, f64),
    pub depth_planes: usize,
    /// Rightward translation of depth relative to RGB, in pixels.
    pub misalignment_px: usize,
    /// Per-pixel RGB noise standard deviation.
    pub color_noise: f64,
    /// Per-pixel depth noise standard deviation in metres.
    pub depth_noise: f64,
    pub depth_max: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            num_classes: 4,
            shapes_per_image: (2, 4),
            shape_size: (0.15, 0.35),
            depth_planes: 2,
            misalignment_px: 2,
            color_noise: 0.04,
            depth_noise: 0.02,
            depth_max: 6.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad("synthetic image extents must be positive".into());
        }
        if !(4..=4 + EXTRA_PALETTES.len()).contains(&self.num_classes) {
            return bad(format!(
                "synthetic num_classes must be in 4..={}, got {}",
                4 + EXTRA_PALETTES.len(),
                self.num_classes
            ));
        }
        if self.depth_planes < 2 {
            return bad(format!(
                "depth_planes must be at least 2, got {}",
                self.depth_planes
            ));
        }
        let (lo, hi) = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return bad(format!("bad shapes-per-image range {lo}..={hi}"));
        }
        let (a, b) = self.shape_size;
        if !(a > 0.0 && a <= b && b <= 1.0) {
            return bad(format!("bad shape size range {a}..{b}"));
        }
        if self.misalignment_px >= self.width {
            return bad("misalignment must be smaller than the image width".into());
        }
        if !(self.color_noise >= 0.0 && self.depth_noise >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if !(self.depth_max > BACKGROUND_M) {
            return bad(format!(
                "depth_max must exceed the background depth {BACKGROUND_M} m"
            ));
        }
        Ok(())
    }

    pub fn plane(&self, i: usize) -> f64 {
        NEAR_PLANE_M + (FAR_PLANE_M - NEAR_PLANE_M) * i as f64 / (self.depth_planes - 1) as f64
    }
}

/// A generated frame in its stored integer form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSample {
    pub height: usize,
    pub width: usize,
    /// Interleaved 8-bit RGB.
    pub rgb: Vec<u8>,
    /// Depth in millimetres, already misaligned.
    pub depth_mm: Vec<u16>,
    pub label: Vec<u8>,
}

impl RawSample {
    pub fn to_sample(&self, depth_max: f64) -> RgbdSample {
        let (h, w) = (self.height, self.width);
        let rgb: Vec<u16> = self.rgb.iter().map(|&v| v as u16).collect();
        RgbdSample {
            rgb: rgb_from_interleaved(&rgb, h, w, 255),
            depth: depth_from_mm(&self.depth_mm, h, w, depth_max),
            label: Tensor::new([h, w], self.label.clone()).unwrap(),
        }
    }
}

enum Shape {
    Rect,
    Ellipse,
}

struct Object {
    class: u8,
    depth: f64,
    color: [f64; 3],
    shape: Shape,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Object {
    fn covers(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = ((y - self.cy) / self.ry, (x - self.cx) / self.rx);
        match self.shape {
            Shape::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            Shape::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }
}

/// Stream id keeping splits independent under one seed.
fn split_stream(split: &str) -> u64 {
    match split {
        "train" => 0,
        "test" => 1,
        other => other.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
        }),
    }
}

fn sample_rng(cfg: &SynthConfig, split: &str, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(split_stream(split).wrapping_shl(32) ^ index as u64);
    rng
}

fn palette_color<R: Rng>(class: u8, rng: &mut R) -> [f64; 3] {
    match class {
        1 => [
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.1..0.5),
            rng.gen_range(0.0..0.3),
        ],
        2 | 3 => [
            rng.gen_range(0.0..0.3),
            rng.gen_range(0.3..0.9),
            rng.gen_range(0.3..0.9),
        ],
        c => {
            EXTRA_PALETTES[c as usize - 4].map(|v| (v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0))
        }
    }
}

pub fn generate_raw(cfg: &SynthConfig, split: &str, index: usize) -> Result<RawSample> {
    cfg.validate()?;
    let mut rng = sample_rng(cfg, split, index);
    let (h, w) = (cfg.height, cfg.width);
    let side = h.min(w) as f64;
    let count = rng.gen_range(cfg.shapes_per_image.0..=cfg.shapes_per_image.1);
    let mut objects: Vec<Object> = (0..count)
        .map(|_| {
            let class = rng.gen_range(1..cfg.num_classes) as u8;
            let plane = match class {
                2 => 0,
                3 => cfg.depth_planes - 1,
                _ => rng.gen_range(0..cfg.depth_planes),
            };
            Object {
                class,
                depth: cfg.plane(plane),
                color: palette_color(class, &mut rng),
                shape: if rng.gen_bool(0.5) {
                    Shape::Rect
                } else {
                    Shape::Ellipse
                },
                cy: rng.gen_range(0.0..h as f64),
                cx: rng.gen_range(0.0..w as f64),
                ry: rng.gen_range(cfg.shape_size.0..=cfg.shape_size.1) * side / 2.0,
                rx: rng.gen_range(cfg.shape_size.0..=cfg.shape_size.1) * side / 2.0,
            }
        })
        .collect();
    // Paint far to near so occlusion follows depth.
    objects.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    let gray: f64 = rng.gen_range(0.35..0.65);
    let bg = [0.0, 1.0, 2.0].map(|_| gray + rng.gen_range(-0.03..0.03));
    let color_noise = Normal::new(0.0, cfg.color_noise).unwrap();
    let depth_noise = Normal::new(0.0, cfg.depth_noise).unwrap();

    let mut label = vec![0u8; h * w];
    let mut rgb = vec![0u8; h * w * 3];
    let mut depth = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (yc, xc) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut color = bg;
            let mut d = BACKGROUND_M + 0.5 * (1.0 - y as f64 / h as f64);
            for o in objects.iter().filter(|o| o.covers(yc, xc)) {
                label[p] = o.class;
                color = o.color;
                d = o.depth;
            }
            for c in 0..3 {
                let v = color[c] + color_noise.sample(&mut rng);
                rgb[p * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            depth[p] = d + depth_noise.sample(&mut rng);
        }
    }
    let delta = cfg.misalignment_px;
    let depth_mm = (0..h * w)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            let src = y * w + x.saturating_sub(delta);
            (depth[src].clamp(0.0, cfg.depth_max) * 1000.0).round() as u16
        })
        .collect();
    Ok(RawSample {
        height: h,
        width: w,
        rgb,
        depth_mm,
        label,
    })
}

/// Generate `count` samples of `split` in memory. Values pass through the
/// same quantisation as the files, so they equal a disk round trip.
pub fn generate(cfg: &SynthConfig, split: &str, count: usize) -> Result<Vec<RgbdSample>> {
    (0..count)
        .map(|i| Ok(generate_raw(cfg, split, i)?.to_sample(cfg.depth_max)))
        .collect()
}

/// Write `dir/{rgb,depth,label}/NNNNN.*` plus `dir/manifest.txt`.
pub fn write_split(
    cfg: &SynthConfig,
    dir: impl AsRef<Path>,
    split: &str,
    count: usize,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    for sub in ["rgb", "depth", "label"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = Manifest::new(split, cfg.num_classes, cfg.depth_max);
    for i in 0..count {
        let raw = generate_raw(cfg, split, i)?;
        let files = SampleFiles {
            rgb: format!("rgb/{i:05}.ppm").into(),
            depth: format!("depth/{i:05}.pgm").into(),
            label: format!("label/{i:05}.pgm").into(),
        };
        let (h, w) = (raw.height, raw.width);
        let img = |kind, maxval, data: Vec<u16>| Pnm {
            kind,
            width: w,
            height: h,
            maxval,
            data,
        };
        img(
            PnmKind::Rgb,
            255,
            raw.rgb.iter().map(|&v| v as u16).collect(),
        )
        .save(dir.join(&files.rgb))?;
        img(PnmKind::Gray, 65535, raw.depth_mm.clone()).save(dir.join(&files.depth))?;
        img(
            PnmKind::Gray,
            255,
            raw.label.iter().map(|&v| v as u16).collect(),
        )
        .save(dir.join(&files.label))?;
        manifest.push(files);
    }
    manifest.save(dir)?;
    Manifest::load(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_round_trip_equals_memory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            height: 16,
            width: 24,
            ..SynthConfig::default()
        };
        let m = write_split(&cfg, dir.path(), "train", 3).unwrap();
        let mem = generate(&cfg, "train", 3).unwrap();
        assert_eq!(m.load_all().unwrap(), mem);
    }

    #[test]
    fn splits_and_indices_differ() {
        let cfg = SynthConfig::default();
        let a = generate_raw(&cfg, "train", 0).unwrap();
        assert_ne!(a, generate_raw(&cfg, "test", 0).unwrap());
        assert_ne!(a, generate_raw(&cfg, "train", 1).unwrap());
        assert_eq!(a, generate_raw(&cfg, "train", 0).unwrap());
    }

    #[test]
    fn depth_is_shifted_right() {
        let base = SynthConfig {
            misalignment_px: 0,
            depth_noise: 0.0,
            ..SynthConfig::default()
        };
        let shifted = SynthConfig {
            misalignment_px: 3,
            ..base.clone()
        };
        let a = generate_raw(&base, "train", 5).unwrap();
        let b = generate_raw(&shifted, "train", 5).unwrap();
        let w = a.width;
        for y in 0..a.height {
            for x in 3..w {
                assert_eq!(b.depth_mm[y * w + x], a.depth_mm[y * w + x - 3]);
            }
        }
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.label, b.label);
    }

    #[test]
    fn bad_configs() {
        for cfg in [
            SynthConfig {
                depth_planes: 1,
                ..SynthConfig::default()
            },
            SynthConfig {
                num_classes: 3,
                ..SynthConfig::default()
            },
            SynthConfig {
                shapes_per_image: (3, 2),
                ..SynthConfig::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
