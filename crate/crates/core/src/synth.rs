//! Procedural RGB-D scenes for tests, demos and desk-scale experiments.
//!
//! Each scene is a back wall and a floor, both planar in depth, with a few
//! boxes in front. Surface colour darkens with distance and never reaches
//! white. Every scene also contains genuinely white strokes and patches,
//! so in RGB alone a white occlusion line is indistinguishable from scene
//! content, while in depth occlusions read 1.0 and the scene stays inside
//! `[0.1, 0.9]`.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{save_depth16, save_image, DatasetManifest, ManifestEntry, Sample};
use crate::error::Result;
use crate::masking::line_points;
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

pub const DEPTH_MIN: f32 = 0.1;
pub const DEPTH_MAX: f32 = 0.9;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 80,
            height: 120,
            width: 160,
            seed: 0,
        }
    }
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<[f32; 3]>,
    depth: Vec<f32>,
}

impl Canvas {
    fn set(&mut self, y: isize, x: isize, rgb: [f32; 3], depth: f32) {
        if y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w {
            let i = y as usize * self.w + x as usize;
            self.rgb[i] = rgb;
            self.depth[i] = depth;
        }
    }
}

fn hue(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)]
}

/// Surface colour at depth `d`: nearer is brighter, capped below white.
fn shade(base: [f32; 3], d: f32) -> [f32; 3] {
    let k = 1.05 - 0.6 * d;
    base.map(|c| (c * k).clamp(0.0, 0.85))
}

fn scene(cfg: &SynthConfig, index: usize) -> Canvas {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = seed::rng(cfg.seed, Stream::Synth, index as u64);
    let mut c = Canvas {
        h,
        w,
        rgb: vec![[0.0; 3]; h * w],
        depth: vec![0.0; h * w],
    };

    let horizon = rng.random_range(0.35..0.65) * h as f32;
    let wall_depth = rng.random_range(0.7..0.85);
    let wall_tilt = rng.random_range(-0.1..0.1);
    let (wall, floor) = (hue(&mut rng), hue(&mut rng));
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f32, x as f32 / w as f32);
            let (base, d) = if fy < horizon {
                (wall, wall_depth + wall_tilt * (fx - 0.5))
            } else {
                let t = (fy - horizon) / (h as f32 - horizon);
                (floor, wall_depth - t * (wall_depth - 0.15))
            };
            let d = d.clamp(DEPTH_MIN, DEPTH_MAX);
            c.rgb[y * w + x] = shade(base, d);
            c.depth[y * w + x] = d;
        }
    }

    for _ in 0..rng.random_range(1..=3) {
        let bh = rng.random_range(h / 6..h / 2);
        let bw = rng.random_range(w / 8..w / 3);
        let top = rng.random_range(0..h - bh) as isize;
        let left = rng.random_range(0..w - bw) as isize;
        let d = rng.random_range(0.2..0.6);
        let col = shade(hue(&mut rng), d);
        for y in top..top + bh as isize {
            for x in left..left + bw as isize {
                c.set(y, x, col, d);
            }
        }
    }

    let white = [1.0; 3];
    for _ in 0..rng.random_range(2..=5) {
        let (y0, x0) = (rng.random_range(0..h) as isize, rng.random_range(0..w) as isize);
        let (y1, x1) = (rng.random_range(0..h) as isize, rng.random_range(0..w) as isize);
        let r = rng.random_range(0..=2i64) as isize;
        for (y, x) in line_points(y0, x0, y1, x1) {
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy * dy + dx * dx <= r * r {
                        let i = (y + dy).clamp(0, h as isize - 1) as usize * w + (x + dx).clamp(0, w as isize - 1) as usize;
                        let d = (c.depth[i] - 0.05).max(DEPTH_MIN);
                        c.set(y + dy, x + dx, white, d);
                    }
                }
            }
        }
    }
    for _ in 0..rng.random_range(0..=2) {
        let s = rng.random_range(4..=h / 6);
        let top = rng.random_range(0..h - s) as isize;
        let left = rng.random_range(0..w - s) as isize;
        let d = rng.random_range(0.2..0.5);
        for y in top..top + s as isize {
            for x in left..left + s as isize {
                c.set(y, x, white, d);
            }
        }
    }
    c
}

/// Scene number `index`, normalized like a loaded sample.
pub fn synth_sample(cfg: &SynthConfig, index: usize) -> Sample {
    let c = scene(cfg, index);
    let plane = c.h * c.w;
    let rgb = Tensor::from_fn([3, c.h, c.w], |i| c.rgb[i % plane][i / plane]);
    let depth = Tensor::new([1, c.h, c.w], c.depth).expect("sized");
    Sample {
        id: sample_id(index),
        rgb,
        depth,
        rgb_path: Default::default(),
        depth_path: Default::default(),
    }
}

pub fn sample_id(index: usize) -> String {
    format!("synth{index:04}")
}

pub fn synth_dataset(cfg: &SynthConfig) -> Vec<Sample> {
    (0..cfg.count).map(|i| synth_sample(cfg, i)).collect()
}

/// Writes the dataset in the on-disk layout. Depth is stored so that the
/// 16-bit maximum stands for `depth_max` metres.
pub fn write_synth_dataset(root: &Path, cfg: &SynthConfig, depth_max: f64) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest {
        root: root.to_path_buf(),
        depth_max,
        entries: Vec::with_capacity(cfg.count),
    };
    for i in 0..cfg.count {
        let s = synth_sample(cfg, i);
        let entry = ManifestEntry {
            rgb: format!("rgb/{}.png", s.id).into(),
            depth: format!("depth/{}.png", s.id).into(),
            id: s.id.clone(),
        };
        save_image(&s.rgb, &manifest.rgb_path(&entry))?;
        save_depth16(&s.depth, &manifest.depth_path(&entry))?;
        manifest.entries.push(entry);
    }
    manifest.write()?;
    Ok(manifest)
}
