//! Dataset layout, PNG loading and export.
//!
//! A dataset root holds `manifest.tsv`, `rgb/{id}.png` (8-bit RGB) and
//! `depth/{id}.png` (16-bit gray). The manifest starts with a
//! `#depth_max=<metres>` header followed by `id<TAB>rgb<TAB>depth` rows
//! with paths relative to the root. A 16-bit depth value `v` encodes
//! `v / 65535 * depth_max` metres, so dividing by the global maximum
//! normalizes it to `v / 65535`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, ImageResult};

use crate::error::{Error, Result};
use crate::tensor::{shape_str, Scalar, Tensor};

pub const TARGET_HEIGHT: usize = 240;
pub const TARGET_WIDTH: usize = 320;
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub rgb: PathBuf,
    pub depth: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Metres represented by the 16-bit value 65535.
    pub depth_max: f64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(root, &text)
    }

    pub fn parse(root: &Path, text: &str) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let fail = |line: usize, msg: String| Error::Manifest {
            path: path.clone(),
            msg: format!("line {line}: {msg}"),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
        let (_, header) = lines.next().ok_or_else(|| fail(1, "empty manifest".into()))?;
        let value = header
            .strip_prefix("#depth_max=")
            .ok_or_else(|| fail(1, format!("expected #depth_max=<value>, got {header:?}")))?;
        let depth_max: f64 = value
            .trim()
            .parse()
            .map_err(|_| fail(1, format!("bad depth_max {value:?}")))?;
        if !(depth_max.is_finite() && depth_max > 0.0) {
            return Err(fail(1, format!("depth_max must be positive, got {depth_max}")));
        }
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in lines {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, rgb, depth] = cols[..] else {
                return Err(fail(n, format!("expected 3 tab-separated columns, got {}", cols.len())));
            };
            if id.is_empty() {
                return Err(fail(n, "empty id".into()));
            }
            if !seen.insert(id.to_string()) {
                return Err(fail(n, format!("duplicate id {id:?}")));
            }
            entries.push(ManifestEntry {
                id: id.into(),
                rgb: rgb.into(),
                depth: depth.into(),
            });
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            depth_max,
            entries,
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("#depth_max={}\n", self.depth_max);
        for e in &self.entries {
            s += &format!("{}\t{}\t{}\n", e.id, e.rgb.display(), e.depth.display());
        }
        s
    }

    pub fn write(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        fs::write(&path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn rgb_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.rgb)
    }

    pub fn depth_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.depth)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A normalized RGB-D pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3,H,W]` in `[0,1]`.
    pub rgb: Tensor<f32>,
    /// `[1,H,W]` in `[0,1]`.
    pub depth: Tensor<f32>,
    pub rgb_path: PathBuf,
    pub depth_path: PathBuf,
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Loads an 8-bit RGB PNG as `[3,H,W]` divided by 255.
pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    match decode(path)? {
        DynamicImage::ImageRgb8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let raw = img.into_raw();
            Ok(Tensor::from_fn([3, h, w], |i| {
                let (c, p) = (i / (h * w), i % (h * w));
                raw[p * 3 + c] as f32 / 255.0
            }))
        }
        other => Err(Error::Image {
            path: path.to_path_buf(),
            msg: format!("expected 8-bit RGB, found {:?}", other.color()),
        }),
    }
}

/// Loads a 16-bit grayscale PNG as raw values `[1,H,W]`.
pub fn load_depth_raw(path: &Path) -> Result<Tensor<f32>> {
    match decode(path)? {
        DynamicImage::ImageLuma16(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            Tensor::new([1, h, w], img.into_raw().into_iter().map(f32::from).collect())
        }
        other => Err(Error::Image {
            path: path.to_path_buf(),
            msg: format!("expected 16-bit grayscale depth, found {:?}", other.color()),
        }),
    }
}

/// Loads a 16-bit depth PNG normalized by the manifest's global maximum.
pub fn load_depth(path: &Path, depth_max: f64) -> Result<Tensor<f32>> {
    let raw = load_depth_raw(path)?;
    let scale = depth_max / 65535.0;
    let data = raw.data().iter().map(|&v| (v as f64 * scale / depth_max) as f32).collect();
    Tensor::new(raw.shape().to_vec(), data)
}

/// Loads one manifest entry, resizing both maps to `size` (height, width)
/// when they differ.
pub fn load_sample(manifest: &DatasetManifest, entry: &ManifestEntry, size: (usize, usize)) -> Result<Sample> {
    let rgb_path = manifest.rgb_path(entry);
    let depth_path = manifest.depth_path(entry);
    let rgb = load_rgb(&rgb_path)?;
    let depth = load_depth(&depth_path, manifest.depth_max)?;
    if rgb.shape()[1..] != depth.shape()[1..] {
        return Err(Error::Image {
            path: depth_path,
            msg: format!(
                "depth {} does not match rgb {} spatially",
                shape_str(depth.shape()),
                shape_str(rgb.shape())
            ),
        });
    }
    let (h, w) = size;
    Ok(Sample {
        id: entry.id.clone(),
        rgb: resize_bilinear(&rgb, h, w),
        depth: resize_bilinear(&depth, h, w),
        rgb_path,
        depth_path,
    })
}

pub fn load_dataset(manifest: &DatasetManifest, size: (usize, usize)) -> Result<Vec<Sample>> {
    manifest.entries.iter().map(|e| load_sample(manifest, e, size)).collect()
}

/// Bilinear resampling of a `[C,H,W]` image with half-pixel centres.
/// Equal sizes return the input unchanged.
pub fn resize_bilinear<T: Scalar>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = img.shape();
    assert!(s.len() == 3 && out_h > 0 && out_w > 0, "resize of {}", shape_str(s));
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, T)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, T::of(src - i0 as f64))
            })
            .collect()
    };
    let (ys, xs) = (taps(h, out_h), taps(w, out_w));
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bottom * fy);
            }
        }
    }
    Tensor::new([c, out_h, out_w], out).expect("sizes agree")
}

/// Round-half-up 8-bit quantization of a value in `[0,1]`.
pub fn quantize(v: f32) -> u8 {
    (v as f64 * 255.0 + 0.5).floor() as u8
}

pub(crate) fn write_png(path: &Path, save: impl FnOnce(&Path) -> ImageResult<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Writes a `[1,H,W]` or `[3,H,W]` image in `[0,1]` as an 8-bit PNG.
/// Values outside `[0,1]` are rejected, not clamped.
pub fn save_image(img: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::shape(format!("cannot save {} as an image", shape_str(s))));
    }
    if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Image {
            path: path.to_path_buf(),
            msg: format!("value {v} outside [0, 1]"),
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = img.data();
    let bytes: Vec<u8> = (0..h * w * c).map(|i| quantize(d[(i % c) * h * w + i / c])).collect();
    let dynamic = if c == 3 {
        DynamicImage::ImageRgb8(image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("sized"))
    } else {
        DynamicImage::ImageLuma8(image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("sized"))
    };
    write_png(path, |p| dynamic.save_with_format(p, ImageFormat::Png))
}

/// Loads an 8-bit gray or RGB PNG as `[C,H,W]` in `[0,1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    match decode(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            Tensor::new([1, h, w], img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect())
        }
        DynamicImage::ImageRgb8(_) => load_rgb(path),
        other => Err(Error::Image {
            path: path.to_path_buf(),
            msg: format!("expected 8-bit gray or RGB, found {:?}", other.color()),
        }),
    }
}

/// Writes a `[1,H,W]` map in `[0,1]` as a 16-bit PNG, `1.0` becoming 65535.
pub fn save_depth16(depth: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = depth.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::shape(format!("depth must be [1,H,W], got {}", shape_str(s))));
    }
    if let Some(v) = depth.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Image {
            path: path.to_path_buf(),
            msg: format!("depth {v} outside [0, 1]"),
        });
    }
    let raw: Vec<u16> = depth.data().iter().map(|&v| (v as f64 * 65535.0).round() as u16).collect();
    let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(s[2] as u32, s[1] as u32, raw).expect("sized");
    write_png(path, |p| img.save_with_format(p, ImageFormat::Png))
}

/// Outcome of validating every manifest entry.
#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub entries: usize,
    pub errors: Vec<String>,
}

impl CheckReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Loads every entry of the dataset at `root`, collecting one error per
/// failing entry. Manifest-level problems are returned as `Err`.
pub fn check_dataset(root: &Path) -> Result<CheckReport> {
    let manifest = DatasetManifest::load(root)?;
    let mut report = CheckReport {
        entries: manifest.len(),
        errors: Vec::new(),
    };
    for e in &manifest.entries {
        match load_sample(&manifest, e, (TARGET_HEIGHT, TARGET_WIDTH)) {
            Ok(s) => {
                let in_range = |t: &Tensor<f32>| t.data().iter().all(|v| (0.0..=1.0).contains(v));
                if !in_range(&s.rgb) || !in_range(&s.depth) {
                    report.errors.push(format!("{}: values outside [0, 1]", e.id));
                }
            }
            Err(err) => report.errors.push(format!("{}: {err}", e.id)),
        }
    }
    Ok(report)
}
