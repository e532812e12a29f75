//! Seeded line and square occlusion masks.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::tensor::{shape_str, Scalar, Tensor};

/// Smallest supported mask side.
pub const MIN_SIDE: usize = 64;

const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    Line,
    Square,
}

impl MaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::Line => "line",
            MaskKind::Square => "square",
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line" => Ok(MaskKind::Line),
            "square" => Ok(MaskKind::Square),
            other => Err(Error::Config(format!("unknown mask kind {other:?} (expected line or square)"))),
        }
    }
}

/// Inclusive integer range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Range {
    pub lo: usize,
    pub hi: usize,
}

impl Range {
    pub const fn new(lo: usize, hi: usize) -> Self {
        Range { lo, hi }
    }

    fn sample(self, rng: &mut ChaCha8Rng) -> usize {
        rng.random_range(self.lo..=self.hi)
    }

    fn check(self, what: &str) -> Result<()> {
        if self.lo == 0 || self.lo > self.hi {
            return Err(Error::Config(format!("{what} range [{}, {}] must satisfy 1 <= lo <= hi", self.lo, self.hi)));
        }
        Ok(())
    }
}

impl fmt::Display for Range {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.lo, self.hi)
    }
}

impl FromStr for Range {
    type Err = Error;

    /// Parses `lo,hi` or a single value.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad range {s:?} (expected lo,hi)"));
        let parse = |p: &str| p.trim().parse::<usize>().map_err(|_| bad());
        match s.split_once(',') {
            Some((lo, hi)) => Ok(Range::new(parse(lo)?, parse(hi)?)),
            None => {
                let v = parse(s)?;
                Ok(Range::new(v, v))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub seed: u64,
    pub line_count: Range,
    pub line_thickness: Range,
    pub square_count: Range,
    pub square_side: Range,
    pub fill_value: f32,
}

impl MaskSpec {
    pub fn new(kind: MaskKind, seed: u64) -> Self {
        MaskSpec {
            kind,
            seed,
            line_count: Range::new(5, 15),
            line_thickness: Range::new(1, 5),
            square_count: Range::new(1, 5),
            square_side: Range::new(20, 60),
            fill_value: 1.0,
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::invalid(format!("mask size {h}x{w} is below the {MIN_SIDE}x{MIN_SIDE} minimum")));
        }
        match self.kind {
            MaskKind::Line => {
                self.line_count.check("line count")?;
                self.line_thickness.check("line thickness")?;
                if self.line_thickness.hi > h.min(w) {
                    return Err(Error::Config(format!("line thickness {} does not fit {h}x{w}", self.line_thickness.hi)));
                }
            }
            MaskKind::Square => {
                self.square_count.check("square count")?;
                self.square_side.check("square side")?;
                if self.square_side.hi > h.min(w) {
                    return Err(Error::Config(format!("square side {} does not fit {h}x{w}", self.square_side.hi)));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.fill_value) {
            return Err(Error::Config(format!("fill value {} outside [0, 1]", self.fill_value)));
        }
        Ok(())
    }
}

/// Binary occlusion grid, `true` = occluded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!("{} bits for a {height}x{width} mask", bits.len())));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn occluded_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn occluded_fraction(&self) -> f64 {
        self.occluded_count() as f64 / self.bits.len() as f64
    }

    /// Flat `y * width + x` indices of occluded pixels.
    pub fn occluded_indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    fn stamp_disc(&mut self, cy: isize, cx: isize, r: isize) {
        for dy in -r..=r {
            for dx in -r..=r {
                if dy * dy + dx * dx > r * r {
                    continue;
                }
                let (y, x) = (cy + dy, cx + dx);
                if y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width {
                    self.bits[y as usize * self.width + x as usize] = true;
                }
            }
        }
    }

    /// Writes an 8-bit grayscale PNG: 0 keeps, 255 occludes.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer matches mask size");
        crate::dataio::write_png(path, |p| img.save_with_format(p, image::ImageFormat::Png))
    }
}

/// Integer Bresenham walk from `(y0, x0)` to `(y1, x1)` inclusive.
pub(crate) fn line_points(y0: isize, x0: isize, y1: isize, x1: isize) -> Vec<(isize, isize)> {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    let mut pts = Vec::new();
    loop {
        pts.push((y, x));
        if x == x1 && y == y1 {
            return pts;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw(spec: &MaskSpec, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Mask {
    let mut mask = Mask {
        height: h,
        width: w,
        bits: vec![false; h * w],
    };
    match spec.kind {
        MaskKind::Line => {
            for _ in 0..spec.line_count.sample(rng) {
                let y0 = rng.random_range(0..h) as isize;
                let x0 = rng.random_range(0..w) as isize;
                let y1 = rng.random_range(0..h) as isize;
                let x1 = rng.random_range(0..w) as isize;
                let radius = spec.line_thickness.sample(rng).div_ceil(2) as isize;
                for (y, x) in line_points(y0, x0, y1, x1) {
                    mask.stamp_disc(y, x, radius);
                }
            }
        }
        MaskKind::Square => {
            for _ in 0..spec.square_count.sample(rng) {
                let side = spec.square_side.sample(rng);
                let top = rng.random_range(0..=h - side);
                let left = rng.random_range(0..=w - side);
                for y in top..top + side {
                    mask.bits[y * w + left..y * w + left + side].fill(true);
                }
            }
        }
    }
    mask
}

/// Mask number `index` of the dataset described by `spec`. A pure function
/// of `(spec, h, w, index)`; line and square kinds use separate streams.
pub fn gen_mask(spec: &MaskSpec, h: usize, w: usize, index: u64) -> Result<Mask> {
    spec.validate(h, w)?;
    let stream = match spec.kind {
        MaskKind::Line => Stream::LineMask,
        MaskKind::Square => Stream::SquareMask,
    };
    let mut rng = seed::rng(spec.seed, stream, index);
    for _ in 0..MAX_ATTEMPTS {
        let mask = draw(spec, h, w, &mut rng);
        let n = mask.occluded_count();
        if n > 0 && n < h * w {
            return Ok(mask);
        }
    }
    Err(Error::invalid(format!(
        "no valid {} mask after {MAX_ATTEMPTS} draws at {h}x{w}",
        spec.kind
    )))
}

/// Sets occluded pixels of every channel of a `[C,H,W]` image to `fill`.
pub fn apply_to<T: Scalar>(img: &Tensor<T>, mask: &Mask, fill: T) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 3 || s[1] != mask.height || s[2] != mask.width {
        return Err(Error::shape(format!(
            "image {} does not match {}x{} mask",
            shape_str(s),
            mask.height,
            mask.width
        )));
    }
    let mut out = img.clone();
    for plane in out.data_mut().chunks_mut(mask.bits.len()) {
        for (v, &b) in plane.iter_mut().zip(&mask.bits) {
            if b {
                *v = fill;
            }
        }
    }
    Ok(out)
}

/// Occludes an RGB image and its depth map with the same mask.
pub fn apply_mask<T: Scalar>(
    rgb: &Tensor<T>,
    depth: &Tensor<T>,
    mask: &Mask,
    fill: f32,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let fill = T::of(fill as f64);
    Ok((apply_to(rgb, mask, fill)?, apply_to(depth, mask, fill)?))
}
