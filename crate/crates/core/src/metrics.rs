//! Image quality metrics and inpainted-to-masked ratio aggregation.
//!
//! Images are `[C,H,W]` tensors in `[0,1]`; all arithmetic is in `f64`.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::models::Model;
use crate::nn::Mode;
use crate::tensor::{shape_str, Tape, Tensor};

/// MSE floor for PSNR; identical images score `10·log10(1/1e-12) = 120` dB.
pub const PSNR_MSE_FLOOR: f64 = 1e-12;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const LPIPS_EPS: f64 = 1e-10;

fn same_shape(a: &Tensor<f32>, b: &Tensor<f32>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {} vs {}",
            shape_str(a.shape()),
            shape_str(b.shape())
        )));
    }
    Ok(())
}

/// Sum of squared differences over every element.
pub fn ssd(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape(a, b, "ssd")?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum())
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    Ok(ssd(a, b)? / a.numel().max(1) as f64)
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    10.0 * (max_val * max_val / mse.max(PSNR_MSE_FLOOR)).log10()
}

pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, max_val))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Channel mean of a `[C,H,W]` image.
pub fn grayscale(img: &Tensor<f32>) -> Result<(usize, usize, Vec<f64>)> {
    let s = img.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(Error::shape(format!("expected a [C,H,W] image, got {}", shape_str(s))));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut g = vec![0.0; h * w];
    for plane in img.data().chunks(h * w) {
        for (acc, &v) in g.iter_mut().zip(plane) {
            *acc += v as f64;
        }
    }
    g.iter_mut().for_each(|v| *v /= c as f64);
    Ok((h, w, g))
}

/// Valid-region separable filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of the grayscale images under an 11×11 Gaussian window
/// (σ = 1.5), valid region only, dynamic range 1.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let (h, w, x) = grayscale(a)?;
    let (_, _, y) = grayscale(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &taps);
    let my = filter_valid(&y, h, w, &taps);
    let exx = filter_valid(&prod(&x, &x), h, w, &taps);
    let eyy = filter_valid(&prod(&y, &y), h, w, &taps);
    let exy = filter_valid(&prod(&x, &y), h, w, &taps);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cxy = exy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// `Σ_l 1/(H_l W_l) Σ_{h,w} ||w_l ⊙ (F̂_l(x) − F̂_l(y))||²` over `[C,H,W]`
/// feature maps, where `F̂` is unit-normalized along channels.
pub fn lpips_distance(feats_a: &[Tensor<f32>], feats_b: &[Tensor<f32>], weights: &[Vec<f64>]) -> Result<f64> {
    if feats_a.len() != feats_b.len() || feats_a.len() != weights.len() {
        return Err(Error::shape(format!(
            "lpips: {} vs {} layers with {} weight vectors",
            feats_a.len(),
            feats_b.len(),
            weights.len()
        )));
    }
    let mut total = 0.0;
    for (l, ((fa, fb), wl)) in feats_a.iter().zip(feats_b).zip(weights).enumerate() {
        same_shape(fa, fb, &format!("lpips layer {l}"))?;
        let s = fa.shape();
        if s.len() != 3 || s[0] != wl.len() {
            return Err(Error::shape(format!(
                "lpips layer {l}: features {} with {} channel weights",
                shape_str(s),
                wl.len()
            )));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let mut layer = 0.0;
        for p in 0..hw {
            let norm = |f: &Tensor<f32>| {
                let n: f64 = (0..c).map(|ch| (f.data()[ch * hw + p] as f64).powi(2)).sum::<f64>().sqrt();
                n + LPIPS_EPS
            };
            let (na, nb) = (norm(fa), norm(fb));
            for (ch, wc) in wl.iter().enumerate() {
                let d = fa.data()[ch * hw + p] as f64 / na - fb.data()[ch * hw + p] as f64 / nb;
                layer += (wc * d).powi(2);
            }
        }
        total += layer / hw as f64;
    }
    Ok(total)
}

/// `Σ inpainted_i / Σ masked_i`.
pub fn metric_ratio(inpainted: &[f64], masked: &[f64]) -> Result<f64> {
    if inpainted.len() != masked.len() || inpainted.is_empty() {
        return Err(Error::invalid(format!(
            "ratio needs equal nonempty lists, got {} and {}",
            inpainted.len(),
            masked.len()
        )));
    }
    let den: f64 = masked.iter().sum();
    if den == 0.0 {
        return Err(Error::invalid("ratio denominator sums to zero"));
    }
    Ok(inpainted.iter().sum::<f64>() / den)
}

/// Source of per-layer feature maps for the LPIPS distance.
pub trait FeatureExtractor: Sync {
    /// Feature maps `[C_l,H_l,W_l]` of a `[3,H,W]` image.
    fn features(&self, img: &Tensor<f32>) -> Result<Vec<Tensor<f32>>>;

    /// Per-layer channel weights; uniform by default.
    fn layer_weights(&self, feats: &[Tensor<f32>]) -> Vec<Vec<f64>> {
        feats.iter().map(|f| vec![1.0; f.shape()[0]]).collect()
    }
}

/// The RGB encoder's skips and bottleneck, evaluated in eval mode.
impl FeatureExtractor for Model<f32> {
    fn features(&self, img: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        let mut tape = Tape::inference();
        let mut shape = vec![1];
        shape.extend_from_slice(img.shape());
        let x = tape.constant(img.clone().reshape(shape)?);
        let enc = self.encode_rgb(&mut tape, x, Mode::Eval)?;
        enc.skips
            .iter()
            .chain(std::iter::once(&enc.bottleneck))
            .map(|&v| {
                let t = tape.tensor(v);
                let s = t.shape()[1..].to_vec();
                t.reshape(s)
            })
            .collect()
    }
}

pub fn lpips(a: &Tensor<f32>, b: &Tensor<f32>, extractor: &dyn FeatureExtractor) -> Result<f64> {
    same_shape(a, b, "lpips")?;
    let fa = extractor.features(a)?;
    let fb = extractor.features(b)?;
    lpips_distance(&fa, &fb, &extractor.layer_weights(&fa))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Ssd,
    Psnr,
    Ssim,
    Lpips,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Ssd, Metric::Psnr, Metric::Ssim, Metric::Lpips];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ssd => "ssd",
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Lpips => "lpips",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown metric {s:?}")))
    }
}

/// All four metrics of one image against ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValues {
    pub ssd: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
}

impl MetricValues {
    pub fn compute(img: &Tensor<f32>, truth: &Tensor<f32>, extractor: &dyn FeatureExtractor) -> Result<Self> {
        Ok(MetricValues {
            ssd: ssd(img, truth)?,
            psnr: psnr(img, truth, 1.0)?,
            ssim: ssim(img, truth)?,
            lpips: lpips(img, truth, extractor)?,
        })
    }

    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Ssd => self.ssd,
            Metric::Psnr => self.psnr,
            Metric::Ssim => self.ssim,
            Metric::Lpips => self.lpips,
        }
    }

    fn set(&mut self, m: Metric, v: f64) {
        match m {
            Metric::Ssd => self.ssd = v,
            Metric::Psnr => self.psnr = v,
            Metric::Ssim => self.ssim = v,
            Metric::Lpips => self.lpips = v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub inpainted: MetricValues,
    pub masked: MetricValues,
}

/// Per-sample metrics of an evaluation run with ratio aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
}

pub const REPORT_KV_FILE: &str = "metrics.kv";
pub const REPORT_TABLE_FILE: &str = "metrics.txt";

impl MetricReport {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn values(&self, m: Metric) -> (Vec<f64>, Vec<f64>) {
        self.samples
            .iter()
            .map(|s| (s.inpainted.get(m), s.masked.get(m)))
            .unzip()
    }

    pub fn ratio(&self, m: Metric) -> Result<f64> {
        let (inp, masked) = self.values(m);
        metric_ratio(&inp, &masked)
    }

    /// Plain-text table: one row per sample, then totals and ratios.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<16}", "sample");
        for m in Metric::ALL {
            let _ = write!(s, " {:>14} {:>14}", format!("{m}_inpainted"), format!("{m}_masked"));
        }
        s.push('\n');
        for row in &self.samples {
            let _ = write!(s, "{:<16}", row.id);
            for m in Metric::ALL {
                let _ = write!(s, " {:>14.6} {:>14.6}", row.inpainted.get(m), row.masked.get(m));
            }
            s.push('\n');
        }
        let _ = writeln!(s, "\n{:<8} {:>16} {:>16} {:>12}", "metric", "sum_inpainted", "sum_masked", "ratio");
        for m in Metric::ALL {
            let (inp, masked) = self.values(m);
            let ratio = self.ratio(m).map_or_else(|e| e.to_string(), |r| format!("{r:.6}"));
            let _ = writeln!(
                s,
                "{:<8} {:>16.6} {:>16.6} {:>12}",
                m.name(),
                inp.iter().sum::<f64>(),
                masked.iter().sum::<f64>(),
                ratio
            );
        }
        s
    }

    /// Writes `metrics.txt`, `metrics.kv` and one `{metric}.csv` per metric
    /// into `dir`. Each key-value line is `name<TAB>csv<TAB>ratio`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        let mut kv = String::new();
        for m in Metric::ALL {
            let csv_name = format!("{m}.csv");
            let mut csv = String::from("id,inpainted,masked\n");
            for row in &self.samples {
                let _ = writeln!(csv, "{},{},{}", row.id, row.inpainted.get(m), row.masked.get(m));
            }
            put(&csv_name, csv)?;
            let ratio = self.ratio(m).map_or_else(|_| "nan".to_string(), |r| r.to_string());
            let _ = writeln!(kv, "{m}\t{csv_name}\t{ratio}");
        }
        put(REPORT_TABLE_FILE, self.to_table())?;
        put(REPORT_KV_FILE, kv)?;
        Ok(dir.join(REPORT_KV_FILE))
    }

    /// Reads a report back from a `metrics.kv` file and its CSVs.
    pub fn read(kv_path: &Path) -> Result<Self> {
        let dir = kv_path.parent().unwrap_or(Path::new("."));
        let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::io(p, e));
        let bad = |p: &Path, msg: String| Error::Manifest {
            path: p.to_path_buf(),
            msg,
        };
        let mut samples: Vec<SampleMetrics> = Vec::new();
        for (n, line) in read(kv_path)?.lines().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            let [name, csv, _ratio] = cols[..] else {
                return Err(bad(kv_path, format!("line {}: expected 3 columns", n + 1)));
            };
            let m: Metric = name.parse()?;
            let csv_path = dir.join(csv);
            for (i, row) in read(&csv_path)?.lines().skip(1).enumerate() {
                let f: Vec<&str> = row.split(',').collect();
                let [id, inp, masked] = f[..] else {
                    return Err(bad(&csv_path, format!("row {}: expected 3 fields", i + 1)));
                };
                let num = |v: &str| v.parse::<f64>().map_err(|e| bad(&csv_path, format!("row {}: {e}", i + 1)));
                if samples.len() <= i {
                    let zero = MetricValues {
                        ssd: 0.0,
                        psnr: 0.0,
                        ssim: 0.0,
                        lpips: 0.0,
                    };
                    samples.push(SampleMetrics {
                        id: id.to_string(),
                        inpainted: zero,
                        masked: zero,
                    });
                }
                if samples[i].id != id {
                    return Err(bad(&csv_path, format!("row {}: id {id:?} out of order", i + 1)));
                }
                samples[i].inpainted.set(m, num(inp)?);
                samples[i].masked.set(m, num(masked)?);
            }
        }
        Ok(MetricReport { samples })
    }
}
