//! Gradient-weighted class activation maps for the inpainting models.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;

use crate::dataio::{quantize, resize_bilinear, write_png};
use crate::error::{Error, Result};
use crate::masking::MaskKind;
use crate::models::{Model, ModelKind};
use crate::nn::Mode;
use crate::tensor::{shape_str, Scalar, Tape, Tensor, Var};

/// Scalar whose gradient weights the activation channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CamTarget {
    /// Mean squared error between the output and the ground truth.
    #[default]
    ReconstructionMse,
    /// Mean of the output image.
    OutputMean,
}

impl CamTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            CamTarget::ReconstructionMse => "mse",
            CamTarget::OutputMean => "mean",
        }
    }
}

impl fmt::Display for CamTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CamTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(CamTarget::ReconstructionMse),
            "mean" => Ok(CamTarget::OutputMean),
            _ => Err(Error::Config(format!("unknown cam target {s:?} (expected mse or mean)"))),
        }
    }
}

/// Activation the map is taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CamLayer {
    /// The decoder input: the fused map for depth models, the RGB
    /// bottleneck for the baseline.
    #[default]
    DecoderInput,
    RgbBottleneck,
    DepthBottleneck,
}

impl CamLayer {
    pub fn as_str(self) -> &'static str {
        match self {
            CamLayer::DecoderInput => "decoder-input",
            CamLayer::RgbBottleneck => "rgb-bottleneck",
            CamLayer::DepthBottleneck => "depth-bottleneck",
        }
    }
}

impl fmt::Display for CamLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CamLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoder-input" => Ok(CamLayer::DecoderInput),
            "rgb-bottleneck" => Ok(CamLayer::RgbBottleneck),
            "depth-bottleneck" => Ok(CamLayer::DepthBottleneck),
            _ => Err(Error::Config(format!(
                "unknown cam layer {s:?} (expected decoder-input, rgb-bottleneck or depth-bottleneck)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamResult {
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width` map in `[0,1]`.
    pub heatmap: Vec<f64>,
    /// ReLU'd weighted sum at the activation's own resolution.
    pub raw: Vec<f64>,
    pub raw_height: usize,
    pub raw_width: usize,
    pub target: CamTarget,
    pub layer: CamLayer,
}

impl CamResult {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.heatmap[y * self.width + x]
    }
}

/// `ReLU(Σ_k α_k A_k)` with `α_k` the spatial mean of `∂y/∂A_k`, for a
/// `[C,H,W]` activation and gradient stored row-major.
pub fn weighted_activation(activation: &[f64], grad: &[f64], c: usize, hw: usize) -> Vec<f64> {
    assert_eq!(activation.len(), c * hw);
    assert_eq!(grad.len(), c * hw);
    let mut cam = vec![0.0; hw];
    for k in 0..c {
        let g = &grad[k * hw..(k + 1) * hw];
        let alpha = g.iter().sum::<f64>() / hw as f64;
        for (o, a) in cam.iter_mut().zip(&activation[k * hw..(k + 1) * hw]) {
            *o += alpha * a;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    cam
}

/// Min-max rescale to `[0,1]`; a constant map becomes all zeros.
pub fn normalize(map: &[f64]) -> Vec<f64> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !span.is_finite() || span <= 0.0 {
        return vec![0.0; map.len()];
    }
    map.iter().map(|v| (v - lo) / span).collect()
}

/// Runs backward from `target` and builds the map for `activation`
/// (`[1,C,h,w]`), upsampled to `height × width`. The activation must have
/// been registered with [`Tape::retain_grad`].
pub fn cam_from_tape<T: Scalar>(
    tape: Tape<T>,
    activation: Var,
    target: Var,
    height: usize,
    width: usize,
) -> Result<(Vec<f64>, usize, usize, Vec<f64>)> {
    let shape = tape.shape(activation).to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::shape(format!(
            "cam activation must be [1,C,h,w], got {}",
            shape_str(&shape)
        )));
    }
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let act: Vec<f64> = tape.data(activation).iter().map(|&v| Scalar::to_f64(v)).collect();
    let grads = tape.backward(target)?;
    let grad: Vec<f64> = match grads.get(activation) {
        Some(g) => g.iter().map(|&v| Scalar::to_f64(v)).collect(),
        None => vec![0.0; c * h * w],
    };
    let raw = weighted_activation(&act, &grad, c, h * w);
    let up = resize_bilinear(&Tensor::new([1, h, w], raw.clone())?, height, width);
    Ok((normalize(up.data()), h, w, raw))
}

/// Grad-CAM of one `[3,H,W]` input (with its `[1,H,W]` depth for depth
/// models) in evaluation mode.
pub fn gradcam<T: Scalar>(
    model: &Model<T>,
    rgb: &Tensor<T>,
    depth: Option<&Tensor<T>>,
    truth: &Tensor<T>,
    target: CamTarget,
    layer: CamLayer,
) -> Result<CamResult> {
    gradcam_with(model, rgb, depth, layer, target, |tape, out| {
        let t = match target {
            CamTarget::ReconstructionMse => {
                let truth = tape.constant(truth.clone().reshape(tape.shape(out).to_vec())?);
                tape.mse(out, truth)?
            }
            CamTarget::OutputMean => tape.mean(out),
        };
        Ok(t)
    })
}

/// Grad-CAM against an arbitrary scalar built from the model output
/// `[1,3,H,W]`. `target` only labels the result.
pub fn gradcam_with<T: Scalar>(
    model: &Model<T>,
    rgb: &Tensor<T>,
    depth: Option<&Tensor<T>>,
    layer: CamLayer,
    target: CamTarget,
    objective: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<CamResult> {
    let s = rgb.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected [3,H,W] input, got {}", shape_str(s))));
    }
    let (height, width) = (s[1], s[2]);
    let mut tape = Tape::new();
    let batched = |t: &Tensor<T>| {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.clone().reshape(shape)
    };
    let r = tape.constant(batched(rgb)?);
    let d = match depth {
        Some(d) if model.kind.uses_depth() => Some(tape.constant(batched(d)?)),
        _ => None,
    };
    let out = model.forward(&mut tape, r, d, Mode::Eval)?;
    let activation = match layer {
        CamLayer::DecoderInput => out.decoder_input,
        CamLayer::RgbBottleneck => out.rgb.bottleneck,
        CamLayer::DepthBottleneck => out.depth_bottleneck.ok_or_else(|| {
            Error::invalid(format!("{} has no depth bottleneck", model.kind))
        })?,
    };
    tape.retain_grad(activation);
    let y = objective(&mut tape, out.output)?;
    let (heatmap, raw_height, raw_width, raw) = cam_from_tape(tape, activation, y, height, width)?;
    Ok(CamResult {
        height,
        width,
        heatmap,
        raw,
        raw_height,
        raw_width,
        target,
        layer,
    })
}

pub fn cam_file_name(sample_id: &str, model: ModelKind, mask: MaskKind) -> String {
    format!("{sample_id}_{model}_{mask}_cam.png")
}

/// Writes a `3W × H` PNG: the input, the heatmap in gray, and the input
/// blended towards red by half the heat.
pub fn export_overlay(cam: &CamResult, rgb: &Tensor<f32>, path: &Path) -> Result<()> {
    if rgb.shape() != [3, cam.height, cam.width] {
        return Err(Error::shape(format!(
            "overlay input {} does not match a {}x{} map",
            shape_str(rgb.shape()),
            cam.height,
            cam.width
        )));
    }
    let (h, w) = (cam.height, cam.width);
    let d = rgb.data();
    let mut img = RgbImage::new(3 * w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let heat = cam.get(y, x) as f32;
            let px: [f32; 3] = std::array::from_fn(|c| d[c * h * w + y * w + x].clamp(0.0, 1.0));
            let red = [1.0f32, 0.0, 0.0];
            let blend: [f32; 3] = std::array::from_fn(|c| px[c] * (1.0 - 0.5 * heat) + 0.5 * heat * red[c]);
            let (yy, xx) = (y as u32, x as u32);
            img.put_pixel(xx, yy, image::Rgb(px.map(quantize)));
            img.put_pixel(xx + w as u32, yy, image::Rgb([quantize(heat); 3]));
            img.put_pixel(xx + 2 * w as u32, yy, image::Rgb(blend.map(quantize)));
        }
    }
    write_png(path, |p| img.save_with_format(p, image::ImageFormat::Png))
}
