//! The three inpainting networks.
//!
//! All share one encoder and one decoder design. The baseline is a plain
//! U-Net on the occluded RGB image. The depth-enhanced variants run a
//! second encoder over the occluded depth map and fuse the two bottlenecks,
//! either with a sigmoid gate (simple attention) or with multi-head
//! self-attention, before decoding with the RGB encoder's skips.

mod fusion;
mod unet;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Mode, ParamStore};
use crate::seed::{self, Stream};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub use fusion::{Fused, MultiHeadFusion, SimpleAttentionFusion};
pub use unet::{Decoder, Encoded, Encoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Baseline,
    DeSha,
    DeMha,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Baseline, ModelKind::DeSha, ModelKind::DeMha];

    pub fn uses_depth(self) -> bool {
        !matches!(self, ModelKind::Baseline)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::DeSha => "de-sha",
            ModelKind::DeMha => "de-mha",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(ModelKind::Baseline),
            "de-sha" => Ok(ModelKind::DeSha),
            "de-mha" => Ok(ModelKind::DeMha),
            other => Err(Error::Config(format!(
                "unknown model {other:?} (expected baseline, de-sha or de-mha)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub rgb_in_channels: usize,
    pub depth_in_channels: usize,
    pub out_channels: usize,
    pub mha_heads: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            levels: 3,
            base_channels: 8,
            rgb_in_channels: 3,
            depth_in_channels: 1,
            out_channels: 3,
            mha_heads: 4,
        }
    }
}

impl ArchConfig {
    /// Encoder block widths, doubling per level.
    pub fn level_channels(&self) -> Vec<usize> {
        (0..self.levels).map(|l| self.base_channels << l).collect()
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.mha_heads == 0 {
            return Err(Error::Config("levels, base_channels and mha_heads must be positive".into()));
        }
        if !(2 * self.bottleneck_channels()).is_multiple_of(self.mha_heads) {
            return Err(Error::Config(format!(
                "{} fused channels cannot be split into {} heads",
                2 * self.bottleneck_channels(),
                self.mha_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    None,
    Simple(SimpleAttentionFusion),
    MultiHead(MultiHeadFusion),
}

/// Every intermediate a caller may want to inspect after a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Reconstructed image `[N,3,H,W]` in `[0,1]`.
    pub output: Var,
    pub rgb: Encoded,
    pub depth_bottleneck: Option<Var>,
    /// Bottleneck handed to the decoder: the fused map for depth models,
    /// the RGB bottleneck for the baseline.
    pub decoder_input: Var,
    pub attention: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub kind: ModelKind,
    pub config: ArchConfig,
    pub params: ParamStore<T>,
    pub rgb_encoder: Encoder,
    pub depth_encoder: Option<Encoder>,
    pub fusion: Fusion,
    pub decoder: Decoder,
}

impl<T: Scalar> Model<T> {
    pub fn new(kind: ModelKind, config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, Stream::Init, 0);
        let mut params = ParamStore::new();
        let rgb_encoder = Encoder::new(&mut params, "rgb_encoder", config.rgb_in_channels, &config, &mut rng);
        let depth_encoder = kind
            .uses_depth()
            .then(|| Encoder::new(&mut params, "depth_encoder", config.depth_in_channels, &config, &mut rng));
        let c = config.bottleneck_channels();
        let fusion = match kind {
            ModelKind::Baseline => Fusion::None,
            ModelKind::DeSha => Fusion::Simple(SimpleAttentionFusion::new(&mut params, c, &mut rng)),
            ModelKind::DeMha => Fusion::MultiHead(MultiHeadFusion::new(&mut params, c, config.mha_heads, &mut rng)),
        };
        let decoder = Decoder::new(&mut params, "decoder", &config, &mut rng);
        Ok(Model {
            kind,
            config,
            params,
            rgb_encoder,
            depth_encoder,
            fusion,
            decoder,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Same network in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            kind: self.kind,
            config: self.config.clone(),
            params: self.params.cast(),
            rgb_encoder: self.rgb_encoder.clone(),
            depth_encoder: self.depth_encoder.clone(),
            fusion: self.fusion.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub fn encode_rgb(&self, tape: &mut Tape<T>, rgb: Var, mode: Mode) -> Result<Encoded> {
        self.rgb_encoder.encode(tape, &self.params, rgb, mode)
    }

    pub fn decode(&self, tape: &mut Tape<T>, bottleneck: Var, skips: &[Var], mode: Mode) -> Result<Var> {
        self.decoder.decode(tape, &self.params, bottleneck, skips, mode)
    }

    /// Fuses RGB and depth bottlenecks. Errors for the baseline.
    pub fn fuse(&self, tape: &mut Tape<T>, rgb: Var, depth: Var) -> Result<Fused> {
        match &self.fusion {
            Fusion::None => Err(Error::invalid("the baseline has no fusion stage")),
            Fusion::Simple(f) => f.fuse(tape, &self.params, rgb, depth),
            Fusion::MultiHead(f) => f.fuse(tape, &self.params, rgb, depth),
        }
    }

    /// Runs the network on an occluded RGB batch and, for depth models, the
    /// identically occluded depth batch. The baseline ignores `depth`.
    pub fn forward(&self, tape: &mut Tape<T>, rgb: Var, depth: Option<Var>, mode: Mode) -> Result<ForwardOutput> {
        let rgb_enc = self.encode_rgb(tape, rgb, mode)?;
        let (decoder_input, depth_bottleneck, attention) = match &self.depth_encoder {
            None => (rgb_enc.bottleneck, None, None),
            Some(enc) => {
                let depth = depth.ok_or_else(|| {
                    Error::invalid(format!("{} needs a depth map", self.kind))
                })?;
                let (sr, sd) = (tape.shape(rgb), tape.shape(depth));
                if sr[0] != sd[0] || sr[2..] != sd[2..] {
                    return Err(Error::shape(format!(
                        "depth {sd:?} does not match rgb {sr:?} spatially"
                    )));
                }
                let d = enc.encode(tape, &self.params, depth, mode)?;
                let fused = self.fuse(tape, rgb_enc.bottleneck, d.bottleneck)?;
                (fused.features, Some(d.bottleneck), Some(fused.attention))
            }
        };
        let output = self.decode(tape, decoder_input, &rgb_enc.skips, mode)?;
        Ok(ForwardOutput {
            output,
            rgb: rgb_enc,
            depth_bottleneck,
            decoder_input,
            attention,
        })
    }

    /// Evaluation-mode reconstruction of a single `[3,H,W]` image.
    pub fn inpaint(&self, rgb: &Tensor<T>, depth: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let add_batch = |t: &Tensor<T>| {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.clone().reshape(s)
        };
        let r = tape.constant(add_batch(rgb)?);
        let d = match depth {
            Some(d) if self.kind.uses_depth() => Some(tape.constant(add_batch(d)?)),
            _ => None,
        };
        let out = self.forward(&mut tape, r, d, Mode::Eval)?;
        tape.tensor(out.output).reshape(rgb.shape().to_vec())
    }

    pub fn manifest_line(&self) -> String {
        let c = &self.config;
        format!(
            "kind={} levels={} base_channels={} rgb_in_channels={} depth_in_channels={} out_channels={} mha_heads={} params={}",
            self.kind,
            c.levels,
            c.base_channels,
            c.rgb_in_channels,
            c.depth_in_channels,
            c.out_channels,
            c.mha_heads,
            self.parameter_count()
        )
    }

    /// Writes the parameter container and its manifest sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)?;
        let manifest = manifest_path(path);
        fs::write(&manifest, self.manifest_line() + "\n").map_err(|e| Error::io(manifest, e))
    }

    /// Rebuilds the model described by the manifest sidecar and loads the
    /// checkpoint values into it.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: "no such file".into(),
            });
        }
        let manifest = manifest_path(path);
        let line = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let (kind, config, count) = parse_manifest(&line).map_err(|msg| Error::Checkpoint {
            path: manifest.clone(),
            msg,
        })?;
        let mut model = Model::new(kind, config, 0)?;
        model.params.load(path)?;
        if model.parameter_count() != count {
            return Err(Error::Checkpoint {
                path: manifest,
                msg: format!("manifest says {count} parameters, model has {}", model.parameter_count()),
            });
        }
        Ok(model)
    }
}

pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn parse_manifest(line: &str) -> std::result::Result<(ModelKind, ArchConfig, usize), String> {
    let mut kind = None;
    let mut cfg = ArchConfig::default();
    let mut count = None;
    for field in line.split_whitespace() {
        let (k, v) = field.split_once('=').ok_or_else(|| format!("malformed field {field:?}"))?;
        let num = || v.parse::<usize>().map_err(|e| format!("{k}: {e}"));
        match k {
            "kind" => kind = Some(v.parse::<ModelKind>().map_err(|e| e.to_string())?),
            "levels" => cfg.levels = num()?,
            "base_channels" => cfg.base_channels = num()?,
            "rgb_in_channels" => cfg.rgb_in_channels = num()?,
            "depth_in_channels" => cfg.depth_in_channels = num()?,
            "out_channels" => cfg.out_channels = num()?,
            "mha_heads" => cfg.mha_heads = num()?,
            "params" => count = Some(num()?),
            other => return Err(format!("unknown field {other:?}")),
        }
    }
    Ok((
        kind.ok_or("missing kind")?,
        cfg,
        count.ok_or("missing params")?,
    ))
}
