use rand::Rng;

use super::ArchConfig;
use crate::error::{Error, Result};
use crate::nn::{expect_channels, Conv2d, ConvBlock, Mode, ParamStore};
use crate::tensor::{shape_str, Scalar, Tape, Var};

/// Output of one encoder pass.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Pre-pool block outputs, shallowest first.
    pub skips: Vec<Var>,
    /// Pooled output of the deepest block.
    pub bottleneck: Var,
}

/// Per level: conv block, then 2x2 max pooling.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<ConvBlock>,
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        cfg: &ArchConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let mut blocks = Vec::with_capacity(cfg.levels);
        let mut cin = in_channels;
        for (level, cout) in cfg.level_channels().into_iter().enumerate() {
            blocks.push(ConvBlock::new(store, &format!("{name}.level{}", level + 1), cin, cout, rng));
            cin = cout;
        }
        Encoder { blocks }
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].in_channels()
    }

    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Encoded> {
        expect_channels(tape, x, self.in_channels(), "encoder")?;
        let div = 1usize << self.blocks.len();
        let s = tape.shape(x);
        if !s[2].is_multiple_of(div) || !s[3].is_multiple_of(div) || s[2] == 0 || s[3] == 0 {
            return Err(Error::shape(format!(
                "encoder input {} must have H and W divisible by {div}",
                shape_str(s)
            )));
        }
        let mut skips = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for block in &self.blocks {
            let f = block.forward(tape, store, h, mode)?;
            skips.push(f);
            h = tape.maxpool2(f)?;
        }
        Ok(Encoded { skips, bottleneck: h })
    }
}

/// Per level, deepest first: 2x upsampling, concatenation with the skip of
/// the same resolution, conv block. A final 1x1 convolution and a sigmoid
/// produce the image.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub blocks: Vec<ConvBlock>,
    pub head: Conv2d,
}

impl Decoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &ArchConfig, rng: &mut impl Rng) -> Self {
        let chans = cfg.level_channels();
        let mut blocks = Vec::with_capacity(cfg.levels);
        let mut cin = cfg.bottleneck_channels();
        for (i, &skip) in chans.iter().rev().enumerate() {
            blocks.push(ConvBlock::new(store, &format!("{name}.level{}", i + 1), cin + skip, skip, rng));
            cin = skip;
        }
        let head = Conv2d::new(store, &format!("{name}.head"), chans[0], cfg.out_channels, 1, rng);
        Decoder { blocks, head }
    }

    pub fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        bottleneck: Var,
        skips: &[Var],
        mode: Mode,
    ) -> Result<Var> {
        if skips.len() != self.blocks.len() {
            return Err(Error::shape(format!(
                "decoder needs {} skips, got {}",
                self.blocks.len(),
                skips.len()
            )));
        }
        let bottleneck_channels = self.blocks[0].in_channels() - skip_channels(tape, skips.last().copied());
        expect_channels(tape, bottleneck, bottleneck_channels, "decoder bottleneck")?;
        let mut h = bottleneck;
        for (block, &skip) in self.blocks.iter().zip(skips.iter().rev()) {
            let up = tape.upsample2(h)?;
            let (su, ss) = (tape.shape(up), tape.shape(skip));
            if su[0] != ss[0] || su[2..] != ss[2..] {
                return Err(Error::shape(format!(
                    "skip {} does not match upsampled features {}",
                    shape_str(ss),
                    shape_str(su)
                )));
            }
            let cat = tape.concat(1, &[up, skip])?;
            expect_channels(tape, cat, block.in_channels(), "decoder block")?;
            h = block.forward(tape, store, cat, mode)?;
        }
        let logits = self.head.forward(tape, store, h)?;
        Ok(tape.sigmoid(logits))
    }
}

fn skip_channels<T: Scalar>(tape: &Tape<T>, skip: Option<Var>) -> usize {
    skip.map_or(0, |s| tape.shape(s).get(1).copied().unwrap_or(0))
}
