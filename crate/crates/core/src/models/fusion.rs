use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{expect_channels, Conv2d, Linear, ParamStore};
use crate::tensor::{shape_str, Scalar, Tape, Var};

/// Result of fusing the two bottlenecks.
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub features: Var,
    /// Sigmoid weight map `[N,C,h,w]` for simple attention, softmax weights
    /// `[N,heads,L,L]` for multi-head attention.
    pub attention: Var,
}

fn check_pair<T: Scalar>(tape: &Tape<T>, rgb: Var, depth: Var) -> Result<()> {
    if tape.shape(rgb) != tape.shape(depth) {
        return Err(Error::shape(format!(
            "fusion inputs differ: rgb {} vs depth {}",
            shape_str(tape.shape(rgb)),
            shape_str(tape.shape(depth))
        )));
    }
    Ok(())
}

/// `rgb ⊙ σ(conv2(ReLU(conv1([rgb, depth])))) + depth`.
#[derive(Clone, Debug)]
pub struct SimpleAttentionFusion {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl SimpleAttentionFusion {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, channels: usize, rng: &mut impl Rng) -> Self {
        SimpleAttentionFusion {
            conv1: Conv2d::new(store, "fusion.conv1", 2 * channels, channels, 3, rng),
            conv2: Conv2d::new(store, "fusion.conv2", channels, channels, 3, rng),
        }
    }

    pub fn fuse<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, rgb: Var, depth: Var) -> Result<Fused> {
        check_pair(tape, rgb, depth)?;
        expect_channels(tape, rgb, self.conv2.out_channels, "simple attention fusion")?;
        let combined = tape.concat(1, &[rgb, depth])?;
        let h = self.conv1.forward(tape, store, combined)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, store, h)?;
        let attention = tape.sigmoid(h);
        let gated = tape.mul(rgb, attention)?;
        let features = tape.add(gated, depth)?;
        Ok(Fused { features, attention })
    }
}

/// Multi-head scaled dot-product self-attention over the bottleneck
/// positions of the concatenated RGB and depth features, followed by a
/// 1x1 convolution back to the decoder's channel count.
#[derive(Clone, Debug)]
pub struct MultiHeadFusion {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub project: Conv2d,
    pub heads: usize,
}

impl MultiHeadFusion {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, channels: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let d = 2 * channels;
        assert!(heads > 0 && d.is_multiple_of(heads), "{d} channels cannot be split into {heads} heads");
        MultiHeadFusion {
            query: Linear::new(store, "fusion.query", d, d, false, rng),
            key: Linear::new(store, "fusion.key", d, d, false, rng),
            value: Linear::new(store, "fusion.value", d, d, false, rng),
            output: Linear::new(store, "fusion.output", d, d, false, rng),
            project: Conv2d::new(store, "fusion.project", d, channels, 1, rng),
            heads,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.query.d_in
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.heads
    }

    /// Self-attention over a token sequence `[N, L, d]`. Returns the
    /// `W_O`-projected output `[N, L, d]` and the attention weights
    /// `[N, heads, L, L]`.
    pub fn attend_tokens<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: Var) -> Result<(Var, Var)> {
        let s = tape.shape(tokens).to_vec();
        let d = self.model_dim();
        if s.len() != 3 || s[2] != d {
            return Err(Error::shape(format!("attention expects [N,L,{d}], got {}", shape_str(&s))));
        }
        let (n, len, hd) = (s[0], s[1], self.head_dim());
        let mut split = |lin: &Linear| -> Result<Var> {
            let p = lin.forward(tape, store, tokens)?;
            let p = tape.reshape(p, &[n, len, self.heads, hd])?;
            tape.permute(p, &[0, 2, 1, 3])
        };
        let q = split(&self.query)?;
        let k = split(&self.key)?;
        let v = split(&self.value)?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, T::of(1.0 / (hd as f64).sqrt()));
        let weights = tape.softmax(scores, 3)?;
        let o = tape.bmm(weights, v, false)?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[n, len, d])?;
        let o = self.output.forward(tape, store, o)?;
        Ok((o, weights))
    }

    pub fn fuse<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, rgb: Var, depth: Var) -> Result<Fused> {
        check_pair(tape, rgb, depth)?;
        expect_channels(tape, rgb, self.project.out_channels, "multi-head fusion")?;
        let combined = tape.concat(1, &[rgb, depth])?;
        let s = tape.shape(combined).to_vec();
        let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
        let tokens = tape.reshape(combined, &[n, d, h * w])?;
        let tokens = tape.permute(tokens, &[0, 2, 1])?;
        let (out, attention) = self.attend_tokens(tape, store, tokens)?;
        let out = tape.permute(out, &[0, 2, 1])?;
        let out = tape.reshape(out, &[n, d, h, w])?;
        let features = self.project.forward(tape, store, out)?;
        Ok(Fused { features, attention })
    }
}
