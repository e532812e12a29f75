//! Layers shared by every architecture.
//!
//! Layers only hold [`ParamId`]s; the values live in a [`ParamStore`] so a
//! whole model can be checkpointed, optimized and cast between precisions
//! as one unit.

mod params;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub use params::{ParamId, ParamStore};

/// Forward mode; only batch normalization behaves differently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Kaiming-uniform (fan-in, ReLU gain) initial weights.
pub fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(-bound..bound)))
}

/// Same-size convolution: odd square kernel, stride 1, padding `k/2`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add_trainable(
            format!("{name}.weight"),
            kaiming_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
        );
        let bias = store.add_trainable(format!("{name}.bias"), Tensor::zeros([out_channels]));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add_trainable(format!("{name}.gamma"), Tensor::full([channels], T::one())),
            beta: store.add_trainable(format!("{name}.beta"), Tensor::zeros([channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full([channels], T::one())),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// In train mode the new running statistics are queued on the tape and
    /// land in the store with [`ParamStore::apply_updates`].
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let eps = T::of(self.eps);
        match mode {
            Mode::Eval => {
                let rm = store.get(self.running_mean).data();
                let rv = store.get(self.running_var).data();
                Ok(tape.batch_norm(x, gamma, beta, eps, Some((rm, rv)))?.0)
            }
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, gamma, beta, eps, None)?;
                let (mean, var) = stats.expect("batch statistics in train mode");
                let m = T::of(self.momentum);
                let blend = |old: &[T], new: Vec<T>| -> Vec<T> {
                    old.iter()
                        .zip(new)
                        .map(|(&o, n)| (T::one() - m) * o + m * n)
                        .collect()
                };
                let rm = blend(store.get(self.running_mean).data(), mean);
                let rv = blend(store.get(self.running_var).data(), var);
                tape.queue_update(self.running_mean, rm);
                tape.queue_update(self.running_var, rv);
                Ok(y)
            }
        }
    }
}

/// `x·W + b` over the trailing axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_trainable(format!("{name}.weight"), kaiming_uniform(&[d_in, d_out], d_in, rng));
        let bias = bias.then(|| store.add_trainable(format!("{name}.bias"), Tensor::zeros([d_out])));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

/// Two (conv3x3 → batch norm → ReLU) stages.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub stages: [(Conv2d, BatchNorm2d); 2],
}

impl ConvBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let stage = |store: &mut ParamStore<T>, i: usize, cin: usize, rng: &mut _| {
            (
                Conv2d::new(store, &format!("{name}.conv{i}"), cin, out_channels, 3, rng),
                BatchNorm2d::new(store, &format!("{name}.bn{i}"), out_channels),
            )
        };
        let first = stage(store, 1, in_channels, rng);
        let second = stage(store, 2, out_channels, rng);
        ConvBlock {
            stages: [first, second],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.stages[0].0.in_channels
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for (conv, bn) in &self.stages {
            h = conv.forward(tape, store, h)?;
            h = bn.forward(tape, store, h, mode)?;
            h = tape.relu(h);
        }
        Ok(h)
    }
}

pub(crate) fn expect_channels(tape: &Tape<impl Scalar>, x: Var, channels: usize, what: &str) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 4 || s[1] != channels {
        return Err(Error::shape(format!(
            "{what} expects [N,{channels},H,W], got {s:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
