//! Adam optimization, dataset splitting, the training loop and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::masking::{apply_mask, gen_mask, Mask, MaskKind, MaskSpec};
use crate::metrics::{FeatureExtractor, MetricReport, MetricValues, SampleMetrics};
use crate::models::Model;
use crate::nn::{Mode, ParamStore};
use crate::seed::{self, Stream};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied as `θ ← θ − lr·wd·θ` before each update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment buffers for every trainable tensor of one store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new<T: Scalar>(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let sizes: Vec<usize> = store.ids().map(|id| store.get(id).numel()).collect();
        Adam {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every trainable tensor from its
    /// accumulated gradient.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.trainable_ids().collect();
        if let Some(&id) = ids.iter().find(|&&id| store.get(id).grad.is_none()) {
            return Err(Error::invalid(format!("parameter {} has no gradient", store.name(id))));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for id in ids {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            let g: Vec<f64> = p.grad.as_ref().expect("checked").iter().map(|&x| Scalar::to_f64(x)).collect();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let mut theta = Scalar::to_f64(*w);
                if c.weight_decay > 0.0 {
                    theta -= c.lr * c.weight_decay * theta;
                }
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let (mh, vh) = (m[i] / bc1, v[i] / bc2);
                theta -= c.lr * mh / (vh.sqrt() + c.eps);
                *w = T::of(theta);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded partition of `0..n`. Validation and test sizes are the rounded
/// fractions (at least one each); the remainder trains.
pub fn split_dataset(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| f.is_nan() || *f <= 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be positive and sum to 1")));
    }
    if n < 3 {
        return Err(Error::invalid(format!("cannot split {n} samples three ways")));
    }
    let part = |f: f64| ((n as f64 * f).round() as usize).max(1);
    let (n_val, n_test) = (part(fractions[1]), part(fractions[2]));
    if n_val + n_test >= n {
        return Err(Error::invalid(format!("{n} samples leave no training data")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, Stream::Split, 0));
    let test = order.split_off(n - n_test);
    let val = order.split_off(n - n_test - n_val);
    Ok(Split { train: order, val, test })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub fractions: [f64; 3],
    /// Drives the split and the per-epoch shuffle.
    pub seed: u64,
    pub mask: MaskSpec,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            epochs: 100,
            batch_size: 4,
            fractions: [0.8, 0.1, 0.1],
            seed: 0,
            mask: MaskSpec::new(MaskKind::Line, 0),
            max_steps: None,
        }
    }
}

/// Mask stream index of a sample during training epoch `epoch` (from 0).
/// Evaluation masks use the plain sample index, which no epoch reaches.
pub fn train_mask_index(epoch: usize, sample: usize) -> u64 {
    ((epoch as u64 + 1) << 32) | sample as u64
}

/// The occluded RGB and depth of a sample under mask `index`.
pub fn masked_inputs(sample: &Sample, spec: &MaskSpec, index: u64) -> Result<(Mask, Tensor<f32>, Tensor<f32>)> {
    let s = sample.rgb.shape();
    let mask = gen_mask(spec, s[1], s[2], index)?;
    let (rgb, depth) = apply_mask(&sample.rgb, &sample.depth, &mask, spec.fill_value)?;
    Ok((mask, rgb, depth))
}

/// Occluded inputs and targets for a list of `(mask index, sample)`.
pub struct Batch {
    pub rgb: Tensor<f32>,
    pub depth: Tensor<f32>,
    pub target: Tensor<f32>,
}

impl Batch {
    pub fn build(items: &[(u64, &Sample)], spec: &MaskSpec) -> Result<Self> {
        let mut rgb = Vec::with_capacity(items.len());
        let mut depth = Vec::with_capacity(items.len());
        for &(index, s) in items {
            let (_, r, d) = masked_inputs(s, spec, index)?;
            rgb.push(r);
            depth.push(d);
        }
        let target: Vec<&Tensor<f32>> = items.iter().map(|(_, s)| &s.rgb).collect();
        Ok(Batch {
            rgb: Tensor::stack(&rgb.iter().collect::<Vec<_>>())?,
            depth: Tensor::stack(&depth.iter().collect::<Vec<_>>())?,
            target: Tensor::stack(&target)?,
        })
    }

    pub fn len(&self) -> usize {
        self.rgb.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Full-image MSE of the model on a batch, without updating anything.
pub fn batch_loss(model: &Model<f32>, batch: &Batch, mode: Mode) -> Result<f64> {
    let mut tape = Tape::inference();
    let r = tape.constant(batch.rgb.clone());
    let d = tape.constant(batch.depth.clone());
    let t = tape.constant(batch.target.clone());
    let out = model.forward(&mut tape, r, Some(d), mode)?;
    let loss = tape.mse(out.output, t)?;
    Ok(tape.scalar(loss)? as f64)
}

/// One optimizer step on a batch. Returns the loss before the update.
pub fn train_step(model: &mut Model<f32>, adam: &mut Adam, batch: &Batch, label: &str) -> Result<f64> {
    let mut tape = Tape::new();
    let r = tape.constant(batch.rgb.clone());
    let d = tape.constant(batch.depth.clone());
    let t = tape.constant(batch.target.clone());
    let out = model.forward(&mut tape, r, Some(d), Mode::Train)?;
    let loss_var = tape.mse(out.output, t)?;
    let loss = tape.scalar(loss_var)? as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("{label} (loss {loss})")));
    }
    let updates = tape.take_updates();
    model.params.zero_grad();
    tape.backward_into(loss_var, &mut model.params)?;
    model.params.apply_updates(updates);
    adam.step(&mut model.params)?;
    model.params.zero_grad();
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub split: Split,
    pub steps: usize,
}

pub const HISTORY_FILE: &str = "history.csv";
pub const BEST_CHECKPOINT: &str = "best.bin";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_mse,val_mse,wall_seconds\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{:.3}", r.epoch, r.train_mse, r.val_mse, r.wall_seconds);
    }
    s
}

/// Mean full-image MSE over fixed evaluation masks.
pub fn validation_mse(model: &Model<f32>, samples: &[Sample], indices: &[usize], spec: &MaskSpec, batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in indices.chunks(batch.max(1)) {
        let items: Vec<_> = chunk.iter().map(|&i| (i as u64, &samples[i])).collect();
        let b = Batch::build(&items, spec)?;
        total += batch_loss(model, &b, Mode::Eval)? * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

/// Trains on the split's training part, keeping the checkpoint with the
/// lowest validation MSE in `out_dir/best.bin` and the per-epoch history in
/// `out_dir/history.csv`.
pub fn train(model: &mut Model<f32>, samples: &[Sample], cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    let split = split_dataset(samples.len(), cfg.fractions, cfg.seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let history_path = out_dir.join(HISTORY_FILE);
    let mut adam = Adam::new(cfg.adam, &model.params);
    let mut history = Vec::new();
    let (mut best_val, mut best_epoch) = (f64::INFINITY, 0);
    let start = Instant::now();
    let mut steps = 0;
    info!(
        "training {} on {} samples (val {}, test {})",
        model.kind,
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    'epochs: for epoch in 0..cfg.epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut seed::rng(cfg.seed, Stream::Shuffle, epoch as u64));
        let (mut sum, mut count) = (0.0, 0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let items: Vec<_> = chunk.iter().map(|&i| (train_mask_index(epoch, i), &samples[i])).collect();
            let batch = Batch::build(&items, &cfg.mask)?;
            let label = format!("epoch {} batch {} (step {})", epoch + 1, b + 1, steps + 1);
            let loss = train_step(model, &mut adam, &batch, &label)?;
            debug!("{label}: loss {loss:.6}");
            sum += loss * chunk.len() as f64;
            count += chunk.len();
            steps += 1;
        }
        if count == 0 {
            break 'epochs;
        }
        let val_mse = validation_mse(model, samples, &split.val, &cfg.mask, cfg.batch_size)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_mse: sum / count as f64,
            val_mse,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {}: train_mse {:.6} val_mse {:.6}",
            record.epoch, record.train_mse, record.val_mse
        );
        if val_mse < best_val {
            best_val = val_mse;
            best_epoch = record.epoch;
            model.save(&best_path)?;
        }
        history.push(record);
        fs::write(&history_path, history_csv(&history)).map_err(|e| Error::io(&history_path, e))?;
    }
    Ok(TrainOutcome {
        history,
        best_checkpoint: best_path,
        best_epoch,
        best_val_mse: best_val,
        split,
        steps,
    })
}

/// Anything that reconstructs an occluded sample.
pub trait Inpainter: Sync {
    fn inpaint(&self, rgb_masked: &Tensor<f32>, depth_masked: &Tensor<f32>, sample: &Sample) -> Result<Tensor<f32>>;
}

impl Inpainter for Model<f32> {
    fn inpaint(&self, rgb_masked: &Tensor<f32>, depth_masked: &Tensor<f32>, _: &Sample) -> Result<Tensor<f32>> {
        Model::inpaint(self, rgb_masked, Some(depth_masked))
    }
}

/// Returns its occluded input unchanged.
pub struct IdentityInpainter;

impl Inpainter for IdentityInpainter {
    fn inpaint(&self, rgb_masked: &Tensor<f32>, _: &Tensor<f32>, _: &Sample) -> Result<Tensor<f32>> {
        Ok(rgb_masked.clone())
    }
}

/// Returns the ground truth.
pub struct OracleInpainter;

impl Inpainter for OracleInpainter {
    fn inpaint(&self, _: &Tensor<f32>, _: &Tensor<f32>, sample: &Sample) -> Result<Tensor<f32>> {
        Ok(sample.rgb.clone())
    }
}

/// Metrics of every `(mask index, sample)` pair for both the inpainted and
/// the occluded image. Results do not depend on `jobs`.
pub fn evaluate(
    inpainter: &dyn Inpainter,
    items: &[(u64, &Sample)],
    spec: &MaskSpec,
    extractor: &dyn FeatureExtractor,
    jobs: usize,
) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let one = |&(index, sample): &(u64, &Sample)| -> Result<SampleMetrics> {
        let (_, rgb, depth) = masked_inputs(sample, spec, index)?;
        let out = inpainter.inpaint(&rgb, &depth, sample)?;
        Ok(SampleMetrics {
            id: sample.id.clone(),
            inpainted: MetricValues::compute(&out, &sample.rgb, extractor)?,
            masked: MetricValues::compute(&rgb, &sample.rgb, extractor)?,
        })
    };
    let samples = with_jobs(jobs, || items.par_iter().map(one).collect::<Result<Vec<_>>>())??;
    Ok(MetricReport { samples })
}

/// Runs `f` on a dedicated pool of `jobs` threads (0 = rayon default).
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
