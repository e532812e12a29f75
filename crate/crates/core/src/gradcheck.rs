//! Central finite-difference gradient checking.
//!
//! Only forward passes are used to build the numerical estimate, so the
//! check is independent of every backward rule it verifies.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates dropped because the loss is not smooth within `h`
    /// (a ReLU or max-pool switch was crossed).
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = rel_err(analytic, numeric);
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = e;
            self.worst = format!("{} analytic={analytic:e} numeric={numeric:e}", what());
        }
    }
}

/// Reduces any output to a scalar with fixed pseudo-random weights so every
/// output element contributes a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let n = tape.data(out).len();
    if n == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(tape.shape(out).to_vec(), |_| rng.random_range(-1.0..1.0));
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Checks the gradient of `f` with respect to each of `inputs`, element by
/// element.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>], track: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = track;
                tape.leaf(t)
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        let loss = weighted_sum(&mut tape, out, 0x5eed)?;
        Ok((tape, vars, loss))
    };
    let (tape, vars, loss) = eval(inputs, true)?;
    let grads = tape.backward(loss)?;
    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[ti].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = inputs[ti].data()[j];
            let mut at = |x: f64| -> Result<f64> {
                probe[ti].data_mut()[j] = x;
                let (tape, _, loss) = eval(&probe, false)?;
                tape.scalar(loss)
            };
            let numeric = (at(orig + h)? - at(orig - h)?) / (2.0 * h);
            probe[ti].data_mut()[j] = orig;
            report.record(|| format!("input {ti}[{j}]"), a, numeric);
        }
    }
    Ok(report)
}

/// Checks parameter gradients of a scalar loss built by `f`, at up to
/// `per_tensor` sampled coordinates of every trainable tensor in `store`.
///
/// Coordinates where halving `h` changes the estimate by more than
/// `kink_tol` (relative) sit on a non-differentiable switch and are skipped.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    h: f64,
    per_tensor: usize,
    kink_tol: f64,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let mut analytic = store.clone();
    analytic.zero_grad();
    tape.backward_into(loss, &mut analytic)?;

    let mut probe = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let numel = store.get(id).numel();
        let picks = sample(&mut rng, numel, per_tensor.min(numel));
        for j in picks {
            let orig = store.get(id).data()[j];
            let mut at = |x: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[j] = x;
                let mut tape = Tape::inference();
                let loss = f(&mut tape, &probe)?;
                tape.scalar(loss)
            };
            let full = (at(orig + h)? - at(orig - h)?) / (2.0 * h);
            let half = (at(orig + h / 2.0)? - at(orig - h / 2.0)?) / h;
            probe.get_mut(id).data_mut()[j] = orig;
            if rel_err(full, half) > kink_tol {
                report.skipped += 1;
                continue;
            }
            let a = analytic.get(id).grad.as_ref().map_or(0.0, |g| g[j]);
            report.record(|| format!("{}[{j}]", store.name(id)), a, full);
        }
    }
    Ok(report)
}
