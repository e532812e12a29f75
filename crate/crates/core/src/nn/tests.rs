use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::check_inputs;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-2.0..2.0))
}

/// Direct zero-padded cross-correlation.
fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; n * cout * h * wd];
    for i in 0..n {
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((i * cin + ci) * h + sy as usize) * wd + sx as usize];
                                let wv = w.data()[((co * cin + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((i * cout + co) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut tape = Tape::<f64>::new();
    let x = random(&[1, 1, 5, 5], 1);
    let mut w = Tensor::zeros([1, 1, 3, 3]);
    w.data_mut()[4] = 1.0;
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w);
    let bv = tape.constant(Tensor::zeros([1]));
    let y = tape.conv2d(xv, wv, bv).unwrap();
    assert_eq!(tape.data(y), x.data());
}

#[test]
fn all_ones_kernel_border_effect() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
    let w = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
    let b = tape.constant(Tensor::zeros([1]));
    let y = tape.conv2d(x, w, b).unwrap();
    assert_eq!(tape.data(y), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn conv_channel_mismatch_is_an_error() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros([1, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros([1]));
    assert!(tape.conv2d(x, w, b).unwrap_err().to_string().contains("channels"));
}

#[test]
fn conv_matches_loop_reference() {
    for (k, seed) in [(3, 10), (1, 20)] {
        let x = random(&[1, 2, 6, 6], seed);
        let w = random(&[3, 2, k, k], seed + 1);
        let b = random(&[3], seed + 2);
        let expected = conv_reference(&x, &w, &b);
        let mut tape = Tape::<f64>::new();
        let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
        let y = tape.conv2d(xv, wv, bv).unwrap();
        for (a, e) in tape.data(y).iter().zip(&expected) {
            assert!((a - e).abs() <= 1e-5, "{a} vs {e}");
        }
    }
}

#[test]
fn conv_gradients() {
    for k in [3, 1] {
        let x = random(&[1, 2, 5, 5], 30);
        let w = random(&[3, 2, k, k], 31);
        let b = random(&[3], 32);
        let r = check_inputs(&[x, w, b], 1e-4, |t, v| t.conv2d(v[0], v[1], v[2])).unwrap();
        assert!(r.max_rel_err <= 1e-4, "k={k} {r:?}");
    }
    let x = random(&[2, 2, 4, 6], 33);
    let w = random(&[2, 2, 3, 3], 34);
    let b = random(&[2], 35);
    let r = check_inputs(&[x, w, b], 1e-4, |t, v| t.conv2d(v[0], v[1], v[2])).unwrap();
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.maxpool2(x).unwrap();
    assert_eq!(tape.data(y), &[4.0]);

    let odd = tape.constant(Tensor::zeros([1, 1, 3, 4]));
    assert!(tape.maxpool2(odd).is_err());

    let c = tape.leaf(Tensor::full([1, 1, 2, 4], 7.0).with_grad());
    let y = tape.maxpool2(c).unwrap();
    assert_eq!(tape.data(y), &[7.0, 7.0]);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(c).unwrap(), &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_matches_window_max_oracle() {
    let x = random(&[1, 1, 8, 8], 40);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let y = tape.maxpool2(xv).unwrap();
    for oy in 0..4 {
        for ox in 0..4 {
            let mut m = f64::NEG_INFINITY;
            for dy in 0..2 {
                for dx in 0..2 {
                    m = m.max(x.data()[(2 * oy + dy) * 8 + 2 * ox + dx]);
                }
            }
            assert_eq!(tape.data(y)[oy * 4 + ox], m);
        }
    }
    let r = check_inputs(&[x], 1e-4, |t, v| t.maxpool2(v[0])).unwrap();
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
}

#[test]
fn upsample_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full([1, 1, 1, 1], 5.0).with_grad());
    let y = tape.upsample2(x).unwrap();
    assert_eq!(tape.data(y), &[5.0; 4]);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[4.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(random(&[2, 3, 4, 6], 41).with_grad());
    let p = tape.maxpool2(x).unwrap();
    let u = tape.upsample2(p).unwrap();
    assert_eq!(tape.shape(u), tape.shape(x));
    for (&a, &m) in tape.data(u).iter().zip(tape.data(x)) {
        let _ = m;
        assert!(a.is_finite());
    }
    let s = tape.sum(u);
    let g = tape.backward(s).unwrap();
    // Each argmax receives the 4 copies of its pooled value.
    assert_eq!(g.get(x).unwrap().iter().sum::<f64>(), 4.0 * 2.0 * 3.0 * 2.0 * 3.0);

    let r = check_inputs(&[random(&[1, 2, 3, 2], 42)], 1e-4, |t, v| t.upsample2(v[0])).unwrap();
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
}

#[test]
fn pool_then_upsample_never_exceeds_block_max() {
    let x = random(&[1, 2, 6, 8], 43);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let p = tape.maxpool2(xv).unwrap();
    let u = tape.upsample2(p).unwrap();
    let (h, w) = (6, 8);
    for c in 0..2 {
        for y in 0..h {
            for xx in 0..w {
                let (by, bx) = (y / 2 * 2, xx / 2 * 2);
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data()[(c * h + by + dy) * w + bx + dx]);
                    }
                }
                let i = (c * h + y) * w + xx;
                assert!(tape.data(u)[i] <= m);
                assert!(tape.data(u)[i] >= x.data()[i]);
            }
        }
    }
}

fn channel_stats(data: &[f64], n: usize, c: usize, hw: usize, ch: usize) -> (f64, f64) {
    let vals: Vec<f64> = (0..n)
        .flat_map(|i| data[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied())
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    (mean, var)
}

#[test]
fn batchnorm_train_normalizes_and_updates_running_stats() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 3);
    let x = random(&[2, 3, 4, 4], 50);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = bn.forward(&mut tape, &store, xv, Mode::Train).unwrap();
    for ch in 0..3 {
        let (m, v) = channel_stats(tape.data(y), 2, 3, 16, ch);
        assert!(m.abs() <= 1e-6, "{m}");
        assert!((v - 1.0).abs() < 1e-3, "{v}");
    }
    let updates = tape.take_updates();
    store.apply_updates(updates);
    for ch in 0..3 {
        let (m, v) = channel_stats(x.data(), 2, 3, 16, ch);
        let unbiased = v * 32.0 / 31.0;
        let rm = store.get(bn.running_mean).data()[ch];
        let rv = store.get(bn.running_var).data()[ch];
        assert!((rm - 0.1 * m).abs() < 1e-12);
        assert!((rv - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
    }
}

#[test]
fn batchnorm_affine_on_standardized_input() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 2);
    store.get_mut(bn.gamma).data_mut().fill(2.0);
    store.get_mut(bn.beta).data_mut().fill(3.0);
    let mut tape = Tape::new();
    let xv = tape.constant(random(&[2, 2, 3, 3], 51));
    let y = bn.forward(&mut tape, &store, xv, Mode::Train).unwrap();
    for ch in 0..2 {
        let (m, v) = channel_stats(tape.data(y), 2, 2, 9, ch);
        assert!((m - 3.0).abs() <= 1e-5);
        // eps=1e-5 shrinks the std slightly below 2.
        assert!((v.sqrt() - 2.0).abs() <= 1e-4, "{}", v.sqrt());
    }
}

#[test]
fn batchnorm_eval_uses_initial_stats() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 1);
    let x = random(&[1, 1, 2, 2], 52);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = bn.forward(&mut tape, &store, xv, Mode::Eval).unwrap();
    for (a, b) in tape.data(y).iter().zip(x.data()) {
        assert!((a - b / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }
    assert!(tape.take_updates().is_empty());
}

#[test]
fn batchnorm_gradients() {
    let x = random(&[2, 3, 4, 4], 53);
    let g = random(&[3], 54);
    let b = random(&[3], 55);
    let r = check_inputs(&[x.clone(), g.clone(), b.clone()], 1e-4, |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, None)?.0)
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
    let rm = [0.1, -0.2, 0.3];
    let rv = [1.5, 0.5, 2.0];
    let r = check_inputs(&[x, g, b], 1e-4, |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, Some((&rm, &rv)))?.0)
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new([2], vec![0.0, 0.0]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.data(y), &[0.5, 0.5]);
    let x = tape.constant(Tensor::new([2], vec![1000.0, 0.0]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    assert!((tape.data(y)[0] - 1.0).abs() < 1e-12 && tape.data(y)[1] < 1e-300);

    let base = random(&[3, 4], 60);
    let shifted = Tensor::from_fn([3, 4], |i| base.data()[i] + 123.0);
    let a = tape.constant(base);
    let b = tape.constant(shifted);
    let ya = tape.softmax(a, 1).unwrap();
    let yb = tape.softmax(b, 1).unwrap();
    for (p, q) in tape.data(ya).iter().zip(tape.data(yb)) {
        assert!((p - q).abs() <= 1e-6);
    }
    assert!(tape.softmax(a, 2).is_err());
    let r = check_inputs(&[random(&[2, 3, 4], 61)], 1e-4, |t, v| t.softmax(v[0], 1)).unwrap();
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
}

#[test]
fn linear_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
    let w = tape.constant(Tensor::new([2, 1], vec![1.0, 1.0]).unwrap());
    let b = tape.constant(Tensor::new([1], vec![0.5]).unwrap());
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.data(y), &[3.5]);

    let xi = random(&[2, 3, 4], 70);
    let eye = Tensor::from_fn([4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let xv = tape.constant(xi.clone());
    let ev = tape.constant(eye);
    let zb = tape.constant(Tensor::zeros([4]));
    let y = tape.linear(xv, ev, Some(zb)).unwrap();
    assert_eq!(tape.data(y), xi.data());
    assert!(tape.linear(xv, w, None).is_err());

    let r = check_inputs(&[random(&[2, 3, 4], 71), random(&[4, 5], 72), random(&[5], 73)], 1e-4, |t, v| {
        t.linear(v[0], v[1], Some(v[2]))
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
}

#[test]
fn conv_block_layer_wiring() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let block = ConvBlock::new(&mut store, "b", 3, 8, &mut rng);
    assert_eq!(block.in_channels(), 3);
    // two convs with bias, two BN with gamma/beta
    assert_eq!(store.parameter_count(), 3 * 8 * 9 + 8 + 8 * 8 * 9 + 8 + 4 * 8);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full([1, 3, 4, 4], 0.5));
    let y = block.forward(&mut tape, &store, x, Mode::Train).unwrap();
    assert_eq!(tape.shape(y), &[1, 8, 4, 4]);
    assert!(tape.data(y).iter().all(|&v| v >= 0.0));
}

#[test]
fn kaiming_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t: Tensor<f64> = kaiming_uniform(&[1000], 6, &mut rng);
    assert!(t.data().iter().all(|v| v.abs() < 1.0));
    assert!(t.data().iter().any(|v| v.abs() > 0.9));
}

proptest! {
    #[test]
    fn softmax_slices_sum_to_one(x in prop::collection::vec(-1e4f64..1e4, 12)) {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::new([3, 4], x).unwrap());
        let y = tape.softmax(v, 1).unwrap();
        for row in tape.data(y).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn conv_property_matches_reference(seed in any::<u64>()) {
        let x = random(&[1, 2, 6, 6], seed);
        let w = random(&[2, 2, 3, 3], seed ^ 1);
        let b = random(&[2], seed ^ 2);
        let expected = conv_reference(&x, &w, &b);
        let mut tape = Tape::<f32>::new();
        let (xv, wv, bv) = (tape.constant(x.cast()), tape.constant(w.cast()), tape.constant(b.cast()));
        let y = tape.conv2d(xv, wv, bv).unwrap();
        for (a, e) in tape.data(y).iter().zip(&expected) {
            prop_assert!((*a as f64 - e).abs() <= 1e-5);
        }
    }
}
