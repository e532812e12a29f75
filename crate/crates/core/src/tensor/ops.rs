//! Forward rules (as `Tape` methods) and the matching reverse rules.

use super::tape::{accumulate, Node, Op};
use super::{dense, shape_str, Scalar, Tape, Var};
use crate::error::{Error, Result};

/// Batch `(mean, unbiased variance)` per channel.
pub type BatchStats<T> = (Vec<T>, Vec<T>);

/// Elementwise operation selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise<T> {
    Add,
    Sub,
    Mul,
    ScalarMul(T),
    Relu,
    Sigmoid,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let lo = (-dx).max(0) as usize;
                let hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let drow = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || lo >= hi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    let s0 = (lo as isize + dx) as usize;
                    drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let lo = (-dx).max(0) as usize;
                let hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if lo >= hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (lo as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (hi - lo)];
                    for (d, &g) in dst.iter_mut().zip(&src[y * w + lo..y * w + hi]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: shapes {} and {} differ",
                shape_str(self.shape(a)),
                shape_str(self.shape(b))
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Vec<T> {
        self.data(a).iter().map(|&x| f(x)).collect()
    }

    /// Dispatches one of the elementwise ops; `b` is required for the binary ones.
    pub fn elementwise(&mut self, op: Elementwise<T>, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::invalid(format!("{op:?} needs two operands")));
        match op {
            Elementwise::Add => self.add(a, need_b()?),
            Elementwise::Sub => self.sub(a, need_b()?),
            Elementwise::Mul => self.mul(a, need_b()?),
            Elementwise::ScalarMul(s) => Ok(self.scale(a, s)),
            Elementwise::Relu => Ok(self.relu(a)),
            Elementwise::Sigmoid => Ok(self.sigmoid(a)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let data = self.map(a, |x| x * s);
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.map(a, |x| x.max(T::zero()));
        self.push(self.shape(a).to_vec(), data, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.map(a, sigmoid);
        self.push(self.shape(a).to_vec(), data, Op::Sigmoid(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.data(a).iter().copied().sum();
        self.push(vec![], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.data(a).len() as f64);
        let s: T = self.data(a).iter().copied().sum();
        self.push(vec![], vec![s / n], Op::Mean(a), &[a])
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// `[m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul: cannot multiply {} by {}",
                shape_str(sa),
                shape_str(sb)
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.data(a), dense(k, false), self.data(b), dense(n, false), T::zero(), &mut out, dense(n, false));
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched product over identical leading axes: `[..,m,k]·[..,k,n]`, or
    /// `[..,m,k]·[..,n,k]ᵀ` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || {
            Error::shape(format!(
                "bmm: cannot multiply {} by {}{}",
                shape_str(&sa),
                shape_str(&sb),
                if trans_b { "ᵀ" } else { "" }
            ))
        };
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (bk, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if bk != k {
            return Err(err());
        }
        let batch: usize = sa[..r - 2].iter().product();
        let b_str = if trans_b { dense(k, true) } else { dense(n, false) };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &ad[i * m * k..(i + 1) * m * k],
                    dense(k, false),
                    &bd[i * k * n..(i + 1) * k * n],
                    b_str,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    dense(n, false),
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push(shape, out, Op::Bmm { a, b, batch, m, k, n, trans_b }, &[a, b]))
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of an empty list"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat on axis {axis}: {} is incompatible with {}",
                    shape_str(s),
                    shape_str(&base)
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat { axis, parts: parts.to_vec() }, parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.data(x).len() {
            return Err(Error::shape(format!(
                "cannot reshape {} into {}",
                shape_str(self.shape(x)),
                shape_str(shape)
            )));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        let valid = axes.len() == rank
            && axes.iter().all(|&a| a < rank && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(Error::shape(format!(
                "{axes:?} is not a permutation of the axes of {}",
                shape_str(self.shape(x))
            )));
        }
        let (shape, data) = permute_data(self.data(x), self.shape(x), axes);
        Ok(self.push(shape, data, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// Same-size cross-correlation: stride 1, zero padding `k/2` for an odd
    /// square kernel `w: [out, in, k, k]`, bias `b: [out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(Error::shape(format!(
                "conv2d: input {} with kernel {}",
                shape_str(sx),
                shape_str(sw)
            )));
        }
        if sx[1] != sw[1] {
            return Err(Error::shape(format!(
                "conv2d: input has {} channels but the kernel expects {}",
                sx[1], sw[1]
            )));
        }
        if sb != [sw[0]] {
            return Err(Error::shape(format!(
                "conv2d: bias {} for {} output channels",
                shape_str(sb),
                sw[0]
            )));
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        let (hw, ckk) = (h * wd, cin * k * k);
        let mut out = vec![T::zero(); n * cout * hw];
        let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
        let (xd, wdata, bd) = (self.data(x), self.data(w), self.data(b));
        for i in 0..n {
            let xi = &xd[i * cin * hw..(i + 1) * cin * hw];
            let src: &[T] = if k == 1 {
                xi
            } else {
                im2col(xi, cin, h, wd, k, &mut cols);
                &cols
            };
            let oi = &mut out[i * cout * hw..(i + 1) * cout * hw];
            for (co, row) in oi.chunks_mut(hw).enumerate() {
                row.fill(bd[co]);
            }
            T::gemm(cout, ckk, hw, T::one(), wdata, dense(ckk, false), src, dense(hw, false), T::one(), oi, dense(hw, false));
        }
        Ok(self.push(vec![n, cout, h, wd], out, Op::Conv2d { x, w, b }, &[x, w, b]))
    }

    /// 2x2 max pooling with stride 2; ties go to the first element in
    /// row-major window order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::shape(format!(
                "maxpool2 needs [N,C,H,W] with even H and W, got {}",
                shape_str(&s)
            )));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(vec![s[0], s[1], oh, ow], out, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("upsample2 needs [N,C,H,W], got {}", shape_str(&s))));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(planes * h * w * 4);
        for p in 0..planes {
            for y in 0..h {
                let row = &xd[p * h * w + y * w..p * h * w + (y + 1) * w];
                let start = out.len();
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
                out.extend_from_within(start..);
            }
        }
        Ok(self.push(vec![s[0], s[1], 2 * h, 2 * w], out, Op::Upsample2(x), &[x]))
    }

    /// Per-channel normalization of `[N,C,H,W]`.
    ///
    /// With `running = None` the batch statistics are used and returned as
    /// `(mean, unbiased variance)`; otherwise the given running statistics
    /// are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("batch_norm needs [N,C,H,W], got {}", shape_str(&s))));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batch_norm: affine parameters {} / {} for {c} channels",
                shape_str(self.shape(gamma)),
                shape_str(self.shape(beta))
            )));
        }
        if let Some((m, v)) = running {
            if m.len() != c || v.len() != c {
                return Err(Error::shape("batch_norm: running statistics length mismatch"));
            }
        }
        let count = n * hw;
        let xd = self.data(x);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut stats = None;
        match running {
            Some((m, v)) => {
                mean.copy_from_slice(m);
                var.copy_from_slice(v);
            }
            None => {
                let cnt = T::of(count as f64);
                for ch in 0..c {
                    let mut acc = T::zero();
                    for i in 0..n {
                        acc += xd[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    mean[ch] = acc / cnt;
                    let mut sq = T::zero();
                    for i in 0..n {
                        for &v in &xd[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                            let d = v - mean[ch];
                            sq += d * d;
                        }
                    }
                    var[ch] = sq / cnt;
                }
                let unbias = if count > 1 {
                    T::of(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                stats = Some((mean.clone(), var.iter().map(|&v| v * unbias).collect()));
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for j in r {
                    let xh = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = g[ch] * xh + bt[ch];
                }
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: running.is_none(),
        };
        Ok((self.push(s, out, op, &[x, gamma, beta]), stats))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for {}", shape_str(&s))));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(xd[at(j)]);
                }
                let mut z = T::zero();
                for j in 0..len {
                    let e = (xd[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        Ok(self.push(s, out, Op::Softmax { x, axis }, &[x]))
    }

    /// `x·W + b` over the trailing axis: `x: [.., d_in]`, `w: [d_in, d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(Error::shape(format!(
                "linear: input {} with weight {}",
                shape_str(&sx),
                shape_str(&sw)
            )));
        }
        let (din, dout) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape(format!(
                    "linear: bias {} for {dout} outputs",
                    shape_str(self.shape(b))
                )));
            }
        }
        let rows = self.data(x).len() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(self.data(b));
            }
        }
        T::gemm(rows, din, dout, T::one(), self.data(x), dense(din, false), self.data(w), dense(dout, false), T::one(), &mut out, dense(dout, false));
        let mut shape = sx;
        *shape.last_mut().unwrap() = dout;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(shape, out, Op::Linear { x, w, b }, &inputs))
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub(crate) fn backward_node<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let data = |v: Var| nodes[v.0].data.as_slice();
    let shape = |v: Var| nodes[v.0].shape.as_slice();
    let tracked = |v: Var| nodes[v.0].tracked;
    macro_rules! acc {
        ($v:expr, $c:expr) => {
            if tracked($v) {
                let c = $c;
                accumulate(grads, nodes, $v, c);
            }
        };
    }
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc!(*a, g.to_vec());
            acc!(*b, g.to_vec());
        }
        Op::Sub(a, b) => {
            acc!(*a, g.to_vec());
            acc!(*b, g.iter().map(|&x| -x).collect());
        }
        Op::Mul(a, b) => {
            acc!(*a, g.iter().zip(data(*b)).map(|(&x, &y)| x * y).collect());
            acc!(*b, g.iter().zip(data(*a)).map(|(&x, &y)| x * y).collect());
        }
        Op::Scale(a, s) => acc!(*a, g.iter().map(|&x| x * *s).collect()),
        Op::Relu(a) => acc!(
            *a,
            g.iter()
                .zip(&node.data)
                .map(|(&x, &y)| if y > T::zero() { x } else { T::zero() })
                .collect()
        ),
        Op::Sigmoid(a) => acc!(
            *a,
            g.iter()
                .zip(&node.data)
                .map(|(&x, &y)| x * y * (T::one() - y))
                .collect()
        ),
        Op::Sum(a) => acc!(*a, vec![g[0]; data(*a).len()]),
        Op::Mean(a) => {
            let n = data(*a).len();
            acc!(*a, vec![g[0] / T::of(n as f64); n]);
        }
        Op::MatMul { a, b } => {
            let (m, k, n) = (shape(*a)[0], shape(*a)[1], shape(*b)[1]);
            acc!(*a, {
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, T::one(), g, dense(n, false), data(*b), dense(n, true), T::zero(), &mut da, dense(k, false));
                da
            });
            acc!(*b, {
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, T::one(), data(*a), dense(k, true), g, dense(n, false), T::zero(), &mut db, dense(n, false));
                db
            });
        }
        &Op::Bmm { a, b, batch, m, k, n, trans_b } => {
            acc!(a, {
                let mut da = vec![T::zero(); batch * m * k];
                let bs = if trans_b { dense(k, false) } else { dense(n, true) };
                for t in 0..batch {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g[t * m * n..(t + 1) * m * n],
                        dense(n, false),
                        &data(b)[t * k * n..(t + 1) * k * n],
                        bs,
                        T::zero(),
                        &mut da[t * m * k..(t + 1) * m * k],
                        dense(k, false),
                    );
                }
                da
            });
            acc!(b, {
                let mut db = vec![T::zero(); batch * k * n];
                for t in 0..batch {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let at = &data(a)[t * m * k..(t + 1) * m * k];
                    let out = &mut db[t * k * n..(t + 1) * k * n];
                    if trans_b {
                        T::gemm(n, m, k, T::one(), gt, dense(n, true), at, dense(k, false), T::zero(), out, dense(k, false));
                    } else {
                        T::gemm(k, m, n, T::one(), at, dense(k, true), gt, dense(n, false), T::zero(), out, dense(n, false));
                    }
                }
                db
            });
        }
        Op::Concat { axis, parts } => {
            let (outer, _, inner) = split_axis(&node.shape, *axis);
            let total = node.shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let len = shape(p)[*axis] * inner;
                acc!(p, {
                    let mut dp = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        dp.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                    }
                    dp
                });
                offset += len;
            }
        }
        Op::Reshape(x) => acc!(*x, g.to_vec()),
        Op::Permute { x, axes } => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            acc!(*x, permute_data(g, &node.shape, &inv).1);
        }
        &Op::Conv2d { x, w, b } => {
            let (sx, sw) = (shape(x), shape(w));
            let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
            let (cout, k) = (sw[0], sw[2]);
            let (hw, ckk) = (h * wd, cin * k * k);
            acc!(b, {
                let mut db = vec![T::zero(); cout];
                for gi in g.chunks(cout * hw) {
                    for (co, row) in gi.chunks(hw).enumerate() {
                        db[co] += row.iter().copied().sum::<T>();
                    }
                }
                db
            });
            let want_w = tracked(w);
            let want_x = tracked(x);
            let mut dw = if want_w { vec![T::zero(); cout * ckk] } else { Vec::new() };
            let mut dx = if want_x { vec![T::zero(); n * cin * hw] } else { Vec::new() };
            let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
            let mut dcols = if want_x && k != 1 { vec![T::zero(); ckk * hw] } else { Vec::new() };
            let (xd, wdata) = (data(x), data(w));
            for i in 0..n {
                let gi = &g[i * cout * hw..(i + 1) * cout * hw];
                if want_w {
                    let xi = &xd[i * cin * hw..(i + 1) * cin * hw];
                    let src: &[T] = if k == 1 {
                        xi
                    } else {
                        im2col(xi, cin, h, wd, k, &mut cols);
                        &cols
                    };
                    T::gemm(cout, hw, ckk, T::one(), gi, dense(hw, false), src, dense(hw, true), T::one(), &mut dw, dense(ckk, false));
                }
                if want_x {
                    let dxi = &mut dx[i * cin * hw..(i + 1) * cin * hw];
                    if k == 1 {
                        T::gemm(ckk, cout, hw, T::one(), wdata, dense(ckk, true), gi, dense(hw, false), T::zero(), dxi, dense(hw, false));
                    } else {
                        T::gemm(ckk, cout, hw, T::one(), wdata, dense(ckk, true), gi, dense(hw, false), T::zero(), &mut dcols, dense(hw, false));
                        col2im_add(&dcols, cin, h, wd, k, dxi);
                    }
                }
            }
            if want_w {
                accumulate(grads, nodes, w, dw);
            }
            if want_x {
                accumulate(grads, nodes, x, dx);
            }
        }
        Op::MaxPool2 { x, argmax } => acc!(*x, {
            let mut dx = vec![T::zero(); data(*x).len()];
            for (&idx, &gv) in argmax.iter().zip(g) {
                dx[idx] += gv;
            }
            dx
        }),
        Op::Upsample2(x) => acc!(*x, {
            let s = shape(*x);
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            let ow = 2 * w;
            let mut dx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                for y in 0..h {
                    for xx in 0..w {
                        let top = 2 * y * ow + 2 * xx;
                        dx[p * h * w + y * w + xx] = gp[top] + gp[top + 1] + gp[top + ow] + gp[top + ow + 1];
                    }
                }
            }
            dx
        }),
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
            let s = &node.shape;
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for i in 0..n {
                for ch in 0..c {
                    for j in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                        dgamma[ch] += g[j] * xhat[j];
                        dbeta[ch] += g[j];
                    }
                }
            }
            acc!(*x, {
                let gm = data(*gamma);
                let cnt = T::of((n * hw) as f64);
                let mut dx = vec![T::zero(); g.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let scale = gm[ch] * inv_std[ch];
                        for j in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                            dx[j] = if *batch_stats {
                                scale * (g[j] - dbeta[ch] / cnt - xhat[j] * dgamma[ch] / cnt)
                            } else {
                                scale * g[j]
                            };
                        }
                    }
                }
                dx
            });
            acc!(*gamma, dgamma);
            acc!(*beta, dbeta);
        }
        Op::Softmax { x, axis } => acc!(*x, {
            let (outer, len, inner) = split_axis(&node.shape, *axis);
            let y = &node.data;
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            dx
        }),
        &Op::Linear { x, w, b } => {
            let (din, dout) = (shape(w)[0], shape(w)[1]);
            let rows = g.len() / dout;
            acc!(x, {
                let mut dx = vec![T::zero(); rows * din];
                T::gemm(rows, dout, din, T::one(), g, dense(dout, false), data(w), dense(dout, true), T::zero(), &mut dx, dense(din, false));
                dx
            });
            acc!(w, {
                let mut dw = vec![T::zero(); din * dout];
                T::gemm(din, rows, dout, T::one(), data(x), dense(din, true), g, dense(dout, false), T::zero(), &mut dw, dense(dout, false));
                dw
            });
            if let Some(b) = b {
                acc!(b, {
                    let mut db = vec![T::zero(); dout];
                    for row in g.chunks(dout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    db
                });
            }
        }
    }
}
