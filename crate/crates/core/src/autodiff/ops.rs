use rand::Rng;

use super::kernels::{self, broadcast_map};
use super::{relu_fault_enabled, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{contiguous_strides, for_each_broadcast, Element, Tensor};

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_map(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_map(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Element-wise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_map(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_map(self.value(a), self.value(b), |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|e| e * s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|e| e + s);
        self.push(v, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| if e > T::zero() { e } else { T::zero() });
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| T::one() / (T::one() + (-e).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.exp());
        self.push(v, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.ln());
        self.push(v, Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.sqrt());
        self.push(v, Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * e);
        self.push(v, Op::Square(x))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = softmax_forward(self.value(x), axis)?;
        Ok(self.push(v, Op::Softmax { x, axis }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split3(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut kept = shape.clone();
        kept[axis] = 1;
        let s = self.push(Tensor::from_parts(kept, out), Op::SumAxis(x));
        if keepdim {
            Ok(s)
        } else {
            let mut squeezed = shape;
            squeezed.remove(axis);
            if squeezed.is_empty() {
                squeezed.push(1);
            }
            self.reshape(s, &squeezed)
        }
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::ShapeMismatch(format!("bad permutation {perm:?} for rank {rank}")));
        }
        let v = permute(self.value(x), perm);
        Ok(self.push(v, Op::Permute { x, perm: perm.to_vec() }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::ShapeMismatch(format!("concat axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch(format!("concat {first:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split3(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Stacks equally shaped tensors along a new axis 1: `[B, ...]` → `[B, n, ...]`.
    pub fn stack1(&mut self, xs: &[Var]) -> Result<Var> {
        let mut parts = Vec::with_capacity(xs.len());
        for &x in xs {
            let mut s = self.shape(x).to_vec();
            s.insert(1, 1);
            parts.push(self.reshape(x, &s)?);
        }
        self.concat(&parts, 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("matmul {sa:?} · {sb:?}")));
        }
        let v = kernels::matmul(self.value(a), self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Multiplies by a constant factor that broadcasts into `x`.
    pub fn mul_const(&mut self, x: Var, factor: Tensor<T>) -> Result<Var> {
        let v = broadcast_map(self.value(x), &factor, |a, b| a * b)?;
        if v.shape() != self.shape(x) {
            return Err(Error::ShapeMismatch("constant factor must broadcast into input".into()));
        }
        Ok(self.push(v, Op::MulConst { x, factor }))
    }

    /// Inverted dropout; the identity when `train` is false or `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, rng: &mut impl Rng) -> Result<Var> {
        if !train || rate <= 0.0 {
            return Ok(x);
        }
        assert!(rate < 1.0, "dropout rate must be below 1");
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> =
            (0..self.value(x).len()).map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep }).collect();
        let factor = Tensor::from_parts(self.shape(x).to_vec(), mask);
        self.mul_const(x, factor)
    }

    /// `w / σ` where `σ = uᵀ W v` with `W` the `[O, rest]` view of `w`.
    /// `u` and `v` are treated as constants.
    pub fn spectral_weight(&mut self, w: Var, u: &[T], v: &[T]) -> Result<Var> {
        let wt = self.value(w);
        let o = wt.shape()[0];
        let d = wt.len() / o;
        if u.len() != o || v.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "spectral vectors {}/{} for weight {:?}",
                u.len(),
                v.len(),
                wt.shape()
            )));
        }
        let sigma = bilinear(wt.data(), u, v);
        let out = wt.map(|e| e / sigma);
        Ok(self.push(out, Op::SpectralWeight { w, u: u.to_vec(), v: v.to_vec(), sigma }))
    }

    /// Mean softmax cross-entropy of `logits[B, R]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(Error::ShapeMismatch(format!("cross-entropy logits {s:?} with {} labels", labels.len())));
        }
        let probs = softmax_forward(self.value(logits), 1)?;
        let r = s[1];
        let b = T::from_usize(labels.len()).unwrap();
        let tiny = T::min_positive_value();
        let loss = labels.iter().enumerate().map(|(i, &l)| -probs.data()[i * r + l].max(tiny).ln()).sum::<T>() / b;
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!("mse {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s: T = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b)))
    }

    /// `x[B, M, K]` → `[B, K]` picking row `rows[b]` of every sample.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != rows.len() || rows.iter().any(|&r| r >= s[1]) {
            return Err(Error::ShapeMismatch(format!("gather {} rows from {s:?}", rows.len())));
        }
        let (m, k) = (s[1], s[2]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * k);
        for (b, &r) in rows.iter().enumerate() {
            out.extend_from_slice(&src[(b * m + r) * k..(b * m + r + 1) * k]);
        }
        Ok(self.push(Tensor::from_parts(vec![s[0], k], out), Op::GatherRows { x, rows: rows.to_vec() }))
    }
}

pub(crate) fn bilinear<T: Element>(w: &[T], u: &[T], v: &[T]) -> T {
    let d = v.len();
    u.iter().enumerate().map(|(i, &ui)| ui * w[i * d..(i + 1) * d].iter().zip(v).map(|(&a, &b)| a * b).sum::<T>()).sum()
}

pub(crate) fn softmax_forward<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::ShapeMismatch(format!("softmax axis {axis} for {:?}", x.shape())));
    }
    let (outer, len, inner) = split3(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mut m = T::neg_infinity();
            for l in 0..len {
                m = m.max(src[at(l)]);
            }
            let mut z = T::zero();
            for l in 0..len {
                let e = (src[at(l)] - m).exp();
                out[at(l)] = e;
                z += e;
            }
            for l in 0..len {
                out[at(l)] /= z;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_backward<T: Element>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split3(y.shape(), axis);
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let dot: T = (0..len).map(|l| yd[at(l)] * gd[at(l)]).sum();
            for l in 0..len {
                out[at(l)] = yd[at(l)] * (gd[at(l)] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

pub(crate) fn relu_backward<T: Element>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    if relu_fault_enabled() {
        return g.clone();
    }
    kernels::zip_map(g, x, |g, x| if x > T::zero() { g } else { T::zero() })
}

pub(crate) fn permute<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let own = contiguous_strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for_each_broadcast(&out_shape, &strides, &strides, |o, i, _| out[o] = src[i]);
    Tensor::from_parts(out_shape, out)
}

pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn split_concat_grad<T: Element>(g: &Tensor<T>, shapes: &[&[usize]], axis: usize) -> Vec<Tensor<T>> {
    let (outer, total, inner) = split3(g.shape(), axis);
    let gd = g.data();
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let chunk = s[axis] * inner;
            let mut part = Vec::with_capacity(outer * chunk);
            for o in 0..outer {
                let base = o * total * inner + offset;
                part.extend_from_slice(&gd[base..base + chunk]);
            }
            offset += chunk;
            Tensor::from_parts(s.to_vec(), part)
        })
        .collect()
}

pub(crate) fn spectral_weight_backward<T: Element>(
    w: &Tensor<T>,
    g: &Tensor<T>,
    u: &[T],
    v: &[T],
    sigma: T,
) -> Tensor<T> {
    let d = v.len();
    let gw: T = g.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
    let c = gw / (sigma * sigma);
    let out = g.data().iter().enumerate().map(|(idx, &gi)| gi / sigma - c * u[idx / d] * v[idx % d]).collect();
    Tensor::from_parts(w.shape().to_vec(), out)
}

pub(crate) fn softmax_xent_backward<T: Element>(probs: &Tensor<T>, labels: &[usize], g: T) -> Tensor<T> {
    let r = probs.shape()[1];
    let scale = g / T::from_usize(labels.len()).unwrap();
    let mut out: Vec<T> = probs.data().iter().map(|&p| p * scale).collect();
    for (i, &l) in labels.iter().enumerate() {
        out[i * r + l] -= scale;
    }
    Tensor::from_parts(probs.shape().to_vec(), out)
}

pub(crate) fn gather_rows_backward<T: Element>(x: &Tensor<T>, g: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let (m, k) = (x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    for (b, &r) in rows.iter().enumerate() {
        for j in 0..k {
            od[(b * m + r) * k + j] += g.data()[b * k + j];
        }
    }
    out
}

/// Row-wise softmax of a `[B, R]` tensor, in 64-bit.
pub fn softmax_rows<T: Element>(x: &Tensor<T>) -> Vec<f64> {
    let r = x.shape()[x.rank() - 1];
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(r) {
        let m = row.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v.to_f64_lossy() - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    out
}
