//! 2-D convolution over NCHW tensors via im2col + GEMM.

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`, zero padding split with the
    /// smaller half in front.
    Same,
    /// No padding.
    Valid,
}

/// Output extent and leading pad for one spatial axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    match padding {
        Padding::Valid => (kernel <= input).then(|| ((input - kernel) / stride + 1, 0)),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            // the padded extent must still hold one kernel window
            (kernel <= input + total).then_some((out, total / 2))
        }
    }
}

/// Geometry of a convolution from `[batch, c, h, w]` to `[batch, o, ho, wo]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(Error::ShapeMismatch(format!("conv2d input {x:?} with weight {w:?}")));
        }
        let (ho, pad_top) = conv_out_extent(x[2], w[2], stride, padding)
            .ok_or_else(|| Error::ShapeMismatch(format!("kernel {w:?} does not fit input {x:?}")))?;
        let (wo, pad_left) = conv_out_extent(x[3], w[3], stride, padding)
            .ok_or_else(|| Error::ShapeMismatch(format!("kernel {w:?} does not fit input {x:?}")))?;
        Ok(Self {
            batch: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            pad_top,
            pad_left,
            ho,
            wo,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    fn ck(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.c, self.h, self.w]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.o, self.ho, self.wo]
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn macs(&self) -> usize {
        self.batch * self.o * self.ck() * self.positions()
    }
}

/// Output columns `oj` whose input column `oj·stride + kj − pad` lies inside `[0, w)`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad_left.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.w + g.pad_left > kj { (g.w + g.pad_left - kj).div_ceil(g.stride) } else { 0 };
    (lo.min(g.wo), hi.min(g.wo).max(lo.min(g.wo)))
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kj);
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad_top as isize;
                    let line = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..(c * g.h + ii as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let first = lo * g.stride + kj - g.pad_left;
                    if g.stride == 1 {
                        for (d, s) in line[lo..hi].iter_mut().zip(&src[first..first + hi - lo]) {
                            *d = *s;
                        }
                    } else {
                        for (d, s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad_left;
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad_top as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + ii as usize) * g.w..(c * g.h + ii as usize + 1) * g.w];
                    let line = &src[oi * g.wo + lo..oi * g.wo + hi];
                    if g.stride == 1 {
                        for (d, s) in dst[first..first + line.len()].iter_mut().zip(line) {
                            *d += *s;
                        }
                    } else {
                        for (d, s) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

// Stride-1 kernels on a zero-padded plane. With row pitch `wp` every kernel
// tap is a constant offset, so each (channel, tap) pair becomes one long
// contiguous axpy or dot product. Output columns `wo..wp` of each row are
// scratch and never read back.

struct Plane {
    hp: usize,
    wp: usize,
    /// Length of the flattened output span `(ho − 1)·wp + wo`.
    span: usize,
}

impl ConvGeom {
    fn uses_plane(&self) -> bool {
        self.stride == 1 && !self.is_pointwise()
    }

    fn plane(&self) -> Plane {
        let (hp, wp) = (self.ho + self.kh - 1, self.wo + self.kw - 1);
        Plane { hp, wp, span: (self.ho - 1) * wp + self.wo }
    }
}

fn pad_plane<T: Element>(x: &[T], g: &ConvGeom, pl: &Plane, out: &mut [T]) {
    out.fill(T::zero());
    let pp = pl.hp * pl.wp;
    for c in 0..g.c {
        for i in 0..g.h {
            let pi = i + g.pad_top;
            if pi >= pl.hp {
                continue;
            }
            let src = &x[(c * g.h + i) * g.w..(c * g.h + i + 1) * g.w];
            let len = g.w.min(pl.wp - g.pad_left);
            let dst = &mut out[c * pp + pi * pl.wp + g.pad_left..c * pp + pi * pl.wp + g.pad_left + len];
            dst.copy_from_slice(&src[..len]);
        }
    }
}

fn tap_offsets(g: &ConvGeom, pl: &Plane) -> Vec<usize> {
    (0..g.kh).flat_map(|ki| (0..g.kw).map(move |kj| ki * pl.wp + kj)).collect()
}

fn plane_forward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let pl = g.plane();
    let pp = pl.hp * pl.wp;
    let taps = tap_offsets(g, &pl);
    let (in_len, out_len) = (g.c * g.h * g.w, g.o * g.positions());
    let mut xpad = vec![T::zero(); g.c * pp];
    let mut acc = vec![T::zero(); g.o * pl.span];
    let mut out = vec![T::zero(); g.batch * out_len];
    let wd = w.data();
    for b in 0..g.batch {
        pad_plane(&x.data()[b * in_len..(b + 1) * in_len], g, &pl, &mut xpad);
        acc.fill(T::zero());
        for c in 0..g.c {
            for (t, &off) in taps.iter().enumerate() {
                let xs = &xpad[c * pp + off..c * pp + off + pl.span];
                for o in 0..g.o {
                    let wv = wd[(o * g.c + c) * taps.len() + t];
                    for (a, &xv) in acc[o * pl.span..(o + 1) * pl.span].iter_mut().zip(xs) {
                        *a += wv * xv;
                    }
                }
            }
        }
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        for o in 0..g.o {
            for oi in 0..g.ho {
                let src = &acc[o * pl.span + oi * pl.wp..o * pl.span + oi * pl.wp + g.wo];
                ob[(o * g.ho + oi) * g.wo..(o * g.ho + oi + 1) * g.wo].copy_from_slice(src);
            }
        }
    }
    Tensor::from_parts(g.output_shape().to_vec(), out)
}

/// Output gradient of one sample laid out with row pitch `wp`, scratch columns zero.
fn spread_grad<T: Element>(gy: &[T], g: &ConvGeom, pl: &Plane, out: &mut [T]) {
    out.fill(T::zero());
    for o in 0..g.o {
        for oi in 0..g.ho {
            let src = &gy[(o * g.ho + oi) * g.wo..(o * g.ho + oi + 1) * g.wo];
            out[o * pl.span + oi * pl.wp..o * pl.span + oi * pl.wp + g.wo].copy_from_slice(src);
        }
    }
}

fn plane_backward_data<T: Element>(gy: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let pl = g.plane();
    let pp = pl.hp * pl.wp;
    let taps = tap_offsets(g, &pl);
    let (in_len, out_len) = (g.c * g.h * g.w, g.o * g.positions());
    let mut gext = vec![T::zero(); g.o * pl.span];
    let mut dpad = vec![T::zero(); g.c * pp];
    let mut dx = vec![T::zero(); g.batch * in_len];
    let wd = w.data();
    for b in 0..g.batch {
        spread_grad(&gy.data()[b * out_len..(b + 1) * out_len], g, &pl, &mut gext);
        dpad.fill(T::zero());
        for c in 0..g.c {
            for (t, &off) in taps.iter().enumerate() {
                let dst = &mut dpad[c * pp + off..c * pp + off + pl.span];
                for o in 0..g.o {
                    let wv = wd[(o * g.c + c) * taps.len() + t];
                    for (d, &gv) in dst.iter_mut().zip(&gext[o * pl.span..(o + 1) * pl.span]) {
                        *d += wv * gv;
                    }
                }
            }
        }
        let db = &mut dx[b * in_len..(b + 1) * in_len];
        for c in 0..g.c {
            for i in 0..g.h {
                let pi = i + g.pad_top;
                if pi >= pl.hp {
                    continue;
                }
                let len = g.w.min(pl.wp - g.pad_left);
                let src = &dpad[c * pp + pi * pl.wp + g.pad_left..c * pp + pi * pl.wp + g.pad_left + len];
                db[(c * g.h + i) * g.w..(c * g.h + i) * g.w + len].copy_from_slice(src);
            }
        }
    }
    Tensor::from_parts(g.input_shape().to_vec(), dx)
}

fn plane_backward_weight<T: Element>(x: &Tensor<T>, gy: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let pl = g.plane();
    let pp = pl.hp * pl.wp;
    let taps = tap_offsets(g, &pl);
    let (in_len, out_len) = (g.c * g.h * g.w, g.o * g.positions());
    let mut xpad = vec![T::zero(); g.c * pp];
    let mut gext = vec![T::zero(); g.o * pl.span];
    let mut dw = vec![T::zero(); g.o * g.c * taps.len()];
    for b in 0..g.batch {
        pad_plane(&x.data()[b * in_len..(b + 1) * in_len], g, &pl, &mut xpad);
        spread_grad(&gy.data()[b * out_len..(b + 1) * out_len], g, &pl, &mut gext);
        for c in 0..g.c {
            for (t, &off) in taps.iter().enumerate() {
                let xs = &xpad[c * pp + off..c * pp + off + pl.span];
                for o in 0..g.o {
                    let gs = &gext[o * pl.span..(o + 1) * pl.span];
                    dw[(o * g.c + c) * taps.len() + t] += dot(gs, xs);
                }
            }
        }
    }
    Tensor::from_parts(vec![g.o, g.c, g.kh, g.kw], dw)
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = acc.iter().copied().sum::<T>();
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

pub(crate) fn conv2d_forward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    if g.uses_plane() {
        return plane_forward(x, w, g);
    }
    let (ck, p) = (g.ck(), g.positions());
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * p;
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ck * p] };
    for b in 0..g.batch {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        T::gemm(
            g.o,
            ck,
            p,
            T::one(),
            w.data(),
            ck as isize,
            1,
            cols,
            p as isize,
            1,
            T::zero(),
            &mut out[b * out_len..(b + 1) * out_len],
            p as isize,
        );
    }
    Tensor::from_parts(g.output_shape().to_vec(), out)
}

pub(crate) fn conv2d_backward_data<T: Element>(gy: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    if g.uses_plane() {
        return plane_backward_data(gy, w, g);
    }
    let (ck, p) = (g.ck(), g.positions());
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * p;
    let mut dx = vec![T::zero(); g.batch * in_len];
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { ck * p }];
    for b in 0..g.batch {
        let gyb = &gy.data()[b * out_len..(b + 1) * out_len];
        let dxb = &mut dx[b * in_len..(b + 1) * in_len];
        if g.is_pointwise() {
            T::gemm(ck, g.o, p, T::one(), w.data(), 1, ck as isize, gyb, p as isize, 1, T::zero(), dxb, p as isize);
        } else {
            T::gemm(
                ck,
                g.o,
                p,
                T::one(),
                w.data(),
                1,
                ck as isize,
                gyb,
                p as isize,
                1,
                T::zero(),
                &mut col,
                p as isize,
            );
            col2im(&col, g, dxb);
        }
    }
    Tensor::from_parts(g.input_shape().to_vec(), dx)
}

pub(crate) fn conv2d_backward_weight<T: Element>(x: &Tensor<T>, gy: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    if g.uses_plane() {
        return plane_backward_weight(x, gy, g);
    }
    let (ck, p) = (g.ck(), g.positions());
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * p;
    let mut dw = vec![T::zero(); g.o * ck];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ck * p] };
    for b in 0..g.batch {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        let gyb = &gy.data()[b * out_len..(b + 1) * out_len];
        T::gemm(g.o, p, ck, T::one(), gyb, p as isize, 1, cols, 1, p as isize, T::one(), &mut dw, ck as isize);
    }
    Tensor::from_parts(vec![g.o, g.c, g.kh, g.kw], dw)
}

impl<T: Element> Tape<T> {
    /// `x[B, C, H, W] ⋆ w[O, C, kh, kw]` without bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        let y = conv2d_forward(self.value(x), self.value(w), &geom);
        Ok(self.push(y, Op::Conv2d { x, w, geom }))
    }

    /// Adjoint of a same-padded `conv2d` with the same weight layout:
    /// `x[B, O, h, w]`, `w[O, C, kh, kw]` → `[B, C, stride·h, stride·w]`.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || stride == 0 {
            return Err(Error::ShapeMismatch(format!("conv2d_transpose input {xs:?} with weight {ws:?}")));
        }
        let full = [xs[0], ws[1], xs[2] * stride, xs[3] * stride];
        let geom = ConvGeom::new(&full, &ws, stride, Padding::Same)?;
        debug_assert_eq!((geom.ho, geom.wo), (xs[2], xs[3]));
        let y = conv2d_backward_data(self.value(x), self.value(w), &geom);
        Ok(self.push(y, Op::ConvTranspose2d { x, w, geom }))
    }
}
