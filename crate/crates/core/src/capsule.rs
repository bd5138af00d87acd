//! Capsule transition layers and vector non-linearities.
//!
//! A level's capsules live in one tensor `[B, n, k, H, W]`: block `n`, vector
//! element `k`, position `(H, W)`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, ConvPlus, Ctx, Group, ParamStore};
use crate::tensor::Element;

/// Guard inside the squash norm so the zero vector maps to zero.
pub const SQUASH_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Squash,
    Tilt,
}

impl Nonlinearity {
    pub fn name(self) -> &'static str {
        match self {
            Self::Squash => "squash",
            Self::Tilt => "tilt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "squash" => Some(Self::Squash),
            "tilt" => Some(Self::Tilt),
            _ => None,
        }
    }

    /// Applies the non-linearity to the vectors along `axis`.
    pub fn apply<T: Element>(self, tape: &mut Tape<T>, x: Var, axis: usize) -> Result<Var> {
        match self {
            Self::Squash => squash(tape, x, axis),
            Self::Tilt => tilt(tape, x, axis),
        }
    }
}

/// `‖x‖² / (1 + ‖x‖²) · x / ‖x‖` for the vectors along `axis`.
pub fn squash<T: Element>(tape: &mut Tape<T>, x: Var, axis: usize) -> Result<Var> {
    let sq = tape.square(x);
    let s = tape.sum_axis(sq, axis, true)?;
    let one_plus = tape.add_scalar(s, T::one());
    let guarded = tape.add_scalar(s, T::from_f64_lossy(SQUASH_EPS));
    let norm = tape.sqrt(guarded);
    let denom = tape.mul(one_plus, norm)?;
    let factor = tape.div(s, denom)?;
    tape.mul(x, factor)
}

/// `½(1 + softmax(x)) ⊙ x` with the softmax over the vector elements.
pub fn tilt<T: Element>(tape: &mut Tape<T>, x: Var, axis: usize) -> Result<Var> {
    let sm = tape.softmax(x, axis)?;
    let shifted = tape.add_scalar(sm, T::one());
    let factor = tape.scale(shifted, T::from_f64_lossy(0.5));
    tape.mul(factor, x)
}

/// Scalar reference for a single vector.
pub fn squash_vec(x: &[f64]) -> Vec<f64> {
    let s: f64 = x.iter().map(|v| v * v).sum();
    let f = s / ((1.0 + s) * (s + SQUASH_EPS).sqrt());
    x.iter().map(|v| v * f).collect()
}

/// Scalar reference for a single vector.
pub fn tilt_vec(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    x.iter().zip(&e).map(|(v, ei)| 0.5 * (1.0 + ei / z) * v).collect()
}

/// The capsule transitions of one level: a 1×1 conv+ per block followed by a
/// batch norm shared by all blocks and the vector non-linearity.
#[derive(Debug, Clone)]
pub struct CapsTrans {
    pub convs: Vec<ConvPlus>,
    pub shared_bn: BatchNorm,
    pub nonlinearity: Nonlinearity,
    pub dim: usize,
}

impl CapsTrans {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        blocks: usize,
        in_ch: usize,
        dim: usize,
        nonlinearity: Nonlinearity,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let convs = (0..blocks)
            .map(|n| ConvPlus::new(store, &format!("{name}.block{n}"), in_ch, dim, 1, 1, Group::Classifier, rng))
            .collect::<Result<Vec<_>>>()?;
        let shared_bn = BatchNorm::new(store, &format!("{name}.shared_bn"), dim, Group::Classifier)?;
        Ok(Self { convs, shared_bn, nonlinearity, dim })
    }

    /// Block features `[B, C, H, W]` (one per block) → capsules `[B, n, k, H, W]`.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, features: &[Var]) -> Result<Var> {
        if features.len() != self.convs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} block features for {} transitions",
                features.len(),
                self.convs.len()
            )));
        }
        let mut outs = Vec::with_capacity(features.len());
        for (conv, &f) in self.convs.iter().zip(features) {
            outs.push(conv.forward(ctx, f)?);
        }
        let stacked = ctx.tape.stack1(&outs)?;
        let s = ctx.tape.shape(stacked).to_vec();
        let (b, n, k, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let flat = ctx.tape.reshape(stacked, &[b * n, k, h, w])?;
        let normed = self.shared_bn.forward(ctx, flat)?;
        let caps = self.nonlinearity.apply(ctx.tape, normed, 1)?;
        ctx.tape.reshape(caps, &[b, n, k, h, w])
    }
}
