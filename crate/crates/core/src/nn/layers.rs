use rand::Rng;

use super::{he_normal, normal, BnUpdate, BufferId, Ctx, Group, ParamId, ParamStore};
use crate::autodiff::{Padding, Var};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running value when folding in batch statistics.
pub const BN_MOMENTUM: f64 = 0.9;

/// Batch normalization over axis 1 with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: BufferId,
    pub var: BufferId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize, group: Group) -> Result<Self> {
        Ok(Self {
            gamma: store.add_param(&format!("{name}.gamma"), Tensor::ones(&[channels]), group, false)?,
            beta: store.add_param(&format!("{name}.beta"), Tensor::zeros(&[channels]), group, false)?,
            mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            var: store.add_buffer(&format!("{name}.running_var"), Tensor::ones(&[channels]))?,
            channels,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let eps = T::from_f64_lossy(BN_EPS);
        if ctx.train {
            let (y, stats) = ctx.tape.batch_norm_train(x, gamma, beta, eps)?;
            ctx.record_bn(BnUpdate { mean: self.mean, var: self.var, stats });
            Ok(y)
        } else {
            let mean = ctx.store.buffer(self.mean).data().to_vec();
            let var = ctx.store.buffer(self.var).data().to_vec();
            ctx.tape.batch_norm_eval(x, gamma, beta, &mean, &var, eps)
        }
    }
}

fn add_bias<T: Element>(ctx: &mut Ctx<'_, T>, y: Var, bias: Option<ParamId>) -> Result<Var> {
    match bias {
        None => Ok(y),
        Some(b) => {
            let bv = ctx.param(b);
            let o = ctx.tape.shape(bv)[0];
            let b4 = ctx.tape.reshape(bv, &[1, o, 1, 1])?;
            ctx.tape.add(y, b4)
        }
    }
}

/// Plain convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
        group: Group,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let decay = group != Group::Critic;
        let w = he_normal(&[out_ch, in_ch, kernel, kernel], fan_in, rng);
        Ok(Self {
            weight: store.add_param(&format!("{name}.weight"), w, group, decay)?,
            bias: if bias {
                Some(store.add_param(&format!("{name}.bias"), Tensor::zeros(&[out_ch]), group, false)?)
            } else {
                None
            },
            stride,
            padding,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let y = ctx.tape.conv2d(x, w, self.stride, self.padding)?;
        add_bias(ctx, y, self.bias)
    }
}

/// bn → relu → conv.
#[derive(Debug, Clone)]
pub struct ConvPlus {
    pub bn: BatchNorm,
    pub conv: Conv,
}

impl ConvPlus {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        group: Group,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            bn: BatchNorm::new(store, &format!("{name}.bn"), in_ch, group)?,
            conv: Conv::new(
                store,
                &format!("{name}.conv"),
                in_ch,
                out_ch,
                kernel,
                stride,
                Padding::Same,
                false,
                group,
                rng,
            )?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.bn.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        self.conv.forward(ctx, h)
    }
}

/// One dense layer: the (possibly downsampled) input concatenated with `g`
/// new feature maps from a 3×3 conv+.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    /// Linear conv with kernel equal to the stride; present iff stride > 1.
    pub shortcut: Option<Conv>,
    pub path: ConvPlus,
    pub in_channels: usize,
    pub growth: usize,
}

impl DenseLayer {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        growth: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let g = Group::Classifier;
        let shortcut = if stride > 1 {
            Some(Conv::new(
                store,
                &format!("{name}.shortcut"),
                in_ch,
                in_ch,
                stride,
                stride,
                Padding::Same,
                false,
                g,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            shortcut,
            path: ConvPlus::new(store, &format!("{name}.path"), in_ch, growth, 3, stride, g, rng)?,
            in_channels: in_ch,
            growth,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.growth
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(ctx, x)?,
            None => x,
        };
        let new = self.path.forward(ctx, x)?;
        ctx.tape.concat(&[skip, new], 1)
    }
}

/// A stack of dense layers; only the first may stride.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub layers: Vec<DenseLayer>,
}

impl DenseBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        growth: usize,
        n_layers: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(crate::Error::InvalidSpec("a dense block needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(n_layers);
        let mut c = in_ch;
        for l in 0..n_layers {
            let s = if l == 0 { stride } else { 1 };
            let layer = DenseLayer::new(store, &format!("{name}.layer{l}"), c, growth, s, rng)?;
            c = layer.out_channels();
            layers.push(layer);
        }
        Ok(Self { layers })
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(DenseLayer::out_channels).unwrap_or(0)
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(ctx, x)?;
        }
        Ok(x)
    }
}

/// Convolution whose weight is divided by a power-iteration estimate of its
/// largest singular value, taken on the `[O, C·kh·kw]` view.
#[derive(Debug, Clone)]
pub struct SpectralConv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub u: BufferId,
    pub v: BufferId,
    pub stride: usize,
    pub padding: Padding,
}

impl SpectralConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = in_ch * kernel * kernel;
        let w = he_normal(&[out_ch, in_ch, kernel, kernel], d, rng);
        let u = unit(normal(&[out_ch], 1.0, rng));
        let v = unit(matvec_t(&w, u.data()));
        let g = Group::Critic;
        let layer = Self {
            weight: store.add_param(&format!("{name}.weight"), w, g, false)?,
            bias: if bias {
                Some(store.add_param(&format!("{name}.bias"), Tensor::zeros(&[out_ch]), g, false)?)
            } else {
                None
            },
            u: store.add_buffer(&format!("{name}.sn_u"), u)?,
            v: store.add_buffer(&format!("{name}.sn_v"), v)?,
            stride,
            padding: Padding::Same,
        };
        Ok(layer)
    }

    /// Refines the persisted singular vectors in place.
    pub fn power_iterate<T: Element>(&self, store: &mut ParamStore<T>, iters: usize) {
        let w = store.value(self.weight).clone();
        let mut u = store.buffer(self.u).clone();
        let mut v = store.buffer(self.v).clone();
        for _ in 0..iters {
            v = unit(matvec_t(&w, u.data()));
            u = unit(matvec(&w, v.data()));
        }
        *store.buffer_mut(self.u) = u;
        *store.buffer_mut(self.v) = v;
    }

    /// Current estimate `σ = uᵀ W v`.
    pub fn sigma<T: Element>(&self, store: &ParamStore<T>) -> T {
        let wv = matvec(store.value(self.weight), store.buffer(self.v).data());
        wv.data().iter().zip(store.buffer(self.u).data()).map(|(&a, &b)| a * b).sum()
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let u = ctx.store.buffer(self.u).data().to_vec();
        let v = ctx.store.buffer(self.v).data().to_vec();
        let w_eff = ctx.tape.spectral_weight(w, &u, &v)?;
        let y = ctx.tape.conv2d(x, w_eff, self.stride, self.padding)?;
        add_bias(ctx, y, self.bias)
    }
}

/// `W v` for `W` viewed as `[O, rest]`.
fn matvec<T: Element>(w: &Tensor<T>, v: &[T]) -> Tensor<T> {
    let o = w.shape()[0];
    let d = w.len() / o;
    let out = w.data().chunks(d).map(|row| row.iter().zip(v).map(|(&a, &b)| a * b).sum()).collect();
    Tensor::new(&[o], out).expect("non-empty")
}

/// `Wᵀ u` for `W` viewed as `[O, rest]`.
fn matvec_t<T: Element>(w: &Tensor<T>, u: &[T]) -> Tensor<T> {
    let o = w.shape()[0];
    let d = w.len() / o;
    let mut out = vec![T::zero(); d];
    for (row, &ui) in w.data().chunks(d).zip(u) {
        for (acc, &wij) in out.iter_mut().zip(row) {
            *acc += wij * ui;
        }
    }
    Tensor::new(&[d], out).expect("non-empty")
}

fn unit<T: Element>(t: Tensor<T>) -> Tensor<T> {
    let n = t.sq_norm().sqrt().max(T::from_f64_lossy(1e-12));
    t.map(|e| e / n)
}
