//! The assembled network: levels of capsule blocks chained by critic
//! routing, the projection head and the reconstruction decoder.

mod checkpoint;
mod spec;

use rand::Rng;

use crate::autodiff::{Padding, Var};
use crate::capsule::CapsTrans;
use crate::error::{Error, Result};
use crate::nn::{normal, BatchNorm, Conv, Ctx, DenseBlock, Group, ParamId, ParamStore, SpectralConv};
use crate::routing::{
    self, cosine_correctness, make_routing_weights, route_sum, selected_contribs, wasserstein_level, Critic,
    FeatureCritic, FinalCritic, LevelWeights,
};
use crate::tensor::{Element, Tensor};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};
pub use spec::{DecoderSpec, LevelSpec, NetworkSpec};

/// Dropout on capsule vectors before the projection.
pub const PROJECTION_DROPOUT: f64 = 0.3;

#[derive(Debug, Clone)]
pub struct Level {
    pub blocks: Vec<DenseBlock>,
    pub trans: CapsTrans,
    pub critic: Critic,
    /// Spatial extent of the level's capsules.
    pub extent: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
    pub bn1: BatchNorm,
    pub tconv1: ParamId,
    pub bn2: BatchNorm,
    pub tconv2: ParamId,
    pub out_bias: ParamId,
    pub patch: (usize, usize, usize),
}

/// Layer structure; parameter values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub init: Conv,
    pub levels: Vec<Level>,
    pub projection: ParamId,
    pub decoder: Decoder,
}

#[derive(Debug, Clone)]
pub struct Model<T: Element = f32> {
    pub net: Network,
    pub store: ParamStore<T>,
}

/// Parameter counts per sub-network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamAudit {
    pub classifier: usize,
    pub critic: usize,
    pub decoder: usize,
}

impl ParamAudit {
    pub fn total(&self) -> usize {
        self.classifier + self.critic + self.decoder
    }
}

pub fn build_network<T: Element>(spec: &NetworkSpec, rng: &mut impl Rng) -> Result<Model<T>> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let s = &mut store;
    let init =
        Conv::new(s, "init", spec.in_channels, spec.init_channels, 3, 1, Padding::Same, false, Group::Classifier, rng)?;
    let extents = spec.level_extents();
    let mut levels = Vec::with_capacity(spec.levels.len());
    let mut in_ch = spec.init_channels;
    for (li, (ls, &extent)) in spec.levels.iter().zip(&extents).enumerate() {
        let name = format!("level{}", li + 1);
        let blocks = (0..ls.blocks)
            .map(|n| DenseBlock::new(s, &format!("{name}.block{n}"), in_ch, ls.growth, ls.dense_layers, ls.stride, rng))
            .collect::<Result<Vec<_>>>()?;
        let feat = blocks[0].out_channels();
        let trans = CapsTrans::new(s, &format!("{name}.caps"), ls.blocks, feat, ls.dim, spec.nonlinearity, rng)?;
        let critic = if li + 1 == spec.levels.len() {
            Critic::Final(FinalCritic::new(s, &format!("{name}.critic"), ls.dim, rng)?)
        } else {
            Critic::Feature(FeatureCritic::new(s, &format!("{name}.critic"), ls.dim, extent.0, extent.1, rng)?)
        };
        levels.push(Level { blocks, trans, critic, extent });
        in_ch = ls.dim;
    }
    let k = spec.levels.last().expect("validated").dim;
    let r = spec.outputs();
    let projection =
        s.add_param("projection", normal(&[k, r], (1.0 / k as f64).sqrt(), rng), Group::Classifier, false)?;
    let decoder = build_decoder(s, spec, k, rng)?;
    Ok(Model { net: Network { spec: spec.clone(), init, levels, projection, decoder }, store })
}

fn build_decoder<T: Element>(
    s: &mut ParamStore<T>,
    spec: &NetworkSpec,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Decoder> {
    let (c0, c1) = (spec.decoder.patch_channels, spec.decoder.mid_channels);
    let (qh, qw) = (spec.height / 4, spec.width / 4);
    let fc_out = c0 * qh * qw;
    let d = Group::Decoder;
    Ok(Decoder {
        fc_weight: s.add_param(
            "decoder.fc.weight",
            normal(&[k + 2, fc_out], (1.0 / (k + 2) as f64).sqrt(), rng),
            d,
            false,
        )?,
        fc_bias: s.add_param("decoder.fc.bias", Tensor::zeros(&[fc_out]), d, false)?,
        bn1: BatchNorm::new(s, "decoder.bn1", c0, d)?,
        tconv1: s.add_param(
            "decoder.tconv1.weight",
            normal(&[c0, c1, 3, 3], (2.0 / (9 * c0) as f64).sqrt(), rng),
            d,
            true,
        )?,
        bn2: BatchNorm::new(s, "decoder.bn2", c1, d)?,
        tconv2: s.add_param(
            "decoder.tconv2.weight",
            normal(&[c1, spec.in_channels, 3, 3], (2.0 / (9 * c1) as f64).sqrt(), rng),
            d,
            true,
        )?,
        out_bias: s.add_param("decoder.tconv2.bias", Tensor::zeros(&[spec.in_channels]), d, false)?,
        patch: (c0, qh, qw),
    })
}

/// What one level produced during a forward pass.
#[derive(Debug, Clone)]
pub struct LevelOut {
    /// `[B, n, k, H, W]`.
    pub capsules: Var,
    pub weights: LevelWeights,
}

#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// `[B, n_classes + 1]`.
    pub logits: Var,
    pub levels: Vec<LevelOut>,
    /// Index into the flattened last-level capsules `(n, i, j)` per sample.
    pub best: Vec<usize>,
    /// Reconstructed images, same shape as the input.
    pub recon: Var,
}

/// The individual loss terms and their diagnostics.
#[derive(Debug, Clone, Default)]
pub struct LossBundle {
    pub ce: f64,
    pub ws: f64,
    pub r: f64,
    pub l2: f64,
    pub lambda_ws: f64,
    pub lambda_r: f64,
    pub lambda_wd: f64,
    pub cos: Vec<f64>,
    pub n_p: f64,
    pub n_h: f64,
}

impl LossBundle {
    /// `L_CE + λ_WS·L_WS + λ_R·L_R + λ_WD·L_2`.
    pub fn total(&self) -> f64 {
        self.ce + self.lambda_ws * self.ws + self.lambda_r * self.r + self.lambda_wd * self.l2
    }
}

/// Row-major index `(n, i, j)` → normalized `(x, y)` in `[−1, 1]`.
pub fn capsule_position(index: usize, h: usize, w: usize) -> (usize, usize, usize, f64, f64) {
    let n = index / (h * w);
    let i = (index / w) % h;
    let j = index % w;
    let norm = |v: usize, extent: usize| if extent > 1 { 2.0 * v as f64 / (extent - 1) as f64 - 1.0 } else { 0.0 };
    (n, i, j, norm(j, w), norm(i, h))
}

impl Network {
    pub fn spectral_layers(&self) -> impl Iterator<Item = &SpectralConv> {
        self.levels.iter().flat_map(|l| l.critic.spectral_layers())
    }

    /// Full pass on images `[B, C, H, W]`.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<ForwardOut> {
        let spec = &self.spec;
        let s = ctx.tape.shape(images).to_vec();
        if s.len() != 4 || s[1..] != [spec.in_channels, spec.height, spec.width] {
            return Err(Error::ShapeMismatch(format!(
                "images {s:?} for a {}×{}×{} network",
                spec.in_channels, spec.height, spec.width
            )));
        }
        let batch = s[0];
        let mut x = self.init.forward(ctx, images)?;
        let mut outs = Vec::with_capacity(self.levels.len());
        for (li, level) in self.levels.iter().enumerate() {
            let mut features = Vec::with_capacity(level.blocks.len());
            for block in &level.blocks {
                features.push(block.forward(ctx, x)?);
            }
            let caps = level.trans.forward(ctx, &features)?;
            let last = li + 1 == self.levels.len();
            let n = level.blocks.len();
            let cols = if last { n * level.extent.0 * level.extent.1 } else { n };
            let fitness = if spec.routing.uses_critic() { Some(level.critic.fitness(ctx, caps)?) } else { None };
            let weights = make_routing_weights(ctx, spec.routing, spec.weighting, fitness, batch, cols)?;
            if !last {
                x = route_sum(ctx.tape, caps, weights.route)?;
            }
            outs.push(LevelOut { capsules: caps, weights });
        }
        let last = outs.last().expect("validated");
        let (flat, logits) = self.predict(ctx, last.capsules, last.weights.route)?;
        let route = last.weights.route;
        let best = ctx.choice(|tape| routing::row_argmax(tape.value(route)));
        let recon = self.decode(ctx, flat, &best)?;
        Ok(ForwardOut { logits, levels: outs, best, recon })
    }

    /// `p = (Σ_ñ b_ñ · dropout(c_ñ)) W`. Returns the flattened capsules
    /// `[B, ñ, k]` (before dropout) with the prediction.
    pub fn predict<T: Element>(&self, ctx: &mut Ctx<'_, T>, caps: Var, b: Var) -> Result<(Var, Var)> {
        let s = ctx.tape.shape(caps).to_vec();
        let (batch, n, k, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let m = n * h * w;
        if ctx.tape.shape(b) != [batch, m] {
            return Err(Error::ShapeMismatch(format!("weights {:?} over {m} capsules", ctx.tape.shape(b))));
        }
        let moved = ctx.tape.permute(caps, &[0, 1, 3, 4, 2])?;
        let flat = ctx.tape.reshape(moved, &[batch, m, k])?;
        let train = ctx.train;
        let dropped = ctx.tape.dropout(flat, PROJECTION_DROPOUT, train, ctx.rng)?;
        let b3 = ctx.tape.reshape(b, &[batch, m, 1])?;
        let weighted = ctx.tape.mul(dropped, b3)?;
        let pooled = ctx.tape.sum_axis(weighted, 1, false)?;
        let wp = ctx.param(self.projection);
        let logits = ctx.tape.matmul(pooled, wp)?;
        Ok((flat, logits))
    }

    /// Reconstructs images from the selected capsule of each sample.
    pub fn decode<T: Element>(&self, ctx: &mut Ctx<'_, T>, flat: Var, best: &[usize]) -> Result<Var> {
        let level = self.levels.last().expect("validated");
        let (h, w) = level.extent;
        let vec = ctx.tape.gather_rows(flat, best)?;
        let mut pos = Vec::with_capacity(best.len() * 2);
        for &idx in best {
            let (_, _, _, x, y) = capsule_position(idx, h, w);
            pos.push(x);
            pos.push(y);
        }
        let pos = ctx.tape.constant(Tensor::from_f64(&[best.len(), 2], &pos)?);
        let input = ctx.tape.concat(&[vec, pos], 1)?;
        self.decode_vector(ctx, input)
    }

    /// Decoder applied to `[B, k + 2]` inputs.
    pub fn decode_vector<T: Element>(&self, ctx: &mut Ctx<'_, T>, input: Var) -> Result<Var> {
        let d = &self.decoder;
        let batch = ctx.tape.shape(input)[0];
        let fw = ctx.param(d.fc_weight);
        let fb = ctx.param(d.fc_bias);
        let z = ctx.tape.matmul(input, fw)?;
        let z = ctx.tape.add(z, fb)?;
        let (c0, qh, qw) = d.patch;
        let z = ctx.tape.reshape(z, &[batch, c0, qh, qw])?;
        let z = d.bn1.forward(ctx, z)?;
        let z = ctx.tape.relu(z);
        let t1 = ctx.param(d.tconv1);
        let z = ctx.tape.conv2d_transpose(z, t1, 2)?;
        let z = d.bn2.forward(ctx, z)?;
        let z = ctx.tape.relu(z);
        let t2 = ctx.param(d.tconv2);
        let z = ctx.tape.conv2d_transpose(z, t2, 2)?;
        let ob = ctx.param(d.out_bias);
        let c = self.spec.in_channels;
        let ob = ctx.tape.reshape(ob, &[1, c, 1, 1])?;
        ctx.tape.add(z, ob)
    }

    /// `L_CE + λ_WS·L_WS + λ_R·L_R` on the tape; the weight-decay term is
    /// reported in the bundle and applied by the optimizer.
    pub fn loss<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        out: &ForwardOut,
        images: Var,
        labels: &[usize],
    ) -> Result<(Var, LossBundle)> {
        let spec = &self.spec;
        let r = spec.outputs();
        let ce = ctx.tape.softmax_cross_entropy(out.logits, labels)?;

        let frozen = ctx.detach(out.logits);
        let probs = crate::autodiff::softmax_rows(ctx.tape.value(frozen));
        let cos: Vec<f64> = probs.chunks(r).zip(labels).map(|(p, &t)| cosine_correctness(p, t)).collect();

        let mut bundle = LossBundle {
            lambda_ws: spec.lambda_ws,
            lambda_r: spec.lambda_r,
            lambda_wd: spec.lambda_wd,
            ..Default::default()
        };
        let mut total = ce;
        if spec.routing.has_ws_loss() {
            let mut ws: Option<Var> = None;
            for level in &out.levels {
                let (Some(f), Some(b)) = (level.weights.fitness, level.weights.ws) else { continue };
                let (fs, fns) = selected_contribs(ctx.tape, f, b)?;
                let (l, stats) = wasserstein_level(ctx.tape, fs, fns, &cos)?;
                bundle.n_p = stats.n_p;
                bundle.n_h = stats.n_h;
                ws = Some(match ws {
                    Some(acc) => ctx.tape.add(acc, l)?,
                    None => l,
                });
            }
            if let Some(ws) = ws {
                bundle.ws = ctx.tape.value(ws).item().to_f64_lossy();
                let scaled = ctx.tape.scale(ws, T::from_f64_lossy(spec.lambda_ws));
                total = ctx.tape.add(total, scaled)?;
            }
        }
        let target = ctx.detach(images);
        let rl = ctx.tape.mse(out.recon, target)?;
        let scaled = ctx.tape.scale(rl, T::from_f64_lossy(spec.lambda_r));
        total = ctx.tape.add(total, scaled)?;

        bundle.ce = ctx.tape.value(ce).item().to_f64_lossy();
        bundle.r = ctx.tape.value(rl).item().to_f64_lossy();
        bundle.l2 = ctx.store.l2();
        bundle.cos = cos;
        for (name, v) in [("loss_ce", bundle.ce), ("loss_ws", bundle.ws), ("loss_r", bundle.r), ("loss_l2", bundle.l2)]
        {
            if !v.is_finite() {
                return Err(Error::NanGuard(name));
            }
        }
        Ok((total, bundle))
    }
}

impl<T: Element> Model<T> {
    pub fn new(spec: &NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        build_network(spec, rng)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.net.spec
    }

    pub fn audit(&self) -> ParamAudit {
        ParamAudit {
            classifier: self.store.count(Group::Classifier),
            critic: self.store.count(Group::Critic),
            decoder: self.store.count(Group::Decoder),
        }
    }

    /// Runs `iters` power iterations on every spectral-normalized layer.
    pub fn refresh_spectral(&mut self, iters: usize) {
        for layer in self.net.spectral_layers() {
            layer.power_iterate(&mut self.store, iters);
        }
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model { net: self.net.clone(), store: self.store.cast() }
    }
}

impl<T: Element> Model<T> {
    /// Eval-mode logits for a batch.
    pub fn logits(&self, images: &Tensor<T>, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Tensor<T>> {
        let mut tape = crate::Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.store, false, rng);
        let x = ctx.tape.constant(images.clone());
        let out = self.net.forward(&mut ctx, x)?;
        Ok(tape.value(out.logits).clone())
    }
}
