//! Critic-based routing: fitness scores, routing weights and the
//! approximate Wasserstein objective that trains the critics.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{conv_out_extent, Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Ctx, Group, ParamStore, SpectralConv};
use crate::tensor::{Element, Tensor};

/// Base channel width of the critic stacks.
pub const CRITIC_WIDTH: usize = 32;
pub const CRITIC_DROPOUT: f64 = 0.3;
pub const NOISE_RATE: f64 = 0.05;
/// Variance of the standard normal factor scaling the injected noise.
pub const NOISE_VARIANCE: f64 = 0.5;
pub const WEIGHT_DROPOUT: f64 = 0.1;
/// Row sums at or below this fall back to uniform weights.
pub const DEGENERATE_SUM: f64 = 1e-9;
/// Normalizers below this drop their term from the loss.
pub const MIN_NORMALIZER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingMode {
    /// Critics trained by the Wasserstein loss and by cross-entropy through the weights.
    WsPlusCe,
    /// Critics trained by the Wasserstein loss only.
    WsOnly,
    /// Critics trained by cross-entropy only.
    CeOnly,
    /// Fresh uniform random weights per sample, renormalized.
    Random,
    /// `b = 1/N`.
    Uniform,
}

impl RoutingMode {
    pub const ALL: [RoutingMode; 5] = [Self::WsPlusCe, Self::WsOnly, Self::CeOnly, Self::Random, Self::Uniform];

    pub fn name(self) -> &'static str {
        match self {
            Self::WsPlusCe => "ws+ce",
            Self::WsOnly => "ws",
            Self::CeOnly => "ce",
            Self::Random => "random",
            Self::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ws+ce" | "ws_plus_ce" => Some(Self::WsPlusCe),
            "ws" | "ws_only" => Some(Self::WsOnly),
            "ce" | "ce_only" => Some(Self::CeOnly),
            "random" => Some(Self::Random),
            "uniform" => Some(Self::Uniform),
            _ => None,
        }
    }

    /// Whether critics are evaluated at all.
    pub fn uses_critic(self) -> bool {
        matches!(self, Self::WsPlusCe | Self::WsOnly | Self::CeOnly)
    }

    pub fn has_ws_loss(self) -> bool {
        matches!(self, Self::WsPlusCe | Self::WsOnly)
    }

    /// Whether the weights used for routing carry gradient back into the critics.
    pub fn routes_with_gradient(self) -> bool {
        matches!(self, Self::WsPlusCe | Self::CeOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    Softmax,
    Normalize,
}

impl Weighting {
    pub fn name(self) -> &'static str {
        match self {
            Self::Softmax => "softmax",
            Self::Normalize => "normalized",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "softmax" => Some(Self::Softmax),
            "normalized" | "normalize" => Some(Self::Normalize),
            _ => None,
        }
    }
}

/// Strided 3×3 spectral-normalized critic scoring each capsule block.
#[derive(Debug, Clone)]
pub struct FeatureCritic {
    pub layers: Vec<SpectralConv>,
    pub head: BatchNorm,
}

impl FeatureCritic {
    /// Layers are appended until the `h × w` field reaches 1×1; layer `j`
    /// (1-based) has `j·32` channels except the last, which has one.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        h: usize,
        w: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut extents = Vec::new();
        let (mut eh, mut ew) = (h, w);
        loop {
            let step = |e| conv_out_extent(e, 3, 2, Padding::Same).map(|(o, _)| o).unwrap_or(1);
            eh = step(eh);
            ew = step(ew);
            extents.push((eh, ew));
            if eh == 1 && ew == 1 {
                break;
            }
        }
        let depth = extents.len();
        let mut layers = Vec::with_capacity(depth);
        let mut c = dim;
        for j in 1..=depth {
            let out = if j == depth { 1 } else { j * CRITIC_WIDTH };
            layers.push(SpectralConv::new(store, &format!("{name}.conv{j}"), c, out, 3, 2, true, rng)?);
            c = out;
        }
        Ok(Self { layers, head: BatchNorm::new(store, &format!("{name}.head_bn"), 1, Group::Critic)? })
    }
}

/// Pointwise spectral-normalized critic scoring every capsule position.
#[derive(Debug, Clone)]
pub struct FinalCritic {
    pub layers: Vec<SpectralConv>,
    pub head: BatchNorm,
}

impl FinalCritic {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let widths = [CRITIC_WIDTH, 2 * CRITIC_WIDTH, 3 * CRITIC_WIDTH, 1];
        let mut layers = Vec::with_capacity(widths.len());
        let mut c = dim;
        for (j, &out) in widths.iter().enumerate() {
            layers.push(SpectralConv::new(store, &format!("{name}.conv{}", j + 1), c, out, 1, 1, true, rng)?);
            c = out;
        }
        Ok(Self { layers, head: BatchNorm::new(store, &format!("{name}.head_bn"), 1, Group::Critic)? })
    }
}

#[derive(Debug, Clone)]
pub enum Critic {
    Feature(FeatureCritic),
    Final(FinalCritic),
}

impl Critic {
    pub fn spectral_layers(&self) -> &[SpectralConv] {
        match self {
            Self::Feature(c) => &c.layers,
            Self::Final(c) => &c.layers,
        }
    }

    fn head(&self) -> &BatchNorm {
        match self {
            Self::Feature(c) => &c.head,
            Self::Final(c) => &c.head,
        }
    }

    /// Fitness of detached capsules `[B, n, k, H, W]`: `[B, n]` for a
    /// feature critic, `[B, n·H·W]` for the final critic.
    pub fn fitness<T: Element>(&self, ctx: &mut Ctx<'_, T>, caps: Var) -> Result<Var> {
        let s = ctx.tape.shape(caps).to_vec();
        if s.len() != 5 {
            return Err(Error::ShapeMismatch(format!("capsule field {s:?}")));
        }
        let (b, n, k, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let detached = ctx.detach(caps);
        let mut x = ctx.tape.reshape(detached, &[b * n, k, h, w])?;
        let layers = self.spectral_layers();
        for (i, layer) in layers.iter().enumerate() {
            x = layer.forward(ctx, x)?;
            if i + 1 < layers.len() {
                x = ctx.tape.relu(x);
                let train = ctx.train;
                x = ctx.tape.dropout(x, CRITIC_DROPOUT, train, ctx.rng)?;
            }
        }
        let x = self.head().forward(ctx, x)?;
        let a = ctx.tape.sigmoid(x);
        let out = ctx.tape.shape(a).to_vec();
        ctx.tape.reshape(a, &[b, n * out[2] * out[3]])
    }
}

/// Adds `max_n(a)·ε`, `ε ~ N(0, 0.5)`, to each entry with probability `rate`.
/// The row maximum stays differentiable; the selection of the maximum does not.
pub fn inject_noise<T: Element>(ctx: &mut Ctx<'_, T>, a: Var, rate: f64) -> Result<Var> {
    if !ctx.train || rate <= 0.0 {
        return Ok(a);
    }
    let s = ctx.tape.shape(a).to_vec();
    let (rows, cols) = (s[0], s[1]);
    let normal = Normal::new(0.0, NOISE_VARIANCE.sqrt()).expect("finite variance");
    let mut factor = vec![T::zero(); rows * cols];
    let mut any = false;
    for f in factor.iter_mut() {
        if ctx.rng.gen::<f64>() < rate {
            *f = T::from_f64_lossy(normal.sample(ctx.rng));
            any = true;
        }
    }
    if !any {
        return Ok(a);
    }
    let argmax = ctx.choice(|tape| row_argmax(tape.value(a)));
    let mut onehot = vec![T::zero(); rows * cols];
    for (r, &c) in argmax.iter().enumerate() {
        onehot[r * cols + c] = T::one();
    }
    let picked = ctx.tape.mul_const(a, Tensor::new(&s, onehot)?)?;
    let max = ctx.tape.sum_axis(picked, 1, true)?;
    let factor = ctx.tape.constant(Tensor::new(&s, factor)?);
    let noise = ctx.tape.mul(max, factor)?;
    ctx.tape.add(a, noise)
}

/// Index of the largest entry of every row; ties go to the smallest index.
pub fn row_argmax<T: Element>(x: &Tensor<T>) -> Vec<usize> {
    let cols = x.shape()[1];
    x.data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn weight_softmax<T: Element>(tape: &mut Tape<T>, a: Var) -> Result<Var> {
    tape.softmax(a, 1)
}

/// `b = a / Σa` per row, with negative fitness clipped to zero and rows whose
/// sum is at most `1e-9` replaced by uniform weights.
pub fn weight_normalize<T: Element>(tape: &mut Tape<T>, a: Var) -> Result<Var> {
    let clipped = tape.relu(a);
    let s = tape.shape(a).to_vec();
    let cols = s[1];
    let sums: Vec<f64> =
        tape.value(clipped).data().chunks(cols).map(|r| r.iter().map(|v| v.to_f64_lossy()).sum()).collect();
    let shifted = if sums.iter().any(|&v| v <= DEGENERATE_SUM) {
        let lift: Vec<T> = sums
            .iter()
            .flat_map(|&v| std::iter::repeat(if v <= DEGENERATE_SUM { T::one() } else { T::zero() }).take(cols))
            .collect();
        let lift = tape.constant(Tensor::new(&s, lift)?);
        tape.add(clipped, lift)?
    } else {
        clipped
    };
    let total = tape.sum_axis(shifted, 1, true)?;
    tape.div(shifted, total)
}

/// Zeroes each weight with probability `rate` and renormalizes every row;
/// a row with no surviving mass becomes uniform.
pub fn weight_dropout<T: Element>(ctx: &mut Ctx<'_, T>, b: Var, rate: f64) -> Result<Var> {
    if !ctx.train || rate <= 0.0 {
        return Ok(b);
    }
    let s = ctx.tape.shape(b).to_vec();
    let cols = s[1];
    let mask: Vec<T> =
        (0..s[0] * cols).map(|_| if ctx.rng.gen::<f64>() < rate { T::zero() } else { T::one() }).collect();
    let kept = ctx.tape.mul_const(b, Tensor::new(&s, mask)?)?;
    let dead: Vec<bool> = ctx
        .tape
        .value(kept)
        .data()
        .chunks(cols)
        .map(|r| r.iter().map(|v| v.to_f64_lossy()).sum::<f64>() <= DEGENERATE_SUM)
        .collect();
    let kept = if dead.iter().any(|&d| d) {
        let lift: Vec<T> =
            dead.iter().flat_map(|&d| std::iter::repeat(if d { T::one() } else { T::zero() }).take(cols)).collect();
        let lift = ctx.tape.constant(Tensor::new(&s, lift)?);
        ctx.tape.add(kept, lift)?
    } else {
        kept
    };
    let total = ctx.tape.sum_axis(kept, 1, true)?;
    ctx.tape.div(kept, total)
}

/// Uniform samples per row, renormalized.
pub fn random_weights<T: Element>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<T> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f64> = (0..cols).map(|_| rng.gen::<f64>() + f64::MIN_POSITIVE).collect();
        let z: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| T::from_f64_lossy(v / z)));
    }
    Tensor::new(&[rows, cols], data).expect("non-empty")
}

pub fn uniform_weights<T: Element>(rows: usize, cols: usize) -> Tensor<T> {
    Tensor::full(&[rows, cols], T::one() / T::from_usize(cols).unwrap())
}

/// Weights produced for one level.
#[derive(Debug, Clone, Copy)]
pub struct LevelWeights {
    /// Critic fitness before noise; `None` when the mode skips the critic.
    pub fitness: Option<Var>,
    /// Weights that combine the capsules.
    pub route: Var,
    /// Weights entering the Wasserstein loss, with gradient into the critic.
    pub ws: Option<Var>,
}

/// Routing weights for a level under `mode`. `fitness` must be present for
/// the critic-driven modes; `cols` is the number of routed capsules.
pub fn make_routing_weights<T: Element>(
    ctx: &mut Ctx<'_, T>,
    mode: RoutingMode,
    weighting: Weighting,
    fitness: Option<Var>,
    rows: usize,
    cols: usize,
) -> Result<LevelWeights> {
    match mode {
        RoutingMode::Random => {
            let b = random_weights(rows, cols, ctx.rng);
            Ok(LevelWeights { fitness: None, route: ctx.tape.constant(b), ws: None })
        }
        RoutingMode::Uniform => {
            Ok(LevelWeights { fitness: None, route: ctx.tape.constant(uniform_weights(rows, cols)), ws: None })
        }
        _ => {
            let a = fitness.ok_or_else(|| Error::InvalidSpec("critic-driven routing without fitness".into()))?;
            let noisy = inject_noise(ctx, a, NOISE_RATE)?;
            let b = match weighting {
                Weighting::Softmax => weight_softmax(ctx.tape, noisy)?,
                Weighting::Normalize => weight_normalize(ctx.tape, noisy)?,
            };
            let b = weight_dropout(ctx, b, WEIGHT_DROPOUT)?;
            let route = if mode.routes_with_gradient() { b } else { ctx.detach(b) };
            let ws = mode.has_ws_loss().then_some(b);
            Ok(LevelWeights { fitness: Some(a), route, ws })
        }
    }
}

/// `Σ_n b_n c_n`: `[B, n, k, H, W]` with `b[B, n]` → `[B, k, H, W]`.
pub fn route_sum<T: Element>(tape: &mut Tape<T>, caps: Var, b: Var) -> Result<Var> {
    let s = tape.shape(caps).to_vec();
    let bs = tape.shape(b).to_vec();
    if s.len() != 5 || bs != [s[0], s[1]] {
        return Err(Error::ShapeMismatch(format!("route {bs:?} over capsules {s:?}")));
    }
    let b5 = tape.reshape(b, &[s[0], s[1], 1, 1, 1])?;
    let weighted = tape.mul(caps, b5)?;
    tape.sum_axis(weighted, 1, false)
}

/// Fitness mass of selected and not-selected capsules per sample:
/// `F_s = Σ b f` and `F_ns = Σ (1−b) f / (N−1)`, with `F_ns = 0` for `N = 1`.
pub fn selected_contribs<T: Element>(tape: &mut Tape<T>, f: Var, b: Var) -> Result<(Var, Var)> {
    let s = tape.shape(f).to_vec();
    if tape.shape(b) != s.as_slice() || s.len() != 2 {
        return Err(Error::ShapeMismatch(format!("fitness {s:?} with weights {:?}", tape.shape(b))));
    }
    let n = s[1];
    let bf = tape.mul(b, f)?;
    let fs = tape.sum_axis(bf, 1, false)?;
    let fns = if n > 1 {
        let rest = tape.sub(f, bf)?;
        let r = tape.sum_axis(rest, 1, false)?;
        tape.scale(r, T::one() / T::from_usize(n - 1).unwrap())
    } else {
        tape.constant(Tensor::zeros(&[s[0]]))
    };
    Ok((fs, fns))
}

/// `cos θ` between a prediction and a one-hot target, clamped to `[0, 1]`;
/// zero for a zero prediction.
pub fn cosine_correctness(p: &[f64], target: usize) -> f64 {
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return 0.0;
    }
    (p[target] / norm).clamp(0.0, 1.0)
}

/// Batch bookkeeping of the Wasserstein term.
#[derive(Debug, Clone, Default)]
pub struct WsStats {
    pub n_p: f64,
    pub n_h: f64,
}

/// `E_h̃[f] − E_p̃[f]` for one level given per-sample `F_s`, `F_ns` and the
/// (constant) correctness `cos θ`. Terms whose normalizer is below `1e-8`
/// are dropped.
pub fn wasserstein_level<T: Element>(tape: &mut Tape<T>, fs: Var, fns: Var, cos: &[f64]) -> Result<(Var, WsStats)> {
    let m = cos.len();
    if tape.shape(fs) != [m] || tape.shape(fns) != [m] {
        return Err(Error::ShapeMismatch(format!("{m} correctness values for F_s {:?}", tape.shape(fs))));
    }
    let n_p: f64 = cos.iter().sum();
    let n_h: f64 = cos.iter().map(|c| 1.0 - c).sum();
    let weighted_sum = |tape: &mut Tape<T>, x: Var, w: Vec<f64>, norm: f64| -> Result<Var> {
        let w = Tensor::from_f64(&[m], &w)?;
        let p = tape.mul_const(x, w)?;
        let s = tape.sum(p);
        Ok(tape.scale(s, T::from_f64_lossy(1.0 / norm)))
    };
    let mut terms: Vec<Var> = Vec::new();
    if n_p >= MIN_NORMALIZER {
        // −E_p̃ and the second half of E_h̃
        let ep = weighted_sum(tape, fs, cos.to_vec(), n_p)?;
        terms.push(tape.scale(ep, -T::one()));
        terms.push(weighted_sum(tape, fns, cos.to_vec(), 2.0 * n_p)?);
    }
    if n_h >= MIN_NORMALIZER {
        terms.push(weighted_sum(tape, fs, cos.iter().map(|c| 1.0 - c).collect(), 2.0 * n_h)?);
    }
    let Some((&first, rest)) = terms.split_first() else {
        return Ok((tape.constant(Tensor::scalar(T::zero())), WsStats { n_p, n_h }));
    };
    let mut loss = first;
    for &t in rest {
        loss = tape.add(loss, t)?;
    }
    Ok((loss, WsStats { n_p, n_h }))
}
