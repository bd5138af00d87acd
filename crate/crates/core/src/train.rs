//! Optimizer, learning-rate schedule, the training loop and evaluation.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::softmax_rows;
use crate::data::{augment, AugmentPolicy, Dataset};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Model};
use crate::nn::{Ctx, ParamStore};
use crate::routing::cosine_correctness;
use crate::tensor::{Element, Tensor};
use crate::Tape;

pub const MOMENTUM: f64 = 0.9;

/// Per-parameter velocities for SGD with Nesterov momentum.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Element> {
    pub velocity: Vec<Tensor<T>>,
    pub momentum: f64,
    pub lr: f64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, lr: f64) -> Self {
        Self { velocity: store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(), momentum, lr }
    }
}

/// One Nesterov step on every parameter with a gradient:
///
/// ```text
/// g ← g + 2·λ·θ            (parameters flagged for decay)
/// v ← μ·v − lr·g
/// θ ← θ + μ·v − lr·g
/// ```
///
/// Parameters without a gradient (`None`) are left untouched.
pub fn sgd_nesterov_step<T: Element>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut OptimizerState<T>,
    weight_decay: f64,
) -> Result<()> {
    let n = store.params().len();
    if grads.len() != n || state.velocity.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} gradients and {} velocities for {n} parameters",
            grads.len(),
            state.velocity.len()
        )));
    }
    let mu = T::from_f64_lossy(state.momentum);
    let lr = T::from_f64_lossy(state.lr);
    let ids: Vec<_> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(grads) {
        let Some(grad) = grad else { continue };
        let decay = T::from_f64_lossy(if store.param(id).decay { 2.0 * weight_decay } else { 0.0 });
        let vel = &mut state.velocity[id.index()];
        let theta = store.value_mut(id);
        if grad.shape() != theta.shape() || vel.shape() != theta.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {:?}, gradient {:?}, velocity {:?}",
                theta.shape(),
                grad.shape(),
                vel.shape()
            )));
        }
        for ((w, v), &g) in theta.data_mut().iter_mut().zip(vel.data_mut()).zip(grad.data()) {
            let g = g + decay * *w;
            *v = mu * *v - lr * g;
            *w = *w + mu * *v - lr * g;
        }
    }
    Ok(())
}

/// Step decay: `base · factor^{#milestones ≤ epoch}` with 0-based epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
    pub epochs: usize,
}

impl Schedule {
    pub fn mnist() -> Self {
        Self { base: 0.1, milestones: vec![20, 30], factor: 0.1, epochs: 40 }
    }

    pub fn cifar() -> Self {
        Self { base: 0.1, milestones: vec![150, 200, 250], factor: 0.1, epochs: 300 }
    }

    pub fn constant(base: f64, epochs: usize) -> Self {
        Self { base, milestones: Vec::new(), factor: 0.1, epochs }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base * self.factor.powi(passed as i32)
    }
}

pub const METRICS_HEADER: [&str; 9] =
    ["epoch", "lr", "train_acc", "val_acc", "loss_ce", "loss_ws", "loss_r", "loss_l2", "seconds"];

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub loss_ce: f64,
    pub loss_ws: f64,
    pub loss_r: f64,
    pub loss_l2: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub seed: u64,
    pub rows: Vec<EpochRow>,
    /// Epoch whose parameters were restored at the end.
    pub best_epoch: Option<usize>,
}

impl RunMetrics {
    pub fn best_val_acc(&self) -> f64 {
        self.rows.iter().map(|r| r.val_acc).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(METRICS_HEADER).expect("in-memory write");
        for r in &self.rows {
            let cells = [r.lr, r.train_acc, r.val_acc, r.loss_ce, r.loss_ws, r.loss_r, r.loss_l2, r.seconds];
            let mut rec = vec![r.epoch.to_string()];
            rec.extend(cells.iter().map(|v| v.to_string()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub schedule: Schedule,
    pub momentum: f64,
    pub seed: u64,
    pub augment: AugmentPolicy,
    /// Stop after this many epochs without a better validation accuracy.
    pub patience: Option<usize>,
    /// Power iterations per step for the spectral-normalized critics.
    pub spectral_iters: usize,
    pub eval_batch: usize,
    /// Extra checkpoint metadata.
    pub meta: Vec<(String, String)>,
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            schedule: Schedule::mnist(),
            momentum: MOMENTUM,
            seed: 0,
            augment: AugmentPolicy::NONE,
            patience: None,
            spectral_iters: 1,
            eval_batch: 250,
            meta: Vec::new(),
            verbose: false,
        }
    }
}

/// Loss components and correct predictions of one training step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub ce: f64,
    pub ws: f64,
    pub r: f64,
    pub l2: f64,
    pub correct: usize,
}

/// Forward, backward and one optimizer step on a batch.
pub fn train_step<T: Element>(
    model: &mut Model<T>,
    state: &mut OptimizerState<T>,
    images: &Tensor<T>,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
    spectral_iters: usize,
) -> Result<StepOutcome> {
    let (grads, bn, bundle, correct) = {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &model.store, true, rng);
        let x = ctx.tape.constant(images.clone());
        let out = model.net.forward(&mut ctx, x)?;
        let (loss, bundle) = model.net.loss(&mut ctx, &out, x, labels)?;
        let correct = count_correct(ctx.tape.value(out.logits), labels, model.net.spec.n_classes);
        let g = ctx.tape.backward(loss)?;
        (ctx.param_grads(&g), ctx.take_bn_updates(), bundle, correct)
    };
    let wd = model.net.spec.lambda_wd;
    sgd_nesterov_step(&mut model.store, &grads, state, wd)?;
    model.store.apply_bn_updates(&bn);
    model.refresh_spectral(spectral_iters);
    Ok(StepOutcome { ce: bundle.ce, ws: bundle.ws, r: bundle.r, l2: bundle.l2, correct })
}

fn predicted_class(row: &[f64], n_classes: usize) -> usize {
    let mut best = 0;
    for c in 1..n_classes {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

fn count_correct<T: Element>(logits: &Tensor<T>, labels: &[usize], n_classes: usize) -> usize {
    let r = logits.shape()[1];
    logits
        .data()
        .chunks(r)
        .zip(labels)
        .filter(|(row, &t)| {
            let row: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
            predicted_class(&row, n_classes) == t
        })
        .count()
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Trains for the schedule's epochs, evaluating on `val` after each one and
/// restoring the parameters of the best validation epoch at the end. With
/// `out_dir`, `metrics.csv` is rewritten every epoch and `best.wcap` on
/// every improvement.
pub fn train(
    model: &mut Model<f32>,
    train_set: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<RunMetrics> {
    if train_set.len() < 2 {
        return Err(Error::DataUnavailable(format!("{} training samples", train_set.len())));
    }
    if val.is_empty() {
        return Err(Error::DataUnavailable("empty validation set".into()));
    }
    if cfg.batch_size < 2 {
        return Err(Error::InvalidSpec("batch size must be at least 2".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(&model.store, cfg.momentum, cfg.schedule.base);
    let mut metrics = RunMetrics { seed: cfg.seed, rows: Vec::new(), best_epoch: None };
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.schedule.epochs {
        let start = Instant::now();
        state.lr = cfg.schedule.lr(epoch);
        order.shuffle(&mut rng);
        let (mut ce, mut ws, mut r, mut l2) = (0.0, 0.0, 0.0, 0.0);
        let (mut correct, mut seen, mut steps) = (0usize, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            // batch norm needs two samples; a trailing single sample is skipped
            if chunk.len() < 2 {
                continue;
            }
            let (images, labels) = train_set.batch(chunk);
            let images = augment(&images, &cfg.augment, &mut rng);
            let o = train_step(model, &mut state, &images, &labels, &mut rng, cfg.spectral_iters)?;
            ce += o.ce;
            ws += o.ws;
            r += o.r;
            l2 += o.l2;
            correct += o.correct;
            seen += labels.len();
            steps += 1;
        }
        let eval = evaluate(model, val, cfg.eval_batch, cfg.seed)?;
        let k = steps.max(1) as f64;
        let row = EpochRow {
            epoch,
            lr: state.lr,
            train_acc: correct as f64 / seen.max(1) as f64,
            val_acc: eval.accuracy,
            loss_ce: ce / k,
            loss_ws: ws / k,
            loss_r: r / k,
            loss_l2: l2 / k,
            seconds: start.elapsed().as_secs_f64(),
        };
        if cfg.verbose {
            eprintln!(
                "epoch {epoch} lr {:.4} train {:.4} val {:.4} ce {:.4} ws {:.4} r {:.4} ({:.1}s)",
                row.lr, row.train_acc, row.val_acc, row.loss_ce, row.loss_ws, row.loss_r, row.seconds
            );
        }
        metrics.rows.push(row);
        let improved = best.as_ref().map_or(true, |(acc, _)| eval.accuracy > *acc);
        if improved {
            best = Some((eval.accuracy, model.store.clone()));
            metrics.best_epoch = Some(epoch);
            since_best = 0;
            if let Some(dir) = out_dir {
                let mut meta: Vec<(String, String)> = cfg.meta.clone();
                meta.push(("epoch".into(), epoch.to_string()));
                meta.push(("val_acc".into(), eval.accuracy.to_string()));
                let refs: Vec<(&str, &str)> = meta.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
                save_checkpoint(&dir.join("best.wcap"), model, &refs)?;
            }
        } else {
            since_best += 1;
        }
        if let Some(dir) = out_dir {
            write_atomic(&dir.join("metrics.csv"), &metrics.to_csv())?;
        }
        if cfg.patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_cos: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Eval-mode accuracy, mean cosθ correctness and confusion counts. `seed`
/// drives the draws of the random routing mode.
pub fn evaluate<T: Element>(model: &Model<T>, data: &Dataset, batch: usize, seed: u64) -> Result<Evaluation> {
    let n_classes = model.net.spec.n_classes;
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut correct, mut cos_sum) = (0usize, 0.0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (images, labels) = data.batch(chunk);
        let logits = model.logits(&images.cast(), &mut rng)?;
        let r = logits.shape()[1];
        let probs = softmax_rows(&logits);
        let raw: Vec<f64> = logits.data().iter().map(|v| v.to_f64_lossy()).collect();
        for ((row, p), &t) in raw.chunks(r).zip(probs.chunks(r)).zip(&labels) {
            let pred = predicted_class(row, n_classes);
            if t >= n_classes {
                return Err(Error::InvalidData(format!("label {t} for {n_classes} classes")));
            }
            confusion[t][pred] += 1;
            correct += usize::from(pred == t);
            cos_sum += cosine_correctness(p, t);
        }
    }
    let n = data.len().max(1) as f64;
    Ok(Evaluation { accuracy: correct as f64 / n, mean_cos: cos_sum / n, confusion })
}

/// Class-conditional mean routing weights of one level.
#[derive(Debug, Clone)]
pub struct LevelProfile {
    pub blocks: usize,
    pub extent: (usize, usize),
    /// `mean[class][column]`; a column is a block, or `(n, i, j)` on the last level.
    pub mean: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl LevelProfile {
    /// Weights summed over positions: `[class][block]`.
    pub fn per_block(&self) -> Vec<Vec<f64>> {
        let per = self.mean.first().map_or(1, |r| r.len() / self.blocks);
        self.mean.iter().map(|row| row.chunks(per).map(|c| c.iter().sum()).collect()).collect()
    }

    /// Weights summed over blocks: `[class][i·W + j]`.
    pub fn per_position(&self) -> Vec<Vec<f64>> {
        let per = self.mean.first().map_or(1, |r| r.len() / self.blocks);
        self.mean
            .iter()
            .map(|row| (0..per).map(|p| (0..self.blocks).map(|n| row[n * per + p]).sum()).collect())
            .collect()
    }
}

/// Eval-mode routing weights averaged per true class, for every level.
pub fn routing_profile<T: Element>(
    model: &Model<T>,
    data: &Dataset,
    batch: usize,
    seed: u64,
) -> Result<Vec<LevelProfile>> {
    let n_classes = model.net.spec.n_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut profiles: Vec<LevelProfile> = Vec::new();
    let mut counts = vec![0usize; n_classes];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (images, labels) = data.batch(chunk);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &model.store, false, &mut rng);
        let x = ctx.tape.constant(images.cast());
        let out = model.net.forward(&mut ctx, x)?;
        for &t in &labels {
            counts[t] += 1;
        }
        for (li, level) in out.levels.iter().enumerate() {
            let w = tape.value(level.weights.route);
            let cols = w.shape()[1];
            if profiles.len() <= li {
                let spec_level = &model.net.levels[li];
                profiles.push(LevelProfile {
                    blocks: spec_level.blocks.len(),
                    extent: spec_level.extent,
                    mean: vec![vec![0.0; cols]; n_classes],
                    counts: Vec::new(),
                });
            }
            for (row, &t) in w.data().chunks(cols).zip(&labels) {
                for (acc, v) in profiles[li].mean[t].iter_mut().zip(row) {
                    *acc += v.to_f64_lossy();
                }
            }
        }
    }
    for p in &mut profiles {
        for (row, &c) in p.mean.iter_mut().zip(&counts) {
            if c > 0 {
                row.iter_mut().for_each(|v| *v /= c as f64);
            }
        }
        p.counts = counts.clone();
    }
    Ok(profiles)
}
