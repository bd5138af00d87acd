//! Parameter storage, the forward context and composite layers.

mod layers;

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BatchStats, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub use layers::{BatchNorm, Conv, ConvPlus, DenseBlock, DenseLayer, SpectralConv, BN_EPS, BN_MOMENTUM};

/// Which sub-network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Classifier,
    Critic,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: Group,
    /// Included in the L2 penalty.
    pub decay: bool,
}

/// Trainable parameters plus non-trainable buffers (running statistics,
/// power-iteration vectors), both addressable by unique name.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Element> {
    params: Vec<Param<T>>,
    buffers: Vec<(String, Tensor<T>)>,
    names: HashMap<String, Slot>,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), buffers: Vec::new(), names: HashMap::new() }
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(Error::InvalidSpec(format!("duplicate parameter name {name}")));
        }
        self.names.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>, group: Group, decay: bool) -> Result<ParamId> {
        self.claim(name, Slot::Param(self.params.len()))?;
        self.params.push(Param { name: name.to_string(), value, group, decay });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<BufferId> {
        self.claim(name, Slot::Buffer(self.buffers.len()))?;
        self.buffers.push((name.to_string(), value));
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].1
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name) {
            Some(Slot::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.ids().filter(|&id| self.params[id.0].group == group).collect()
    }

    /// Number of scalar parameters in `group`.
    pub fn count(&self, group: Group) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// `Σ‖w‖²` over parameters flagged for decay.
    pub fn l2(&self) -> f64 {
        self.params.iter().filter(|p| p.decay).map(|p| p.value.sq_norm().to_f64_lossy()).sum()
    }

    /// Every named tensor, parameters first, in registration order.
    pub fn named_tensors(&self) -> Vec<(&str, &Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(self.buffers.iter().map(|(n, t)| (n.as_str(), t)))
            .collect()
    }

    /// Overwrites a tensor by name; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let target = match self.names.get(name) {
            Some(Slot::Param(i)) => &mut self.params[*i].value,
            Some(Slot::Buffer(i)) => &mut self.buffers[*i].1,
            None => return Err(Error::InvalidSpec(format!("unknown tensor {name}"))),
        };
        if target.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: stored {:?}, given {:?}",
                target.shape(),
                value.shape()
            )));
        }
        *target = value;
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), group: p.group, decay: p.decay })
                .collect(),
            buffers: self.buffers.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            names: self.names.clone(),
        }
    }

    /// Folds freshly measured batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let keep = T::from_f64_lossy(BN_MOMENTUM);
        let take = T::one() - keep;
        for u in updates {
            for (r, &b) in self.buffers[u.mean.0].1.data_mut().iter_mut().zip(&u.stats.mean) {
                *r = keep * *r + take * b;
            }
            for (r, &b) in self.buffers[u.var.0].1.data_mut().iter_mut().zip(&u.stats.var) {
                *r = keep * *r + take * b;
            }
        }
    }
}

/// Batch statistics observed by one batch-norm layer during a training pass.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BatchStats<T>,
}

#[derive(Debug, Clone)]
enum Frozen<T: Element> {
    Value(Tensor<T>),
    Choice(Vec<usize>),
}

/// Log of detached values and discrete choices made during one forward pass.
///
/// A finite-difference check records them on the unperturbed pass and replays
/// them on every perturbed pass, so the numeric derivative treats them as the
/// constants the analytic gradient assumes.
#[derive(Debug, Clone, Default)]
pub struct Replay<T: Element> {
    entries: Vec<Frozen<T>>,
    cursor: usize,
    frozen: bool,
}

impl<T: Element> Replay<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), cursor: 0, frozen: false }
    }

    /// Starts the next pass; everything recorded so far becomes fixed.
    pub fn rewind(&mut self) {
        self.frozen = !self.entries.is_empty();
        self.cursor = 0;
    }

    fn next(&mut self) -> Option<&Frozen<T>> {
        if !self.frozen {
            return None;
        }
        let e = self.entries.get(self.cursor);
        self.cursor += 1;
        e
    }
}

/// Everything a forward pass needs: the tape, read access to parameters,
/// the mode flag and the random stream.
pub struct Ctx<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub train: bool,
    pub rng: &'a mut ChaCha8Rng,
    bound: Vec<Option<Var>>,
    bn_updates: Vec<BnUpdate<T>>,
    replay: Option<&'a mut Replay<T>>,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, train: bool, rng: &'a mut ChaCha8Rng) -> Self {
        let bound = vec![None; store.params.len()];
        Self { tape, store, train, rng, bound, bn_updates: Vec::new(), replay: None }
    }

    /// Uses existing tape variables for the given parameters instead of
    /// fresh leaves.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn with_replay(mut self, replay: &'a mut Replay<T>) -> Self {
        self.replay = Some(replay);
        self
    }

    /// Tape variable for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.params[id.0].value.clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameters that took part in this pass with their tape variables.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        self.bound.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v))).collect()
    }

    /// Gradient for every parameter; `None` for parameters not on the tape.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound.iter().map(|v| v.and_then(|v| grads.get(v).cloned())).collect()
    }

    pub fn record_bn(&mut self, update: BnUpdate<T>) {
        self.bn_updates.push(update);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradient barrier; under replay the recorded value is substituted.
    pub fn detach(&mut self, x: Var) -> Var {
        if let Some(r) = self.replay.as_deref_mut() {
            if let Some(Frozen::Value(t)) = r.next() {
                let t = t.clone();
                return self.tape.constant(t);
            }
            if !r.frozen {
                r.entries.push(Frozen::Value(self.tape.value(x).clone()));
            }
        }
        self.tape.stop_gradient(x)
    }

    /// A discrete decision (argmax, selection) that replay keeps fixed.
    pub fn choice(&mut self, compute: impl FnOnce(&Tape<T>) -> Vec<usize>) -> Vec<usize> {
        if let Some(r) = self.replay.as_deref_mut() {
            if let Some(Frozen::Choice(c)) = r.next() {
                return c.clone();
            }
            let c = compute(self.tape);
            if !r.frozen {
                r.entries.push(Frozen::Choice(c.clone()));
            }
            return c;
        }
        compute(self.tape)
    }
}

/// He-style normal initialization with standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal<T: Element>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

pub fn normal<T: Element>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("valid shape")
}
