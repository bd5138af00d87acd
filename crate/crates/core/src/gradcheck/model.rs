//! Finite-difference check of the full training loss of a tiny network.

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_fn, CheckReport};
use crate::error::Result;
use crate::model::{build_network, Model, NetworkSpec};
use crate::nn::{Ctx, Replay};
use crate::routing::RoutingMode;
use crate::tensor::Tensor;

const PROBES: usize = 12;
const BATCH: usize = 4;

/// The total loss of [`NetworkSpec::micro`] against its parameters, in train
/// mode, once per routing mode that trains critics and once for uniform
/// routing.
pub fn suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for mode in [RoutingMode::WsPlusCe, RoutingMode::WsOnly, RoutingMode::CeOnly, RoutingMode::Uniform] {
        let mut spec = NetworkSpec::micro();
        spec.routing = mode;
        out.push(check_model(&format!("micro network {}", mode.name()), &spec, seed)?);
    }
    Ok(out)
}

pub fn check_model(name: &str, spec: &NetworkSpec, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model: Model<f64> = build_network(spec, &mut rng)?;
    model.refresh_spectral(5);
    let n = BATCH * spec.in_channels * spec.height * spec.width;
    let pixels: Vec<f64> = (0..n).map(|i| ((i * 37 + 11) % 97) as f64 / 96.0).collect();
    let images = Tensor::from_f64(&[BATCH, spec.in_channels, spec.height, spec.width], &pixels)?;
    let labels: Vec<usize> = (0..BATCH).map(|i| i % spec.n_classes).collect();

    let ids: Vec<_> = model.store.ids().collect();
    let inputs: Vec<(&str, Tensor<f64>)> =
        ids.iter().map(|&id| (model.store.param(id).name.as_str(), model.store.value(id).clone())).collect();
    let replay = RefCell::new(Replay::new());
    check_fn(name, &inputs, PROBES, |tape, vars| {
        let mut replay = replay.borrow_mut();
        replay.rewind();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut ctx = Ctx::new(tape, &model.store, true, &mut rng).with_replay(&mut replay);
        for (i, &id) in ids.iter().enumerate() {
            ctx.bind(id, vars[i]);
        }
        let x = ctx.tape.constant(images.clone());
        let out = model.net.forward(&mut ctx, x)?;
        let (loss, _) = model.net.loss(&mut ctx, &out, x, &labels)?;
        Ok(loss)
    })
}
