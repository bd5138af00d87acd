//! Finite-difference checks of composite layers with all their parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::primitives::{random_tensor, weighted_sum};
use super::{check_fn, CheckReport};
use crate::capsule::{CapsTrans, Nonlinearity};
use crate::error::Result;
use crate::nn::{ConvPlus, Ctx, DenseBlock, DenseLayer, Group, ParamStore};
use crate::routing::{Critic, FeatureCritic, FinalCritic};
use crate::tensor::Tensor;
use crate::Var;

const PROBES: usize = 24;

/// Checks `f` with respect to `x` (unless `detached_input`) and every
/// parameter in `store`. The layer runs in train mode with a fixed random
/// stream, so dropout masks repeat across evaluations.
fn check_layer<F>(
    name: &str,
    store: &ParamStore<f64>,
    x: Tensor<f64>,
    detached_input: bool,
    f: F,
) -> Result<CheckReport>
where
    F: Fn(&mut Ctx<'_, f64>, Var) -> Result<Var>,
{
    let ids: Vec<_> = store.ids().collect();
    let mut inputs: Vec<(&str, Tensor<f64>)> = Vec::new();
    if !detached_input {
        inputs.push(("input", x.clone()));
    }
    inputs.extend(ids.iter().map(|&id| (store.param(id).name.as_str(), store.value(id).clone())));
    let offset = usize::from(!detached_input);
    check_fn(name, &inputs, PROBES, |tape, vars| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut ctx = Ctx::new(tape, store, true, &mut rng);
        for (i, &id) in ids.iter().enumerate() {
            ctx.bind(id, vars[offset + i]);
        }
        let input = if detached_input { ctx.tape.constant(x.clone()) } else { vars[0] };
        let y = f(&mut ctx, input)?;
        weighted_sum(ctx.tape, y, 31)
    })
}

pub fn suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    for stride in [1, 2] {
        let mut store = ParamStore::new();
        let layer = ConvPlus::new(&mut store, "conv+", 3, 4, 3, stride, Group::Classifier, r)?;
        let x = random_tensor(r, &[3, 3, 6, 6]);
        out.push(check_layer(&format!("conv+ stride {stride}"), &store, x, false, |ctx, x| layer.forward(ctx, x))?);
    }

    for stride in [1, 2] {
        let mut store = ParamStore::new();
        let layer = DenseLayer::new(&mut store, "dense", 3, 2, stride, r)?;
        let x = random_tensor(r, &[3, 3, 6, 6]);
        out.push(check_layer(&format!("dense layer stride {stride}"), &store, x, false, |ctx, x| {
            layer.forward(ctx, x)
        })?);
    }

    let mut store = ParamStore::new();
    let block = DenseBlock::new(&mut store, "block", 2, 2, 3, 2, r)?;
    let x = random_tensor(r, &[2, 2, 6, 6]);
    out.push(check_layer("dense block", &store, x, false, |ctx, x| block.forward(ctx, x))?);

    for nl in [Nonlinearity::Tilt, Nonlinearity::Squash] {
        let mut store = ParamStore::new();
        let trans = CapsTrans::new(&mut store, "caps", 2, 3, 4, nl, r)?;
        let x = random_tensor(r, &[2, 3, 3, 3]);
        out.push(check_layer(&format!("capstrans {}", nl.name()), &store, x, false, |ctx, x| {
            let y = ctx.tape.scale(x, -0.8);
            trans.forward(ctx, &[x, y])
        })?);
    }

    let mut store = ParamStore::new();
    let critic = Critic::Feature(FeatureCritic::new(&mut store, "critic", 4, 4, 4, r)?);
    refresh(&critic, &mut store);
    let caps = random_tensor(r, &[3, 2, 4, 4, 4]);
    out.push(check_layer("feature critic stack", &store, caps, true, |ctx, c| critic.fitness(ctx, c))?);

    let mut store = ParamStore::new();
    let critic = Critic::Final(FinalCritic::new(&mut store, "critic", 4, r)?);
    refresh(&critic, &mut store);
    let caps = random_tensor(r, &[2, 2, 4, 2, 2]);
    out.push(check_layer("final critic stack", &store, caps, true, |ctx, c| critic.fitness(ctx, c))?);

    Ok(out)
}

fn refresh(critic: &Critic, store: &mut ParamStore<f64>) {
    for layer in critic.spectral_layers() {
        layer.power_iterate(store, 5);
    }
}
