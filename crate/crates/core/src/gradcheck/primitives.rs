//! Finite-difference suite over every tape primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_fn, CheckReport};
use crate::autodiff::Padding;
use crate::error::Result;
use crate::tensor::Tensor;

const PROBES: usize = 64;

/// Random values bounded away from zero so relu kinks stay out of reach of
/// the finite-difference step.
pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

fn positive_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random_tensor(rng, shape).map(|v| v.abs() + 0.5)
}

/// Weighted sum so that every output element gets a distinct upstream gradient.
pub(crate) fn weighted_sum(tape: &mut crate::Tape<f64>, y: crate::Var, seed: u64) -> Result<crate::Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = random_tensor(&mut rng, &shape);
    let wv = tape.constant(w);
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

pub fn suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let r = &mut rng;

    let a = random_tensor(r, &[2, 3, 4]);
    let b = random_tensor(r, &[3, 1]);
    out.push(check_fn("add (broadcast)", &[("a", a.clone()), ("b", b.clone())], PROBES, |t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y, 1)
    })?);
    out.push(check_fn("sub (broadcast)", &[("a", a.clone()), ("b", b.clone())], PROBES, |t, v| {
        let y = t.sub(v[0], v[1])?;
        weighted_sum(t, y, 2)
    })?);
    out.push(check_fn("mul (broadcast)", &[("a", a.clone()), ("b", b.clone())], PROBES, |t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y, 3)
    })?);
    let pb = positive_tensor(r, &[3, 1]);
    out.push(check_fn("div (broadcast)", &[("a", a.clone()), ("b", pb)], PROBES, |t, v| {
        let y = t.div(v[0], v[1])?;
        weighted_sum(t, y, 4)
    })?);
    out.push(check_fn("scale", &[("x", a.clone())], PROBES, |t, v| {
        let y = t.scale(v[0], -1.7);
        weighted_sum(t, y, 5)
    })?);
    out.push(check_fn("add_scalar", &[("x", a.clone())], PROBES, |t, v| {
        let y = t.add_scalar(v[0], 0.3);
        weighted_sum(t, y, 6)
    })?);
    out.push(check_fn("relu", &[("x", a.clone())], PROBES, |t, v| {
        let y = t.relu(v[0]);
        weighted_sum(t, y, 7)
    })?);
    out.push(check_fn("sigmoid", &[("x", a.clone())], PROBES, |t, v| {
        let y = t.sigmoid(v[0]);
        weighted_sum(t, y, 8)
    })?);
    out.push(check_fn("exp", &[("x", a.clone())], PROBES, |t, v| {
        let y = t.exp(v[0]);
        weighted_sum(t, y, 9)
    })?);
    let pa = positive_tensor(r, &[2, 3, 4]);
    out.push(check_fn("ln", &[("x", pa.clone())], PROBES, |t, v| {
        let y = t.ln(v[0]);
        weighted_sum(t, y, 10)
    })?);
    out.push(check_fn("sqrt", &[("x", pa)], PROBES, |t, v| {
        let y = t.sqrt(v[0]);
        weighted_sum(t, y, 11)
    })?);
    out.push(check_fn("square", &[("x", a.clone())], PROBES, |t, v| {
        let y = t.square(v[0]);
        weighted_sum(t, y, 12)
    })?);
    for axis in 0..3 {
        out.push(check_fn(&format!("softmax axis {axis}"), &[("x", a.clone())], PROBES, |t, v| {
            let y = t.softmax(v[0], axis)?;
            weighted_sum(t, y, 13)
        })?);
    }
    out.push(check_fn("sum_axis", &[("x", a.clone())], PROBES, |t, v| {
        let y = t.sum_axis(v[0], 1, false)?;
        weighted_sum(t, y, 14)
    })?);
    out.push(check_fn("mean", &[("x", a.clone())], PROBES, |t, v| {
        let y = t.square(v[0]);
        Ok(t.mean(y))
    })?);
    out.push(check_fn("permute", &[("x", a.clone())], PROBES, |t, v| {
        let y = t.permute(v[0], &[2, 0, 1])?;
        weighted_sum(t, y, 15)
    })?);
    let c = random_tensor(r, &[2, 2, 4]);
    out.push(check_fn("concat", &[("a", a.clone()), ("c", c)], PROBES, |t, v| {
        let y = t.concat(&[v[0], v[1]], 1)?;
        weighted_sum(t, y, 16)
    })?);
    let m1 = random_tensor(r, &[3, 4]);
    let m2 = random_tensor(r, &[4, 5]);
    out.push(check_fn("matmul", &[("a", m1), ("b", m2)], PROBES, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 17)
    })?);
    let x = random_tensor(r, &[2, 3, 5, 5]);
    let w = random_tensor(r, &[4, 3, 3, 3]);
    for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid), (2, Padding::Valid)] {
        out.push(check_fn(
            &format!("conv2d stride {stride} {padding:?}"),
            &[("x", x.clone()), ("w", w.clone())],
            PROBES,
            |t, v| {
                let y = t.conv2d(v[0], v[1], stride, padding)?;
                weighted_sum(t, y, 18)
            },
        )?);
    }
    let w1 = random_tensor(r, &[4, 3, 1, 1]);
    out.push(check_fn("conv2d 1x1", &[("x", x.clone()), ("w", w1)], PROBES, |t, v| {
        let y = t.conv2d(v[0], v[1], 1, Padding::Same)?;
        weighted_sum(t, y, 19)
    })?);
    let xt = random_tensor(r, &[2, 4, 3, 3]);
    let wt = random_tensor(r, &[4, 2, 3, 3]);
    out.push(check_fn("conv2d_transpose stride 2", &[("x", xt), ("w", wt)], PROBES, |t, v| {
        let y = t.conv2d_transpose(v[0], v[1], 2)?;
        weighted_sum(t, y, 20)
    })?);
    let bx = random_tensor(r, &[4, 3, 2, 2]);
    let gamma = positive_tensor(r, &[3]);
    let beta = random_tensor(r, &[3]);
    out.push(check_fn(
        "batch_norm train",
        &[("x", bx.clone()), ("gamma", gamma.clone()), ("beta", beta.clone())],
        PROBES,
        |t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, 21)
        },
    )?);
    out.push(check_fn("batch_norm eval", &[("x", bx), ("gamma", gamma), ("beta", beta)], PROBES, |t, v| {
        let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.7, 2.0], 1e-5)?;
        weighted_sum(t, y, 22)
    })?);
    out.push(check_fn("dropout (fixed mask)", &[("x", a.clone())], PROBES, |t, v| {
        let mut mrng = ChaCha8Rng::seed_from_u64(23);
        let y = t.dropout(v[0], 0.3, true, &mut mrng)?;
        weighted_sum(t, y, 23)
    })?);
    // finite differences would also move a detached copy of `x`, so the
    // detached operand is an independent constant that still flows through a leaf
    let detached = random_tensor(r, &[2, 3, 4]);
    out.push(check_fn("stop_gradient", &[("x", a.clone())], PROBES, |t, v| {
        let k = t.leaf(detached.clone());
        let s = t.stop_gradient(k);
        let y = t.mul(s, v[0])?;
        weighted_sum(t, y, 24)
    })?);
    let sw = random_tensor(r, &[4, 3, 3, 3]);
    let u: Vec<f64> = (0..4).map(|i| 0.5 + 0.1 * i as f64).collect();
    let vv: Vec<f64> = (0..27).map(|i| ((i % 5) as f64 - 2.0) * 0.1 + 0.05).collect();
    out.push(check_fn("spectral_weight", &[("w", sw)], PROBES, |t, v| {
        let y = t.spectral_weight(v[0], &u, &vv)?;
        weighted_sum(t, y, 25)
    })?);
    let logits = random_tensor(r, &[3, 5]);
    out.push(check_fn("softmax_cross_entropy", &[("logits", logits)], PROBES, |t, v| {
        t.softmax_cross_entropy(v[0], &[0, 4, 2])
    })?);
    let ma = random_tensor(r, &[2, 3]);
    let mb = random_tensor(r, &[2, 3]);
    out.push(check_fn("mse", &[("a", ma), ("b", mb)], PROBES, |t, v| t.mse(v[0], v[1]))?);
    let gx = random_tensor(r, &[3, 4, 2]);
    out.push(check_fn("gather_rows", &[("x", gx)], PROBES, |t, v| {
        let y = t.gather_rows(v[0], &[1, 3, 1])?;
        weighted_sum(t, y, 26)
    })?);
    out.push(check_fn("reshape + reuse", &[("x", a)], PROBES, |t, v| {
        let y = t.reshape(v[0], &[6, 4])?;
        let z = t.mul(y, y)?;
        let s = t.add(z, y)?;
        weighted_sum(t, s, 27)
    })?);
    Ok(out)
}
