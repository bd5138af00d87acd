use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wcaps_core::capsule::{squash, squash_vec, tilt, tilt_vec, CapsTrans, Nonlinearity};
use wcaps_core::nn::{Ctx, ParamStore};
use wcaps_core::{Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Runs a tape non-linearity on a batch of row vectors `[n, k]`.
fn on_tape(
    rows: &[Vec<f64>],
    f: fn(&mut Tape<f64>, wcaps_core::Var, usize) -> wcaps_core::Result<wcaps_core::Var>,
) -> Vec<Vec<f64>> {
    let k = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[rows.len(), k], flat).unwrap());
    let y = f(&mut tape, x, 1).unwrap();
    tape.value(y).data().chunks(k).map(|c| c.to_vec()).collect()
}

#[test]
fn squash_examples() {
    let out = on_tape(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![3.0, 4.0]], squash);
    assert!(close(&out[0], &[0.0, 0.0], 0.0));
    assert!(close(&out[1], &[0.5, 0.0], 1e-9));
    assert!(close(&out[2], &[0.576923, 0.769230], 1e-5));
    // Direct evaluation: 25/26 times the unit direction.
    assert!(close(&out[2], &[25.0 / 26.0 * 0.6, 25.0 / 26.0 * 0.8], 1e-9));
}

#[test]
fn tilt_examples() {
    let out = on_tape(&[vec![0.0, 0.0], vec![2.0, 2.0], vec![1.0, -1.0]], tilt);
    assert!(close(&out[0], &[0.0, 0.0], 0.0));
    assert!(close(&out[1], &[1.5, 1.5], 1e-12));
    // softmax(1, -1) = (0.880797, 0.119203)
    let s = 1.0 / (1.0 + (-2.0f64).exp());
    assert!(close(&out[2], &[0.94040, -0.55960], 1e-5));
    assert!(close(&out[2], &[0.5 * (1.0 + s), -0.5 * (2.0 - s)], 1e-12));
}

#[test]
fn tape_matches_scalar_references() {
    let mut r = rng(3);
    let rows: Vec<Vec<f64>> = (0..50).map(|_| (0..6).map(|_| r.gen_range(-3.0..3.0)).collect()).collect();
    for (got, x) in on_tape(&rows, squash).iter().zip(&rows) {
        assert!(close(got, &squash_vec(x), 1e-12));
    }
    for (got, x) in on_tape(&rows, tilt).iter().zip(&rows) {
        assert!(close(got, &tilt_vec(x), 1e-12));
    }
}

#[test]
fn tilt_factors_lie_strictly_between_half_and_one() {
    let mut r = rng(4);
    let rows: Vec<Vec<f64>> = (0..100_000).map(|_| (0..8).map(|_| r.gen_range(-5.0..5.0)).collect()).collect();
    for (out, x) in on_tape(&rows, tilt).iter().zip(&rows) {
        for (o, v) in out.iter().zip(x) {
            let f = o / v;
            assert!(f > 0.5 && f < 1.0, "factor {f}");
        }
    }
}

#[test]
fn squash_of_zero_has_finite_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[1, 3]));
    let y = squash(&mut tape, x, 1).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().is_finite());
}

#[test]
fn caps_trans_shapes() {
    let mut r = rng(5);
    let mut store = ParamStore::<f32>::new();
    let trans = CapsTrans::new(&mut store, "caps", 3, 6, 8, Nonlinearity::Tilt, &mut r).unwrap();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, true, &mut r);
    let feats: Vec<_> =
        (0..3).map(|i| ctx.tape.constant(Tensor::full(&[2, 6, 14, 14], 0.1 * i as f32 + 0.3))).collect();
    let y = trans.forward(&mut ctx, &feats).unwrap();
    assert_eq!(ctx.tape.shape(y), &[2, 3, 8, 14, 14]);
    assert!(trans.forward(&mut ctx, &feats[..2]).is_err());
}

#[test]
fn caps_trans_tilt_scales_each_vector_by_a_factor_in_range() {
    let mut r = rng(6);
    let mut store = ParamStore::<f64>::new();
    let trans = CapsTrans::new(&mut store, "caps", 2, 3, 4, Nonlinearity::Tilt, &mut r).unwrap();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, false, &mut r);
    let n = 2 * 3 * 5 * 5;
    let feats: Vec<_> = (0..2)
        .map(|b| {
            let data = (0..n).map(|i| ((i * 7 + b * 13) % 11) as f64 / 5.0 - 1.0).collect();
            ctx.tape.constant(Tensor::new(&[2, 3, 5, 5], data).unwrap())
        })
        .collect();
    let y = trans.forward(&mut ctx, &feats).unwrap();
    // Recompute the pre-activation by hand: per-block conv+, then the shared norm.
    let mut pre = Vec::new();
    for (conv, &f) in trans.convs.iter().zip(&feats) {
        pre.push(conv.forward(&mut ctx, f).unwrap());
    }
    let stacked = ctx.tape.stack1(&pre).unwrap();
    let flat = ctx.tape.reshape(stacked, &[4, 4, 5, 5]).unwrap();
    let z = trans.shared_bn.forward(&mut ctx, flat).unwrap();
    let out = tape.value(y).clone();
    let z = tape.value(z).clone();
    assert_eq!(out.shape(), &[2, 2, 4, 5, 5]);
    let mut checked = 0;
    for (o, zi) in out.data().iter().zip(z.data()) {
        if zi.abs() > 1e-9 {
            let f = o / zi;
            assert!(f > 0.5 && f < 1.0, "factor {f}");
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn shared_batch_norm_affects_every_block_identically() {
    let mut r = rng(7);
    let mut store = ParamStore::<f64>::new();
    let trans = CapsTrans::new(&mut store, "caps", 3, 2, 4, Nonlinearity::Squash, &mut r).unwrap();
    // Identical conv weights and identical inputs per block.
    let w = store.value(trans.convs[0].conv.weight).clone();
    for conv in &trans.convs[1..] {
        *store.value_mut(conv.conv.weight) = w.clone();
    }
    let x = Tensor::new(&[2, 2, 3, 3], (0..36).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let run = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let mut rr = rng(0);
        let mut ctx = Ctx::new(&mut tape, store, false, &mut rr);
        let feats: Vec<_> = (0..3).map(|_| ctx.tape.constant(x.clone())).collect();
        let y = trans.forward(&mut ctx, &feats).unwrap();
        tape.value(y).clone()
    };
    let block = |t: &Tensor<f64>, b: usize, n: usize| -> Vec<f64> {
        let len = 4 * 9;
        t.data()[(b * 3 + n) * len..(b * 3 + n + 1) * len].to_vec()
    };
    let before = run(&store);
    let gamma = trans.shared_bn.gamma;
    let scaled = store.value(gamma).map(|g| g * 2.5);
    *store.value_mut(gamma) = scaled;
    let after = run(&store);
    for b in 0..2 {
        let (b0, a0) = (block(&before, b, 0), block(&after, b, 0));
        assert!(!close(&b0, &a0, 1e-6));
        for n in 1..3 {
            assert!(close(&block(&before, b, n), &b0, 1e-12));
            assert!(close(&block(&after, b, n), &a0, 1e-12));
        }
    }
    assert_eq!(store.ids().filter(|&id| store.param(id).name.contains("shared_bn.gamma")).count(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn squash_norm_is_below_one_and_preserves_direction(x in prop::collection::vec(-50.0f64..50.0, 1..10)) {
        let y = squash_vec(&x);
        let (nx, ny) = (norm(&x), norm(&y));
        prop_assert!(ny < 1.0);
        prop_assert!((ny - nx * nx / (1.0 + nx * nx)).abs() < 1e-9);
        if nx > 1e-6 {
            for (a, b) in x.iter().zip(&y) {
                prop_assert!((a / nx - b / ny).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn squash_is_monotone_in_norm(x in prop::collection::vec(-5.0f64..5.0, 1..8), lambda in 1.0f64..4.0) {
        let scaled: Vec<f64> = x.iter().map(|v| v * lambda).collect();
        prop_assert!(norm(&squash_vec(&scaled)) >= norm(&squash_vec(&x)) - 1e-12);
    }

    #[test]
    fn tilt_shrinks_components_but_by_less_than_half(x in prop::collection::vec(-8.0f64..8.0, 2..10)) {
        let y = tilt_vec(&x);
        for (a, b) in x.iter().zip(&y) {
            if *a != 0.0 {
                prop_assert!(b.abs() < a.abs() && b.abs() > a.abs() / 2.0);
                prop_assert_eq!(a.signum(), b.signum());
            }
        }
    }

    #[test]
    fn tilt_is_permutation_equivariant(x in prop::collection::vec(-10.0f64..10.0, 2..8), seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..x.len()).collect();
        perm.shuffle(&mut rng(seed));
        let px: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
        let y = tilt_vec(&x);
        let py: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        prop_assert!(close(&tilt_vec(&px), &py, 1e-12));
    }
}
