use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wcaps_core::gradcheck::{self, relative_error};
use wcaps_core::{Error, Padding, Tape, Tensor};

fn t32(shape: &[usize], v: &[f64]) -> Tensor<f32> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(t32(&[3], &[-1.0, 0.0, 2.0]));
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);

    let a = t.constant(t32(&[3], &[1.0, 2.0, 3.0]));
    let b = t.constant(t32(&[3], &[2.0, 2.0, 2.0]));
    let m = t.mul(a, b).unwrap();
    assert_eq!(t.value(m).data(), &[2.0, 4.0, 6.0]);

    let z = t.constant(t32(&[1], &[0.0]));
    let s = t.sigmoid(z);
    assert_eq!(t.value(s).data(), &[0.5]);
}

#[test]
fn broadcast_mismatch_is_an_error() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4]));
    assert!(matches!(t.add(a, b), Err(Error::ShapeMismatch(_))));
}

#[test]
fn softmax_examples() {
    let mut t = Tape::<f64>::new();
    let cases: [(&[f64], &[f64]); 3] =
        [(&[0.0, 0.0], &[0.5, 0.5]), (&[0.0, 3f64.ln()], &[0.25, 0.75]), (&[1000.0, 1000.0], &[0.5, 0.5])];
    for (input, expected) in cases {
        let x = t.constant(Tensor::from_f64(&[2], input).unwrap());
        let y = t.softmax(x, 0).unwrap();
        for (a, b) in t.value(y).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{input:?} -> {:?}", t.value(y));
        }
    }
}

#[test]
fn softmax_is_normalized_and_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let v: Vec<f64> = (0..12).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let c = rng.gen_range(-100.0..100.0);
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_f64(&[3, 4], &v).unwrap());
        let xs = t.add_scalar(x, c);
        let y = t.softmax(x, 1).unwrap();
        let ys = t.softmax(xs, 1).unwrap();
        for row in t.value(y).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(t.value(y).max_abs_diff(t.value(ys)) < 1e-9);
    }
}

#[test]
fn matmul_examples() {
    let mut t = Tape::<f32>::new();
    let i = t.constant(Tensor::eye(2));
    let m = t.constant(t32(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = t.matmul(i, m).unwrap();
    assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = t.constant(t32(&[1, 2], &[1.0, 2.0]));
    let b = t.constant(t32(&[2, 1], &[3.0, 4.0]));
    let p = t.matmul(a, b).unwrap();
    assert_eq!(t.value(p).data(), &[11.0]);

    let bad = t.constant(Tensor::zeros(&[3, 1]));
    assert!(matches!(t.matmul(a, bad), Err(Error::ShapeMismatch(_))));
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transpose() {
    // d sum(A·B) / dA = 1·Bᵀ, checked against central differences
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let at = Tensor::from_f64(&[2, 3], &a).unwrap();
    let bt = Tensor::from_f64(&[3, 4], &b).unwrap();
    let mut t = Tape::<f64>::new();
    let av = t.leaf(at.clone());
    let bv = t.constant(bt.clone());
    let p = t.matmul(av, bv).unwrap();
    let s = t.sum(p);
    let g = t.backward(s).unwrap().wrt(&t, av);

    let loss = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    s += a[i * 3 + k] * b[k * 4 + j];
                }
            }
        }
        s
    };
    let h = 1e-5;
    let mut numeric = Vec::new();
    for i in 0..6 {
        let mut up = a.clone();
        up[i] += h;
        let mut down = a.clone();
        down[i] -= h;
        numeric.push((loss(&up) - loss(&down)) / (2.0 * h));
    }
    assert!(relative_error(g.data(), &numeric) < 1e-8);
    for i in 0..2 {
        for k in 0..3 {
            let row_sum: f64 = (0..4).map(|j| b[k * 4 + j]).sum();
            assert!((g.data()[i * 3 + k] - row_sum).abs() < 1e-12);
        }
    }
}

#[test]
fn conv2d_examples() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(t32(&[1, 1, 1, 1], &[5.0]));
    let w = t.constant(t32(&[1, 1, 1, 1], &[3.0]));
    let y = t.conv2d(x, w, 1, Padding::Valid).unwrap();
    assert_eq!(t.value(y).data(), &[15.0]);

    let x = t.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = t.constant(t32(&[1, 1, 1, 1], &[2.0]));
    let y = t.conv2d(x, w, 1, Padding::Valid).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 3, 3]);
    assert!(t.value(y).data().iter().all(|&v| v == 2.0));

    let x = t.constant(Tensor::ones(&[1, 1, 5, 5]));
    let w = t.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = t.conv2d(x, w, 2, Padding::Valid).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 2, 2]);
    assert!(t.value(y).data().iter().all(|&v| v == 9.0));

    let small = t.constant(Tensor::ones(&[1, 1, 2, 2]));
    assert!(matches!(t.conv2d(small, w, 1, Padding::Valid), Err(Error::ShapeMismatch(_))));
    let wrong_c = t.constant(Tensor::ones(&[1, 2, 1, 1]));
    assert!(t.conv2d(x, wrong_c, 1, Padding::Same).is_err());
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, c, h, w, o, k) = (2, 3, 6, 5, 4, 3);
    let xv: Vec<f64> = (0..b * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wv: Vec<f64> = (0..o * c * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for stride in [1, 2] {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_f64(&[b, c, h, w], &xv).unwrap());
        let wt = t.constant(Tensor::from_f64(&[o, c, k, k], &wv).unwrap());
        let y = t.conv2d(x, wt, stride, Padding::Same).unwrap();
        let ys = t.shape(y).to_vec();
        let (ho, wo) = (ys[2], ys[3]);
        assert_eq!((ho, wo), (h.div_ceil(stride), w.div_ceil(stride)));
        let pad_t = (((ho - 1) * stride + k).saturating_sub(h)) / 2;
        let pad_l = (((wo - 1) * stride + k).saturating_sub(w)) / 2;
        for bi in 0..b {
            for oi in 0..o {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ii = (i * stride + ki) as isize - pad_t as isize;
                                    let jj = (j * stride + kj) as isize - pad_l as isize;
                                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                        continue;
                                    }
                                    acc += xv[((bi * c + ci) * h + ii as usize) * w + jj as usize]
                                        * wv[((oi * c + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                        let got = t.value(y).data()[((bi * o + oi) * ho + i) * wo + j];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn conv_transpose_is_the_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for stride in [1, 2] {
        for _ in 0..5 {
            let x: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..5 * 3 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ho = 4 / stride;
            let y: Vec<f64> = (0..2 * 5 * ho * ho).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut t = Tape::<f64>::new();
            let xv = t.constant(Tensor::from_f64(&[2, 3, 4, 4], &x).unwrap());
            let wv = t.constant(Tensor::from_f64(&[5, 3, 3, 3], &w).unwrap());
            let yv = t.constant(Tensor::from_f64(&[2, 5, ho, ho], &y).unwrap());
            let cx = t.conv2d(xv, wv, stride, Padding::Same).unwrap();
            let ty = t.conv2d_transpose(yv, wv, stride).unwrap();
            let lhs: f64 = t.value(cx).data().iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = t.value(ty).data().iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-5, "stride {stride}: {lhs} vs {rhs}");
        }
    }
}

#[test]
fn conv_transpose_examples() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let w = t.constant(Tensor::ones(&[2, 3, 3, 3]));
    let y = t.conv2d_transpose(x, w, 2).unwrap();
    assert_eq!(t.shape(y), &[1, 3, 4, 4]);
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    let bad = t.constant(Tensor::ones(&[3, 3, 3, 3]));
    assert!(t.conv2d_transpose(x, bad, 2).is_err());
}

fn per_channel_moments(v: &[f64], n: usize, c: usize, inner: usize) -> Vec<(f64, f64)> {
    (0..c)
        .map(|ch| {
            let vals: Vec<f64> = (0..n)
                .flat_map(|b| (0..inner).map(move |i| (b, i)))
                .map(|(b, i)| v[(b * c + ch) * inner + i])
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            (m, var.sqrt())
        })
        .collect()
}

#[test]
fn batch_norm_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, c, inner) = (8, 3, 4);
    let data: Vec<f64> = (0..n * c * inner).map(|_| 7.0 + rng.gen_range(-2.0..2.0)).collect();
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_f64(&[n, c, 2, 2], &data).unwrap());
    let g1 = t.constant(Tensor::ones(&[c]));
    let b0 = t.constant(Tensor::zeros(&[c]));
    let (y, stats) = t.batch_norm_train(x, g1, b0, 1e-5).unwrap();
    for (m, _) in per_channel_moments(t.value(y).data(), n, c, inner) {
        assert!(m.abs() < 1e-6);
    }
    assert!(stats.mean.iter().all(|&m| (m - 7.0).abs() < 1.0));

    // constant channel: variance is floored by eps, output is zero
    let xc = t.constant(Tensor::full(&[4, 1, 2, 2], 3.0));
    let g = t.constant(Tensor::ones(&[1]));
    let b = t.constant(Tensor::zeros(&[1]));
    let (yc, _) = t.batch_norm_train(xc, g, b, 1e-5).unwrap();
    assert!(t.value(yc).data().iter().all(|&v| v == 0.0));

    // affine on standardized input
    let g2 = t.constant(Tensor::full(&[c], 2.0));
    let b1 = t.constant(Tensor::ones(&[c]));
    let (ya, _) = t.batch_norm_train(x, g2, b1, 1e-5).unwrap();
    for (m, s) in per_channel_moments(t.value(ya).data(), n, c, inner) {
        assert!((m - 1.0).abs() < 1e-4);
        assert!((s - 2.0).abs() < 1e-4);
    }
}

#[test]
fn batch_norm_rejects_single_sample_batches() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::ones(&[1, 2, 3, 3]));
    let g = t.constant(Tensor::ones(&[2]));
    let b = t.constant(Tensor::zeros(&[2]));
    assert!(matches!(t.batch_norm_train(x, g, b, 1e-5), Err(Error::DegenerateBatch(1))));
    assert!(t.batch_norm_eval(x, g, b, &[0.0, 0.0], &[1.0, 1.0], 1e-5).is_ok());
}

#[test]
fn dropout_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::ones(&[1000]));
    assert_eq!(t.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(t.dropout(x, 0.3, false, &mut rng).unwrap(), x);

    let n = 1_000_000;
    let big = t.constant(Tensor::ones(&[n]));
    let d = t.dropout(big, 0.5, true, &mut rng).unwrap();
    let v = t.value(d).data();
    let survivors = v.iter().filter(|&&e| e != 0.0).count() as f64 / n as f64;
    let mean = v.iter().sum::<f64>() / n as f64;
    assert!((survivors - 0.5).abs() < 0.01, "survivor fraction {survivors}");
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
}

#[test]
fn backward_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
    let sq = t.square(x);
    let loss = t.sum(sq);
    let g = t.backward(loss).unwrap();
    assert_eq!(g.wrt(&t, x).data(), &[2.0, 4.0, 6.0]);

    // detach: d sum(sg(x)·x)/dx = sg(x)
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_f64(&[3], &[1.5, -2.0, 0.5]).unwrap());
    let s = t.stop_gradient(x);
    let p = t.mul(s, x).unwrap();
    let loss = t.sum(p);
    let g = t.backward(loss).unwrap();
    assert_eq!(g.wrt(&t, x).data(), &[1.5, -2.0, 0.5]);

    // non-scalar loss
    assert!(matches!(t.backward(p), Err(Error::NotScalar(_))));
}

#[test]
fn backward_accumulates_reuse_and_zeroes_unreachable() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_f64(&[2], &[0.3, -0.7]).unwrap());
    let unused = t.leaf(Tensor::ones(&[4]));
    let y = t.add(x, x).unwrap(); // 2·x
    let loss = t.sum(y);
    let g = t.backward(loss).unwrap();
    assert_eq!(g.wrt(&t, x).data(), &[2.0, 2.0]);
    assert!(g.get(unused).is_none());
    assert_eq!(g.wrt(&t, unused).data(), &[0.0; 4]);
}

#[test]
fn stop_gradient_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let s = t.stop_gradient(x);
    assert_eq!(t.value(s).data(), &[1.0, 2.0]);
    let loss = t.sum(s);
    let g = t.backward(loss).unwrap();
    assert_eq!(g.wrt(&t, x).data(), &[0.0, 0.0]);
}

#[test]
fn squared_loss_through_cross_entropy_helpers() {
    let mut t = Tape::<f64>::new();
    let l = t.constant(Tensor::from_f64(&[2, 3], &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap());
    let ce = t.softmax_cross_entropy(l, &[1, 2]).unwrap();
    let p3 = (3.0f64).exp() / (1f64.exp() + 2f64.exp() + 3f64.exp());
    let expect = (3f64.ln() - p3.ln()) / 2.0;
    assert!((t.value(ce).item() - expect).abs() < 1e-12);
    assert!(t.softmax_cross_entropy(l, &[3, 0]).is_err());
}

#[test]
fn every_primitive_matches_finite_differences() {
    let reports = gradcheck::primitives::suite(42).unwrap();
    assert!(reports.len() > 30);
    for r in &reports {
        assert!(r.passed(1e-4), "{}: {:?}", r.name, r.worst());
    }
}

#[test]
fn corrupted_relu_backward_is_detected() {
    // the fault flag is process-global; this is the only test in this binary touching it
    wcaps_core::autodiff::set_relu_backward_fault(true);
    let reports = gradcheck::primitives::suite(42);
    wcaps_core::autodiff::set_relu_backward_fault(false);
    let reports = reports.unwrap();
    let relu = reports.iter().find(|r| r.name == "relu").unwrap();
    assert!(!relu.passed(1e-4));
}
