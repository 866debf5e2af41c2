use super::*;
use crate::error::Error;
use crate::rng::Rng;

fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let [n, h, wd, ci] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [kh, kw, _, co] = <[usize; 4]>::try_from(w.shape()).unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * ho * wo * co];
    for bi in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for o in 0..co {
                    let mut acc = b[o];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for c in 0..ci {
                                let xi = ((bi * h + iy as usize) * wd + ix as usize) * ci + c;
                                let wi = ((ky * kw + kx) * ci + c) * co + o;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out[((bi * ho + oy) * wo + ox) * co + o] = acc;
                }
            }
        }
    }
    Tensor::new([n, ho, wo, co], out).unwrap()
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([4]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.25; 4]);
}

#[test]
fn unit_pointwise_kernel_is_identity() {
    let mut rng = Rng::seed(0);
    let img = Tensor::rand_uniform([2, 5, 7, 1], 0.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let w = tape.constant(Tensor::ones([1, 1, 1, 1]));
    let y = tape.conv2d(x, w, None, 1, 0).unwrap();
    assert!(tape.value(y).bit_eq(&img));
}

#[test]
fn conv_matches_naive_definition() {
    let mut rng = Rng::seed(3);
    for &(k, stride, pad, h) in &[(3, 1, 1, 6), (3, 2, 1, 7), (1, 1, 0, 4), (4, 2, 0, 8), (3, 1, 0, 5)] {
        let x = Tensor::randn([2, h, h + 1, 3], 1.0, &mut rng);
        let w = Tensor::randn([k, k, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn([4], 1.0, &mut rng);
        let want = naive_conv(&x, &w, b.data(), stride, pad);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        assert_eq!(tape.shape(y), want.shape());
        assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn identity_matmul() {
    let mut rng = Rng::seed(1);
    let a = Tensor::randn([3, 5], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (i, av) = (tape.constant(Tensor::eye(3)), tape.constant(a.clone()));
    let y = tape.matmul(i, av).unwrap();
    assert!(tape.value(y).max_abs_diff(&a) == 0.0);
}

#[test]
fn avg_pool_keeps_constants() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full([1, 4, 6, 2], 0.3));
    let y = tape.avg_pool2(x).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 3, 2]);
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let x = tape.var(Tensor::new([2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
    let loss = tape.sum(x).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn half_squared_norm_gradient_is_identity() {
    let data = vec![0.5, -1.5, 2.0];
    let mut tape = Tape::new();
    let x = tape.var(Tensor::new([3], data.clone()).unwrap());
    let sq = tape.square(x).unwrap();
    let s = tape.sum(sq).unwrap();
    let loss = tape.scale(s, 0.5).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), data.as_slice());
}

#[test]
fn stop_gradient_blocks_flow() {
    let mut tape = Tape::new();
    let xs = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
    let x = tape.var(xs.clone());
    let y = tape.var(Tensor::new([3], vec![4.0, 5.0, 6.0]).unwrap());
    let sx = tape.detach(x);
    let p = tape.mul(sx, y).unwrap();
    let loss = tape.sum(p).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(x).is_none());
    assert_eq!(tape.grad(y).unwrap().data(), xs.data());
}

#[test]
fn two_paths_accumulate() {
    let mut tape = Tape::new();
    let x = tape.var(Tensor::ones([2, 3]));
    let a = tape.sum(x).unwrap();
    let b = tape.sum(x).unwrap();
    let loss = tape.add(a, b).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0; 6]);
}

#[test]
fn unreachable_leaves_untouched() {
    let mut tape = Tape::new();
    let x = tape.var(Tensor::ones([2]));
    let unused = tape.var(Tensor::ones([2]));
    let loss = tape.sum(x).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(unused).is_none());
}

#[test]
fn backward_errors() {
    let mut tape = Tape::new();
    assert!(matches!(tape.backward(Var(0)), Err(Error::Backward(_))));
    let x = tape.var(Tensor::ones([2]));
    assert!(matches!(tape.backward(x), Err(Error::Backward(msg)) if msg.contains("scalar")));
    let loss = tape.sum(x).unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::Backward(msg)) if msg.contains("consumed")));
    tape.reset_grads();
    tape.backward(loss).unwrap();
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([4, 5]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    assert!(matches!(tape.add(a, b), Err(Error::Shape { op: "add", .. })));
}

#[test]
fn non_finite_outputs_are_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full([2], -1.0));
    assert!(matches!(tape.log(x), Err(Error::NonFinite { op: "log" })));
}

#[test]
fn normalisations_reject_bad_eps() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([1, 2, 2, 4]));
    let g = tape.constant(Tensor::ones([4]));
    let b = tape.constant(Tensor::zeros([4]));
    assert!(tape.layer_norm(x, g, b, 0.0).is_err());
    assert!(tape.group_norm(x, g, b, 3, 1e-6).is_err());
}

#[test]
fn softmax_is_shift_invariant_and_normalised() {
    let mut rng = Rng::seed(5);
    let logits = Tensor::randn([3, 7], 3.0, &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let shifted = tape.constant(logits.map(|v| v + 12.5));
    let a = tape.softmax(x, 1).unwrap();
    let b = tape.softmax(shifted, 1).unwrap();
    assert!(tape.value(a).max_abs_diff(tape.value(b)) <= 1e-12);
    for row in tape.value(a).data().chunks(7) {
        assert!(row.iter().all(|&p| p > 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn grad_check_softmax_matmul() {
    let mut rng = Rng::seed(0);
    let a = Tensor::randn([4, 4], 1.0, &mut rng);
    let b = Tensor::randn([4, 4], 1.0, &mut rng);
    let err = grad_check(
        |t, v| {
            let m = t.matmul(v[0], v[1])?;
            t.softmax(m, 1)
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn grad_check_layer_norm() {
    let mut rng = Rng::seed(1);
    let x = Tensor::randn([2, 3, 4], 1.0, &mut rng);
    let g = Tensor::randn([4], 1.0, &mut rng);
    let b = Tensor::randn([4], 1.0, &mut rng);
    let err = grad_check(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-6), &[x, g, b], 1e-5).unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn grad_check_relu_away_from_kink() {
    let mut rng = Rng::seed(2);
    let eps = 1e-5;
    let x = Tensor::randn([5, 5], 1.0, &mut rng).map(|v| if v.abs() < 20.0 * eps { v + 0.1 } else { v });
    let err = grad_check(|t, v| t.relu(v[0]), &[x], eps).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_rejects_bad_eps() {
    let x = Tensor::ones([2]);
    assert!(grad_check(|t, v| t.sum(v[0]), &[x.clone()], 1e-2).is_err());
    assert!(grad_check(|t, v| t.sum(v[0]), &[x], 1e-9).is_err());
}

#[test]
fn deterministic_forward_backward() {
    let run = || {
        let mut rng = Rng::seed(11);
        let x = Tensor::randn([1, 6, 6, 3], 1.0, &mut rng);
        let w = Tensor::randn([3, 3, 3, 2], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.var(x), tape.var(w));
        let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
        let s = tape.silu(y).unwrap();
        let loss = tape.mean(s).unwrap();
        tape.backward(loss).unwrap();
        (tape.value(loss).clone(), tape.grad(wv).unwrap().clone())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert!(l1.bit_eq(&l2) && g1.bit_eq(&g2));
}

mod props {
    use super::{Tape, Tensor};
    use crate::rng::Rng;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn reshape_round_trip(seed in 0u64..1000, a in 1usize..5, b in 1usize..5, c in 1usize..5) {
            let t = Tensor::randn([a, b, c], 1.0, &mut Rng::seed(seed));
            let mut tape = Tape::new();
            let v = tape.constant(t.clone());
            let r = tape.reshape(v, &[c, a * b]).unwrap();
            let back = tape.reshape(r, &[a, b, c]).unwrap();
            prop_assert!(tape.value(back).bit_eq(&t));
        }

        #[test]
        fn concat_then_split_round_trip(seed in 0u64..1000, a in 1usize..4, b in 1usize..4) {
            let mut rng = Rng::seed(seed);
            let x = Tensor::randn([2, a, 3], 1.0, &mut rng);
            let y = Tensor::randn([2, b, 3], 1.0, &mut rng);
            let mut tape = Tape::new();
            let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
            let c = tape.concat(&[xv, yv], 1).unwrap();
            let parts = tape.split(c, 1, &[a, b]).unwrap();
            prop_assert!(tape.value(parts[0]).bit_eq(&x));
            prop_assert!(tape.value(parts[1]).bit_eq(&y));
        }

        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..1000, scale in 0.1f64..30.0) {
            let t = Tensor::randn([4, 6], scale, &mut Rng::seed(seed));
            let mut tape = Tape::new();
            let v = tape.constant(t);
            let s = tape.softmax(v, 0).unwrap();
            let sums = tape.sum_axis(s, 0).unwrap();
            for &total in tape.value(sums).data() {
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }
}
