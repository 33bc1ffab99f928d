use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    Array::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Central-difference oracle for d f / d x.
fn finite_diff(x: &Array<f64>, h: f64, f: &dyn Fn(&Array<f64>) -> f64) -> Array<f64> {
    let mut g = Array::zeros(x.shape());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

fn rel_err(a: &Array<f64>, b: &Array<f64>) -> f64 {
    let diff = a.sub(b).unwrap().norm();
    diff / a.norm().max(b.norm()).max(1e-12)
}

/// Checks every input of `f` against finite differences at 10 random points.
fn check_primitive(
    name: &str,
    shapes: &[&[usize]],
    f: for<'a> fn(&[Var<'a, f64>]) -> Result<Var<'a, f64>>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for trial in 0..10 {
        let inputs: Vec<Array<f64>> = shapes.iter().map(|s| randn(&mut rng, s)).collect();
        // Random projection turns array outputs into a scalar.
        let eval = |inputs: &[Array<f64>]| -> (f64, Vec<Array<f64>>) {
            let tape = Tape::new();
            let vars: Vec<_> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
            let out = f(&vars).unwrap();
            let mut prng = ChaCha8Rng::seed_from_u64(99 + trial);
            let proj = randn(&mut prng, &out.shape());
            let pv = tape.constant(proj);
            let s = out.mul(pv).unwrap().sum().unwrap();
            let v = s.value().item().unwrap();
            let mut g = tape.backward(s).unwrap();
            (v, vars.iter().map(|&v| g.take(v)).collect())
        };
        let (_, grads) = eval(&inputs);
        for (k, grad) in grads.iter().enumerate() {
            let fd = finite_diff(&inputs[k], 1e-5, &|xk| {
                let mut ins = inputs.clone();
                ins[k] = xk.clone();
                eval(&ins).0
            });
            let e = rel_err(grad, &fd);
            assert!(
                e < 1e-4,
                "{name} input {k} trial {trial}: relative error {e:.3e}"
            );
        }
    }
}

#[test]
fn add_is_elementwise() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Array::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let b = tape.constant(Array::from_f64(&[2], &[3.0, 4.0]).unwrap());
    assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
}

#[test]
fn shape_mismatch_names_operation_and_shapes() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Array::zeros(&[2]));
    let b = tape.constant(Array::zeros(&[3]));
    let err = a.add(b).unwrap_err();
    assert_eq!(
        err,
        DiffError::ShapeMismatch {
            op: "add",
            lhs: vec![2],
            rhs: vec![3]
        }
    );
    let msg = err.to_string();
    assert!(
        msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"),
        "{msg}"
    );
}

#[test]
fn from_vec_rejects_wrong_length() {
    assert!(Array::<f64>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
    assert!(Array::<f64>::from_vec(&[0, 2], vec![]).is_err());
}

#[test]
fn conv_of_zeros_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tape = Tape::new();
    let x = tape.constant(Array::<f64>::zeros(&[2, 3, 6, 6]));
    let w = tape.constant(randn(&mut rng, &[4, 3, 3, 3]));
    let b = tape.constant(Array::zeros(&[4]));
    let y = x.conv2d(w, Some(b), 1, 1).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

/// Direct sliding-window convolution.
#[allow(clippy::needless_range_loop)]
fn naive_conv(x: &Array<f64>, w: &Array<f64>, b: &[f64], stride: usize, pad: usize) -> Array<f64> {
    let [n, ci, h, wd] = x.dims4("t").unwrap();
    let &[co, _, k, _] = w.shape() else {
        unreachable!()
    };
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Array::zeros(&[n, co, ho, wo]);
    for i in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()
                                    [((i * ci + c) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * ci + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    out.data_mut()[((i * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_sliding_window_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(stride, pad, k) in &[
        (1, 1, 3),
        (2, 1, 3),
        (1, 0, 3),
        (1, 0, 1),
        (2, 0, 1),
        (1, 2, 5),
        (2, 2, 5),
        (3, 1, 3),
        (2, 3, 3),
    ] {
        let x = randn(&mut rng, &[2, 3, 5, 5]);
        let w = randn(&mut rng, &[4, 3, k, k]);
        let b = randn(&mut rng, &[4]);
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(
                tape.constant(w.clone()),
                Some(tape.constant(b.clone())),
                stride,
                pad,
            )
            .unwrap();
        let reference = naive_conv(&x, &w, b.data(), stride, pad);
        assert_eq!(y.shape(), reference.shape());
        assert!(
            rel_err(&y.value(), &reference) < 1e-12,
            "stride {stride} pad {pad} k {k}"
        );
    }
}

#[test]
fn grad_of_sum_is_ones() {
    let x = Array::<f64>::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 4.0, -7.0]).unwrap();
    let (v, g) = grad_wrt_input(&x, |_, x| x.sum()).unwrap();
    assert_eq!(v, 1.5);
    assert!(g.data().iter().all(|&d| d == 1.0));
}

#[test]
fn grad_of_sum_of_squares() {
    let x = Array::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
    let (_, g) = grad_wrt_input(&x, |_, x| x.square()?.sum()).unwrap();
    assert_eq!(g.data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn non_scalar_output_is_an_error() {
    let x = Array::<f64>::zeros(&[3]);
    let err = grad_wrt_input(&x, |_, x| x.silu()).unwrap_err();
    assert!(matches!(err, DiffError::NonScalar { .. }));
}

#[test]
fn param_grad_hand_derivative() {
    // f(w) = (w * 1 - 1)^2 at w = 0.
    let (v, g) = grad_wrt_params(&[Array::<f64>::scalar(0.0)], |t, p| {
        let one = t.constant(Array::scalar(1.0));
        p[0].mul(one)?.add_scalar(-1.0)?.square()?.sum()
    })
    .unwrap();
    assert_eq!(v, 1.0);
    assert_eq!(g[0].data(), &[-2.0]);
}

#[test]
fn bias_only_model_at_optimum_has_zero_gradient() {
    let targets = Array::from_f64(&[4, 1], &[1.0, 2.0, 3.0, 6.0]).unwrap();
    let (_, g) = grad_wrt_params(&[Array::<f64>::from_f64(&[1], &[3.0]).unwrap()], |t, p| {
        let zeros = t.constant(Array::zeros(&[4, 1]));
        let pred = zeros.add_bias(p[0])?;
        pred.sub(t.constant(targets.clone()))?.square()?.mean()
    })
    .unwrap();
    assert!(g[0].data()[0].abs() < 1e-15);
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::<f64>::new();
    let a = tape.leaf(Array::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let b = tape.constant(Array::from_f64(&[2], &[3.0, 4.0]).unwrap());
    let s = a.mul(b).unwrap().sum().unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
    assert!(g.get(b).is_none());
}

#[test]
fn finite_check_flags_nan() {
    let tape = Tape::<f64>::new().with_finite_checks(true);
    let a = tape.constant(Array::from_f64(&[1], &[f64::MAX]).unwrap());
    assert_eq!(
        a.scale(10.0).unwrap_err(),
        DiffError::NonFinite { op: "scale" }
    );
    let quiet = Tape::<f64>::new().with_finite_checks(false);
    let b = quiet.constant(Array::from_f64(&[1], &[f64::MAX]).unwrap());
    assert!(b.scale(10.0).is_ok());
}

#[test]
fn gradcheck_elementwise() {
    check_primitive("add", &[&[3, 4], &[3, 4]], |v| v[0].add(v[1]));
    check_primitive("sub", &[&[3, 4], &[3, 4]], |v| v[0].sub(v[1]));
    check_primitive("mul", &[&[3, 4], &[3, 4]], |v| v[0].mul(v[1]));
    check_primitive("scale", &[&[5]], |v| v[0].scale(-2.5));
    check_primitive("add_scalar", &[&[5]], |v| v[0].add_scalar(0.3));
    check_primitive("silu", &[&[2, 3, 2, 2]], |v| v[0].silu());
    check_primitive("sigmoid", &[&[7]], |v| v[0].sigmoid());
    check_primitive("relu", &[&[7]], |v| v[0].relu());
    check_primitive("sum", &[&[3, 2]], |v| v[0].sum());
    check_primitive("mean", &[&[3, 2]], |v| v[0].mean());
    check_primitive("reshape", &[&[3, 2]], |v| v[0].reshape(&[6]));
    check_primitive("softmax", &[&[3, 5]], |v| v[0].softmax());
}

#[test]
fn gradcheck_linear_algebra() {
    check_primitive("matmul", &[&[3, 4], &[4, 2]], |v| v[0].matmul(v[1]));
    check_primitive("bmm", &[&[2, 3, 4], &[2, 4, 5]], |v| {
        v[0].batch_matmul(v[1], false, false)
    });
    check_primitive("bmm_ta", &[&[2, 4, 3], &[2, 4, 5]], |v| {
        v[0].batch_matmul(v[1], true, false)
    });
    check_primitive("bmm_tb", &[&[2, 3, 4], &[2, 5, 4]], |v| {
        v[0].batch_matmul(v[1], false, true)
    });
    check_primitive("bmm_tt", &[&[2, 4, 3], &[2, 5, 4]], |v| {
        v[0].batch_matmul(v[1], true, true)
    });
}

#[test]
fn gradcheck_spatial() {
    check_primitive("conv_s1", &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]], |v| {
        v[0].conv2d(v[1], Some(v[2]), 1, 1)
    });
    check_primitive("conv_s2", &[&[2, 3, 6, 6], &[4, 3, 3, 3], &[4]], |v| {
        v[0].conv2d(v[1], Some(v[2]), 2, 1)
    });
    check_primitive("conv_k5_s3", &[&[1, 2, 7, 7], &[3, 2, 5, 5], &[3]], |v| {
        v[0].conv2d(v[1], Some(v[2]), 3, 2)
    });
    check_primitive("conv_1x1", &[&[2, 3, 4, 4], &[5, 3, 1, 1]], |v| {
        v[0].conv2d(v[1], None, 1, 0)
    });
    check_primitive("upsample", &[&[2, 2, 3, 3]], |v| v[0].upsample2x());
    check_primitive("group_norm", &[&[2, 4, 3, 3], &[4], &[4]], |v| {
        v[0].group_norm(2, v[1], v[2])
    });
    check_primitive("instance_norm", &[&[2, 4, 3, 3], &[4], &[4]], |v| {
        v[0].group_norm(4, v[1], v[2])
    });
    check_primitive("mean_spatial", &[&[2, 3, 4, 4]], |v| v[0].mean_spatial());
    check_primitive("concat", &[&[2, 2, 3, 3], &[2, 3, 3, 3]], |v| {
        v[0].concat_channels(v[1])
    });
    check_primitive("slice", &[&[2, 5, 3, 3]], |v| v[0].slice_channels(1, 3));
    check_primitive("add_bias4", &[&[2, 3, 2, 2], &[3]], |v| v[0].add_bias(v[1]));
    check_primitive("add_bias2", &[&[4, 3], &[3]], |v| v[0].add_bias(v[1]));
    check_primitive("per_item", &[&[2, 3, 2, 2], &[2, 3]], |v| {
        v[0].add_per_item_channel(v[1])
    });
}

#[test]
fn gradcheck_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target = Array::from_fn(&[2, 1, 3, 3], |_| {
        if rng.random::<f64>() > 0.5 {
            1.0
        } else {
            0.0
        }
    });
    let x = randn(&mut rng, &[2, 1, 3, 3]);
    let f = |x: &Array<f64>| {
        let tape = Tape::new();
        let v = tape.constant(x.clone()).bce_with_logits(&target).unwrap();
        let total = v.sum().unwrap().value().item().unwrap();
        total
    };
    let (_, g) = grad_wrt_input(&x, |_, x| x.bce_with_logits(&target)?.sum()).unwrap();
    assert!(rel_err(&g, &finite_diff(&x, 1e-5, &f)) < 1e-4);
}

#[test]
fn bce_of_zero_logits_is_ln2() {
    let tape = Tape::<f64>::new();
    let l = tape.constant(Array::zeros(&[3, 1, 2, 2]));
    let target = Array::from_fn(&[3, 1, 2, 2], |i| (i % 2) as f64);
    let h = l.bce_with_logits(&target).unwrap();
    for &v in h.value().data() {
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[2, 3, 6, 6]);
        let w = randn(&mut rng, &[4, 3, 3, 3]);
        grad_wrt_params(&[x, w], |_, p| {
            p[0].conv2d(p[1], None, 2, 1)?.silu()?.square()?.mean()
        })
        .unwrap()
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradient_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, &[1, 2, 4, 4]);
        let w = randn(&mut rng, &[2, 2, 3, 3]);
        let grad = |cf: f64, cg: f64| -> Result<Array<f64>> {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let fv = xv.conv2d(tape.constant(w.clone()), None, 1, 1)?.silu()?.sum()?;
            let gv = xv.sigmoid()?.square()?.mean()?;
            let out = fv.scale(cf)?.add(gv.scale(cg)?)?;
            Ok(tape.backward(out)?.take(xv))
        };
        let gf = grad(1.0, 0.0).unwrap();
        let gg = grad(0.0, 1.0).unwrap();
        let gc = grad(a, b).unwrap();
        let mut expect = gf.scale(a);
        expect.axpy(b, &gg).unwrap();
        let err = gc.sub(&expect).unwrap().max_abs();
        prop_assert!(err <= 1e-12 * (1.0 + expect.max_abs()), "err {}", err);
    }
}
