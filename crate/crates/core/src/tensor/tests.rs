use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

#[test]
fn tensor_rejects_inconsistent_shape() {
    assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
}

#[test]
fn softplus_closed_forms() {
    assert!((softplus(0.0f64) - 2.0f64.ln()).abs() < 1e-15);
    // overflow guard path
    assert!((softplus(100.0f64) - 100.0).abs() < 1e-9);
    // continuity at the guarded-region boundary
    let x = 29.5f64;
    assert!((softplus(x) - (1.0 + x.exp()).ln()).abs() < 1e-12);
}

#[test]
fn sigmoid_saturates_without_overflow() {
    assert!(sigmoid(800.0f64) == 1.0);
    assert!(sigmoid(-800.0f64) == 0.0);
    assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
}

#[test]
fn conv3d_identity_kernel_passes_input_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = rand_tensor(&mut rng, vec![4, 5, 3, 4], 0.0, 1.0);
    // 1x1x1 kernel holding the identity over channels
    let c = 3;
    let weight = Tensor::from_fn(vec![1, 1, c, c, 1], |i| {
        let (ci, co) = (i / c, i % c);
        if ci == co {
            1.0
        } else {
            0.0
        }
    });
    let bias = Tensor::zeros(vec![c]);

    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let w = tape.constant(weight);
    let b = tape.constant(bias);
    let y = tape.conv3d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.value(y), &input);
}

#[test]
fn conv3d_box_kernel_sums_nine_ones() {
    let input = Tensor::full(vec![6, 6, 1, 2], 1.0f64);
    let weight = Tensor::full(vec![3, 3, 1, 1, 1], 1.0);
    let bias = Tensor::zeros(vec![1]);

    let mut tape = Tape::new();
    let x = tape.constant(input);
    let w = tape.constant(weight);
    let b = tape.constant(bias);
    let y = tape.conv3d(x, w, b, 1, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[6, 6, 1, 2]);
    // interior positions see the full 3x3 window
    let v = tape.value(y);
    for hy in 1..5 {
        for hx in 1..5 {
            for f in 0..2 {
                let idx = ((hy * 6 + hx) * 1) * 2 + f;
                assert!((v.data()[idx] - 9.0).abs() < 1e-12);
            }
        }
    }
    // corner sees only a 2x2 window under zero padding
    assert!((v.data()[0] - 4.0).abs() < 1e-12);
}

/// Scalarize an op output with a fixed non-uniform linear functional so the
/// upstream gradient varies per coordinate without adding curvature.
fn weighted_sum(tape: &mut Tape<f64>, y: Var) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let c = Tensor::from_fn(shape, |i| ((i % 5) as f64 - 2.0) * 0.35 + 0.1);
    let c = tape.constant(c);
    let p = tape.mul(y, c).unwrap();
    tape.sum(p)
}

#[test]
fn conv3d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = rand_tensor(&mut rng, vec![8, 8, 2, 3], -1.0, 1.0);
    let weight = rand_tensor(&mut rng, vec![3, 3, 2, 2, 3], -0.5, 0.5);
    let bias = rand_tensor(&mut rng, vec![2], -0.1, 0.1);

    let err = grad_check_against(
        |tape, vars| {
            let y = tape.conv3d(vars[0], vars[1], vars[2], 1, 1)?;
            Ok(weighted_sum(tape, y))
        },
        &[input, weight, bias],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn conv3d_rejects_channel_mismatch_naming_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![4, 4, 3, 2]));
    let w = tape.constant(Tensor::zeros(vec![3, 3, 2, 4, 1]));
    let b = tape.constant(Tensor::zeros(vec![4]));
    let err = tape.conv3d(x, w, b, 1, 1).unwrap_err().to_string();
    assert!(err.contains("[4, 4, 3, 2]") && err.contains("[3, 3, 2, 4, 1]"), "{err}");
}

#[test]
fn conv3d_strided_output_follows_shape_formula() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![9, 9, 1, 2]));
    let w = tape.constant(Tensor::zeros(vec![3, 3, 1, 1, 1]));
    let b = tape.constant(Tensor::zeros(vec![1]));
    let y = tape.conv3d(x, w, b, 2, 1).unwrap();
    // (9 + 2 - 3) / 2 + 1 = 5
    assert_eq!(tape.value(y).shape(), &[5, 5, 1, 2]);
}

#[test]
fn activation_closed_forms() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![4], vec![0.0f64, -3.0, 100.0, 2.0]).unwrap());

    let sp = tape.activation(x, Activation::Softplus);
    let v = tape.value(sp).data();
    assert!((v[0] - 2.0f64.ln()).abs() < 1e-12);
    assert!((v[2] - 100.0).abs() < 1e-9);

    let re = tape.activation(x, Activation::Relu);
    assert_eq!(tape.value(re).data()[1], 0.0);

    let lk = tape.activation(x, Activation::LeakyRelu(0.1));
    assert!((tape.value(lk).data()[1] - (-0.3)).abs() < 1e-12);
}

#[test]
fn down2_averages_and_up2_restores_constants() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, 2], vec![1.0f64, 3.0, 5.0, 7.0]).unwrap());
    let d = tape.down2(x).unwrap();
    assert_eq!(tape.value(d).data(), &[4.0]);

    let c = tape.constant(Tensor::full(vec![4, 4, 2, 3], 0.7f64));
    let dc = tape.down2(c).unwrap();
    let uc = tape.up2(dc).unwrap();
    assert_eq!(tape.value(uc), tape.value(c));
}

#[test]
fn down2_rejects_odd_extents() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![3, 4]));
    assert!(tape.down2(x).is_err());
}

#[test]
fn resample_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = rand_tensor(&mut rng, vec![4, 6, 2, 2], -1.0, 1.0);
    for down in [true, false] {
        let err = grad_check(
            |tape, x| {
                let y = if down { tape.down2(x)? } else { tape.up2(x)? };
                let y = tape.activation(y, Activation::Softplus);
                Ok(tape.sum(y))
            },
            &input,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "down={down}: max relative error {err}");
    }
}

#[test]
fn backward_of_sum_is_ones_and_square_is_two_x() {
    let mut tape = Tape::new();
    let data = Tensor::new(vec![3], vec![1.5f64, -2.0, 0.25]).unwrap();
    let x = tape.leaf(data.clone(), true);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(data.clone(), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    for (g, v) in tape.grad(x).unwrap().data().iter().zip(data.data()) {
        assert!((g - 2.0 * v).abs() < 1e-12);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(vec![2, 2], 1.0f64), true);
    assert!(tape.backward(x).is_err());
}

#[test]
fn shared_subexpressions_sum_their_contributions() {
    // loss = sum(x) + sum(x*x): grad = 1 + 2x
    let mut tape = Tape::new();
    let data = Tensor::new(vec![2], vec![3.0f64, -1.0]).unwrap();
    let x = tape.leaf(data.clone(), true);
    let s1 = tape.sum(x);
    let sq = tape.mul(x, x).unwrap();
    let s2 = tape.sum(sq);
    let loss = tape.add(s1, s2).unwrap();
    tape.backward(loss).unwrap();
    for (g, v) in tape.grad(x).unwrap().data().iter().zip(data.data()) {
        assert!((g - (1.0 + 2.0 * v)).abs() < 1e-12);
    }
}

#[test]
fn repeated_backward_accumulates_until_reset() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(vec![2], 2.0f64), true);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    tape.reset_grads();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn grad_check_is_exact_for_linear_functions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let point = rand_tensor(&mut rng, vec![6], -2.0, 2.0);
    let err = grad_check(
        |tape, x| {
            let y = tape.scale(x, 3.25);
            Ok(tape.sum(y))
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-10, "linear check should be near machine epsilon, got {err}");
}

#[test]
fn grad_check_sum_exp_at_origin() {
    // f(x) = sum(exp(x)) expressed through softplus'(x) is not available;
    // use softplus composed twice to get a smooth non-linear function, and
    // the documented sum-exp bound via the softmax-normalization kernel is
    // covered in the fusion module. Here: f(x) = sum(softplus(x)).
    let point = Tensor::zeros(vec![5]);
    let err = grad_check(
        |tape, x| {
            let y = tape.activation(x, Activation::Softplus);
            Ok(tape.sum(y))
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "max relative error {err}");
}

#[test]
fn grad_check_flags_relu_kink_at_zero() {
    // Non-differentiable point: central differences see slope 1/2 while the
    // recorded derivative is 0. The check reports a large error; such points
    // are excluded from the random suites by sampling away from zero.
    let point = Tensor::zeros(vec![1]);
    let err = grad_check(
        |tape, x| {
            let y = tape.activation(x, Activation::Relu);
            Ok(tape.sum(y))
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(err > 0.4, "kink must be flagged, got {err}");
}

#[test]
fn backward_is_linear_in_the_loss() {
    // grad(a*f + b*g) = a*grad(f) + b*grad(g)
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = rand_tensor(&mut rng, vec![4], -1.0, 1.0);
    let (a, b) = (1.7f64, -0.6f64);

    let grad_of = |scale_f: f64, scale_g: f64, data: &Tensor<f64>| -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(data.clone(), true);
        let f = tape.activation(x, Activation::Softplus);
        let f = tape.sum(f);
        let g = tape.mul(x, x).unwrap();
        let g = tape.sum(g);
        let sf = tape.scale(f, scale_f);
        let sg = tape.scale(g, scale_g);
        let loss = tape.add(sf, sg).unwrap();
        tape.backward(loss).unwrap();
        tape.grad(x).unwrap().data().to_vec()
    };

    let combined = grad_of(a, b, &data);
    let fg = grad_of(1.0, 0.0, &data);
    let gg = grad_of(0.0, 1.0, &data);
    for i in 0..combined.len() {
        assert!((combined[i] - (a * fg[i] + b * gg[i])).abs() < 1e-10);
    }
}

#[test]
fn forward_and_grads_are_deterministic() {
    let run = || -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = rand_tensor(&mut rng, vec![4, 4, 2, 3], -1.0, 1.0);
        let weight = rand_tensor(&mut rng, vec![3, 3, 2, 2, 3], -0.5, 0.5);
        let bias = rand_tensor(&mut rng, vec![2], -0.1, 0.1);
        let mut tape = Tape::new();
        let x = tape.leaf(input, true);
        let w = tape.leaf(weight, true);
        let b = tape.leaf(bias, true);
        let y = tape.conv3d(x, w, b, 1, 1).unwrap();
        let y = tape.activation(y, Activation::LeakyRelu(0.1));
        let loss = tape.mean(y);
        tape.backward(loss).unwrap();
        (
            tape.value(y).data().to_vec(),
            tape.grad(w).unwrap().data().to_vec(),
        )
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert!(v1.iter().zip(&v2).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

/// Every differentiable primitive, checked at 10 random points each.
#[test]
fn primitive_gradients_pass_random_point_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

    // (name, arity of differentiable inputs, shapes, graph builder)
    // Points are sampled away from the relu/leaky/abs kinks.
    let cases: Vec<(&str, Vec<Vec<usize>>, Builder)> = vec![
        ("add", vec![vec![3, 2], vec![3, 2]], Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            Ok(weighted_sum(t, y))
        })),
        ("sub", vec![vec![3, 2], vec![3, 2]], Box::new(|t, v| {
            let y = t.sub(v[0], v[1])?;
            Ok(weighted_sum(t, y))
        })),
        ("mul", vec![vec![3, 2], vec![3, 2]], Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            Ok(t.sum(y))
        })),
        ("neg_scale", vec![vec![4]], Box::new(|t, v| {
            let y = t.neg(v[0]);
            let y = t.scale(y, 1.3);
            let y = t.activation(y, Activation::Softplus);
            Ok(t.sum(y))
        })),
        ("abs", vec![vec![4]], Box::new(|t, v| {
            let y = t.abs(v[0]);
            Ok(t.sum(y))
        })),
        ("relu", vec![vec![4]], Box::new(|t, v| {
            let y = t.activation(v[0], Activation::Relu);
            Ok(t.sum(y))
        })),
        ("leaky_relu", vec![vec![4]], Box::new(|t, v| {
            let y = t.activation(v[0], Activation::LeakyRelu(0.1));
            Ok(t.sum(y))
        })),
        ("softplus", vec![vec![4]], Box::new(|t, v| {
            let y = t.activation(v[0], Activation::Softplus);
            Ok(t.sum(y))
        })),
        ("mean", vec![vec![3, 3]], Box::new(|t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.mean(y))
        })),
        ("conv3d", vec![vec![4, 4, 1, 2], vec![3, 3, 1, 2, 3], vec![2]], Box::new(|t, v| {
            let y = t.conv3d(v[0], v[1], v[2], 1, 1)?;
            Ok(weighted_sum(t, y))
        })),
        ("down2", vec![vec![4, 4, 2, 2]], Box::new(|t, v| {
            let y = t.down2(v[0])?;
            Ok(weighted_sum(t, y))
        })),
        ("up2", vec![vec![3, 3, 2, 2]], Box::new(|t, v| {
            let y = t.up2(v[0])?;
            Ok(weighted_sum(t, y))
        })),
        ("concat_channels", vec![vec![2, 2, 2, 2], vec![2, 2, 3, 2]], Box::new(|t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            Ok(weighted_sum(t, y))
        })),
        ("softplus_norm", vec![vec![2, 2, 1, 4]], Box::new(|t, v| {
            let y = t.softplus_norm(v[0])?;
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        })),
        ("softmax_norm", vec![vec![2, 2, 1, 4]], Box::new(|t, v| {
            let y = t.softmax_norm(v[0], 1.0)?;
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        })),
        ("expected_depth", vec![vec![2, 2, 1, 3]], Box::new(|t, v| {
            let y = t.expected_depth(v[0], &[0.0, 0.5, 1.0])?;
            Ok(weighted_sum(t, y))
        })),
        ("fuse_aif", vec![vec![2, 2, 1, 3], vec![2, 2, 3, 3]], Box::new(|t, v| {
            let y = t.fuse_aif(v[0], v[1])?;
            Ok(weighted_sum(t, y))
        })),
        ("diff_x", vec![vec![3, 4, 1]], Box::new(|t, v| {
            let y = t.diff_x(v[0])?;
            Ok(weighted_sum(t, y))
        })),
        ("diff_y", vec![vec![4, 3, 1]], Box::new(|t, v| {
            let y = t.diff_y(v[0])?;
            Ok(weighted_sum(t, y))
        })),
    ];

    for (name, shapes, builder) in &cases {
        for trial in 0..10 {
            // Samples in [0.1, 1.1] or [-1.1, -0.1]: bounded away from kinks.
            let points: Vec<Tensor<f64>> = shapes
                .iter()
                .map(|s| {
                    Tensor::from_fn(s.clone(), |_| {
                        let mag = rng.gen_range(0.1..1.1);
                        if rng.gen_bool(0.5) {
                            mag
                        } else {
                            -mag
                        }
                    })
                })
                .collect();
            let err = grad_check_against(builder, &points, 1e-5)
                .unwrap_or_else(|e| panic!("{name} trial {trial}: {e}"));
            assert!(err < 1e-6, "{name} trial {trial}: max relative error {err}");
        }
    }
}
