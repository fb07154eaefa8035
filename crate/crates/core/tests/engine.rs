use daaf_core::gradcheck::{finite_difference_check, DEFAULT_EPS};
use daaf_core::tape::{ConvSpec, DeconvSpec, TripletMargin};
use daaf_core::{Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from 0 so kinks (relu, abs) are not straddled by the FD step.
fn rand_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn s1() -> ConvSpec {
    ConvSpec { stride: 1, pad: 0 }
}

fn decoder_spec() -> DeconvSpec {
    DeconvSpec {
        stride: 2,
        pad: 1,
        out_pad: 1,
    }
}

#[test]
fn identity_pointwise_kernel_reproduces_input() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(&[1, 1, 2, 3], vec![1.0, -2.0, 3.0, 4.5, 0.0, 6.0]).unwrap());
    let w = tape.constant(Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap());
    let y = tape.conv2d(x, w, None, s1()).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn hand_convolution_of_two_by_two() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let w = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let y = tape.conv2d(x, w, None, s1()).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[5.0]);
}

#[test]
fn conv_output_extent_formula() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2, 3, 9, 6]));
    let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let y = tape.conv2d(x, w, None, ConvSpec { stride: 2, pad: 1 }).unwrap();
    // floor((9 + 2 - 3) / 2) + 1 = 5, floor((6 + 2 - 3) / 2) + 1 = 3
    assert_eq!(tape.value(y).shape(), &[2, 4, 5, 3]);
}

#[test]
fn conv_shape_errors_name_the_axis() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[2, 2, 3, 3]));
    match tape.conv2d(x, w, None, s1()) {
        Err(Error::Dimension {
            axis, expected, got, ..
        }) => {
            assert_eq!((axis, expected, got), ("in_channels", 3, 2));
        }
        other => panic!("unexpected {other:?}"),
    }
    let big = tape.constant(Tensor::zeros(&[2, 3, 5, 5]));
    match tape.conv2d(x, big, None, s1()) {
        Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "height"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [
            randn(&[2, 3, 5, 5], &mut rng),
            randn(&[4, 3, 3, 3], &mut rng),
            randn(&[4], &mut rng),
        ];
        for spec in [s1(), ConvSpec { stride: 2, pad: 1 }] {
            let err = finite_difference_check(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?;
                    let y2 = t.mul(y, y)?;
                    Ok(t.sum(y2))
                },
                &inputs,
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(err < TOL, "seed {seed} {spec:?}: {err}");
        }
    }
}

#[test]
fn pointwise_conv_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let inputs = [
            randn(&[2, 3, 4, 3], &mut rng),
            randn(&[5, 3, 1, 1], &mut rng),
            randn(&[5], &mut rng),
        ];
        let err = finite_difference_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), s1())?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            },
            &inputs,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn single_pixel_deconv_doubles_extent() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = tape.deconv2d(x, w, None, decoder_spec()).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
}

#[test]
fn four_chained_deconvs_reach_sixteen_times() {
    let mut tape = Tape::<f64>::new();
    let mut h = tape.constant(Tensor::full(&[1, 2, 4, 2], 0.5));
    for _ in 0..4 {
        let w = tape.constant(Tensor::full(&[2, 2, 3, 3], 0.1));
        h = tape.deconv2d(h, w, None, decoder_spec()).unwrap();
    }
    assert_eq!(tape.value(h).shape(), &[1, 2, 64, 32]);
}

#[test]
fn unreachable_deconv_extent_is_a_config_error() {
    assert!(matches!(DeconvSpec::for_output(4, 9, 3, 2, 1), Err(Error::Config(_))));
    assert_eq!(DeconvSpec::for_output(4, 8, 3, 2, 1).unwrap(), decoder_spec());
    let bad = DeconvSpec {
        stride: 2,
        pad: 1,
        out_pad: 2,
    };
    assert!(matches!(bad.output_extent(4, 3), Err(Error::Config(_))));
}

#[test]
fn deconv_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let inputs = [
            randn(&[2, 3, 3, 2], &mut rng),
            randn(&[3, 2, 3, 3], &mut rng),
            randn(&[2], &mut rng),
        ];
        let err = finite_difference_check(
            |t, v| {
                let y = t.deconv2d(v[0], v[1], Some(v[2]), decoder_spec())?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            },
            &inputs,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn deconv_is_the_adjoint_of_conv() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = randn(&[2, 3, 8, 6], &mut rng);
        let w = randn(&[4, 3, 3, 3], &mut rng);
        let y = randn(&[2, 4, 4, 3], &mut rng);
        let mut tape = Tape::<f64>::new();
        let (xv, wv, yv) = (tape.constant(x.clone()), tape.constant(w), tape.constant(y.clone()));
        let cx = tape.conv2d(xv, wv, None, ConvSpec { stride: 2, pad: 1 }).unwrap();
        let aty = tape.deconv2d(yv, wv, None, decoder_spec()).unwrap();
        assert_eq!(tape.value(cx).shape(), y.shape());
        assert_eq!(tape.value(aty).shape(), x.shape());
        let lhs = tape.value(cx).dot(&y);
        let rhs = x.dot(tape.value(aty));
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

    let c = tape.constant(Tensor::full(&[2, 3, 4, 5], 1.75));
    let p = tape.global_avg_pool(c).unwrap();
    assert_eq!(tape.value(p).shape(), &[2, 3]);
    assert!(tape.value(p).data().iter().all(|&v| v == 1.75));
}

#[test]
fn abs_subgradient_at_zero_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new(&[3], vec![-2.0, 0.0, 3.0]).unwrap());
    let a = tape.abs(x);
    let s = tape.sum(a);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[-1.0, 0.0, 1.0]);
}

#[test]
fn building_block_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);

        let dense_in = [
            randn(&[3, 5], &mut rng),
            randn(&[4, 5], &mut rng),
            randn(&[4], &mut rng),
        ];
        let err = finite_difference_check(
            |t, v| {
                let y = t.dense(v[0], v[1], Some(v[2]))?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            },
            &dense_in,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < TOL, "dense seed {seed}: {err}");

        let act_in = [rand_off_zero(&[2, 2, 4, 4], &mut rng), randn(&[2, 2, 4, 4], &mut rng)];
        let err = finite_difference_check(
            |t, v| {
                let r = t.relu(v[0]);
                let a = t.abs(v[0]);
                let s = t.sigmoid(v[1]);
                let m = t.mul(r, s)?;
                let q = t.add(m, a)?;
                let q = t.sub(q, v[1])?;
                let q = t.scale(q, 0.7);
                let pooled = t.max_pool2d(q, 2, 2)?;
                let sq = t.mul(pooled, pooled)?;
                let gap = t.global_avg_pool(sq)?;
                Ok(t.mean(gap))
            },
            &act_in,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < TOL, "activations seed {seed}: {err}");

        let slice_in = [randn(&[2, 5, 3, 2], &mut rng)];
        let err = finite_difference_check(
            |t, v| {
                let a = t.slice_channels(v[0], 1, 2)?;
                let b = t.slice_channels(v[0], 3, 2)?;
                let cat = t.concat_batch(&[a, b])?;
                let part = t.slice_batch(cat, 1, 2)?;
                let flat = t.reshape(part, &[2, 12])?;
                let n = t.row_norms(flat, 2, false)?;
                let sq = t.row_norms(cat, 4, true)?;
                let s1 = t.sum(n);
                let s2 = t.sum(sq);
                t.add(s1, s2)
            },
            &slice_in,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < TOL, "slicing seed {seed}: {err}");

        let norm_in = [randn(&[3, 4], &mut rng), randn(&[3, 4], &mut rng)];
        let err = finite_difference_check(
            |t, v| {
                let y = t.normalize_rows(v[0])?;
                let p = t.mul(y, v[1])?;
                Ok(t.sum(p))
            },
            &norm_in,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < TOL, "normalize_rows seed {seed}: {err}");

        let emb = [randn(&[6, 3], &mut rng), randn(&[6, 3], &mut rng)];
        let labels = [0u32, 0, 1, 1, 2, 2];
        for margin in [TripletMargin::Soft, TripletMargin::Hard(0.3)] {
            let err = finite_difference_check(
                |t, v| {
                    let d = t.pairwise_distance(v[0])?;
                    let l = t.batch_hard_triplet(d, &labels, margin)?;
                    let e = t.l2_distance(v[0], v[1])?;
                    let e = t.sum(e);
                    t.add(l, e)
                },
                &emb,
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(err < TOL, "triplet {margin:?} seed {seed}: {err}");
        }
    }
}

#[test]
fn finite_difference_oracle_on_closed_forms() {
    let x = Tensor::full(&[7], 0.3);
    let err = finite_difference_check(|t, v| Ok(t.sum(v[0])), &[x], DEFAULT_EPS).unwrap();
    assert!(err < 1e-10, "{err}");

    // f(x) = sum x^2 at x = 1: analytic 2, central difference exactly 2 up to rounding.
    let eps = DEFAULT_EPS;
    let central = ((1.0f64 + eps).powi(2) - (1.0f64 - eps).powi(2)) / (2.0 * eps);
    assert!((central - 2.0).abs() < 1e-9);
    let mut tape = Tape::<f64>::new();
    let v = tape.param(Tensor::full(&[1], 1.0));
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap(), &[2.0]);
    let err = finite_difference_check(
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        },
        &[Tensor::full(&[1], 1.0)],
        eps,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn finite_difference_rejects_non_finite() {
    let x = Tensor::full(&[2], -1.0);
    let r = finite_difference_check(
        |t, v| {
            // sqrt of a negative sum of squares is impossible, so force NaN through a 0/0 scale.
            let s = t.sum(v[0]);
            Ok(t.scale(s, f64::NAN))
        },
        &[x],
        DEFAULT_EPS,
    );
    assert!(matches!(r, Err(Error::Numerical(_))));
}

#[test]
fn conv_relu_chain_passes_gradient_check() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let inputs = [
            randn(&[1, 2, 6, 6], &mut rng),
            randn(&[3, 2, 3, 3], &mut rng),
            randn(&[2, 3, 3, 3], &mut rng),
        ];
        let err = finite_difference_check(
            |t, v| {
                let h = t.conv2d(v[0], v[1], None, ConvSpec { stride: 1, pad: 1 })?;
                let h = t.relu(h);
                let y = t.conv2d(h, v[2], None, ConvSpec { stride: 2, pad: 1 })?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            },
            &inputs,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn second_backward_without_reset_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::full(&[3], 2.0));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Tape(_))));
    tape.reset_grads();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_populates_every_reachable_tracked_node() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::<f64>::new();
    let img = tape.constant(randn(&[2, 2, 4, 4], &mut rng));
    let w = tape.param(randn(&[3, 2, 3, 3], &mut rng));
    let h = tape.conv2d(img, w, None, ConvSpec { stride: 1, pad: 1 }).unwrap();
    let r = tape.relu(h);
    let p = tape.global_avg_pool(r).unwrap();
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    for v in [w, h, r, p, s] {
        let g = tape.grad(v).expect("populated");
        assert_eq!(g.len(), tape.value(v).numel());
    }
    assert!(tape.grad(img).is_none());
}

#[test]
fn forward_replay_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 8, 4], |_| rng.gen_range(-1.0f32..1.0)));
        let w = tape.param(Tensor::from_fn(&[5, 3, 3, 3], |_| rng.gen_range(-1.0f32..1.0)));
        let d = tape.param(Tensor::from_fn(&[5, 2, 3, 3], |_| rng.gen_range(-1.0f32..1.0)));
        let h = tape.conv2d(x, w, None, ConvSpec { stride: 2, pad: 1 }).unwrap();
        let y = tape
            .deconv2d(
                h,
                d,
                None,
                DeconvSpec {
                    stride: 2,
                    pad: 1,
                    out_pad: 1,
                },
            )
            .unwrap();
        tape.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}
