mod common;

use advrf::tensor::{
    batch_masked_frobenius, masked_frobenius, Graph, NormScaling, ParamSet, ResizeMode, Tensor,
};
use advrf::Error;
use common::{check_grad, randn64, rng, scalar_fn};
use proptest::prelude::*;

/// Direct quadruple-loop convolution.
fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kk) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - kk) / stride + 1;
    let ow = (w + 2 * pad - kk) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..kk {
                            for kj in 0..kk {
                                let iy = (y * stride + ki) as isize - pad as isize;
                                let ix = (xx * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                let kv = k.data()[((oc * c + ic) * kk + ki) * kk + kj];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_identity_kernel() {
    let g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(vec![1, 1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap());
    let k = g.constant(Tensor::full(vec![1, 1, 1, 1], 1.0));
    let y = x.conv2d(k, 1, 0).unwrap();
    assert_eq!(y.value().data(), x.value().data());
}

#[test]
fn conv2d_output_shape() {
    let g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![1, 2, 8, 8]));
    let k = g.constant(Tensor::zeros(vec![3, 2, 4, 4]));
    assert_eq!(x.conv2d(k, 2, 1).unwrap().shape(), vec![1, 3, 4, 4]);
}

#[test]
fn conv2d_matches_loop_oracle() {
    let x = randn64(&[1, 1, 3, 3], 11);
    let k = randn64(&[1, 1, 2, 2], 12);
    let g = Graph::new();
    let y = g
        .constant(x.clone())
        .conv2d(g.constant(k.clone()), 1, 0)
        .unwrap();
    let oracle = naive_conv(&x, &k, 1, 0);
    for (a, b) in y.value().data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
    // a wider case with stride and padding
    let x = randn64(&[2, 3, 7, 6], 13);
    let k = randn64(&[4, 3, 3, 3], 14);
    let y = g.constant(x.clone()).conv2d(g.constant(k.clone()), 2, 1).unwrap();
    let oracle = naive_conv(&x, &k, 2, 1);
    assert_eq!(y.value().numel(), oracle.len());
    for (a, b) in y.value().data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn conv2d_channel_mismatch_names_axes() {
    let g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let k = g.constant(Tensor::zeros(vec![1, 3, 1, 1]));
    match x.conv2d(k, 1, 0) {
        Err(Error::Dimension { detail, .. }) => assert!(detail.contains("axis 1")),
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn conv_transpose_shape_and_zero_input() {
    let g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![1, 3, 4, 4]));
    let k = g.constant(Tensor::full(vec![3, 2, 4, 4], 0.3));
    let y = x.conv_transpose2d(k, 2, 1).unwrap();
    assert_eq!(y.shape(), vec![1, 2, 8, 8]);
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_transpose_equals_conv_input_gradient() {
    // conv2d: (1,2,8,8) → (1,3,4,4) with a (3,2,4,4) kernel, stride 2, pad 1.
    let x = randn64(&[1, 2, 8, 8], 21);
    let k = randn64(&[3, 2, 4, 4], 22);
    let upstream = randn64(&[1, 3, 4, 4], 23);

    let g = Graph::new();
    let xv = g.variable(x);
    let y = xv.conv2d(g.constant(k.clone()), 2, 1).unwrap();
    let loss = y.mul(g.constant(upstream.clone())).unwrap().sum();
    let grads = g.backward(loss).unwrap();
    let input_grad = grads.get(xv).unwrap().to_vec();

    let h = Graph::new();
    let t = h
        .constant(upstream)
        .conv_transpose2d(h.constant(k), 2, 1)
        .unwrap();
    assert_eq!(t.shape(), vec![1, 2, 8, 8]);
    for (a, b) in t.value().data().iter().zip(&input_grad) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gap_constant_identity_and_oracle() {
    let g = Graph::<f32>::new();
    let c = g.constant(Tensor::full(vec![2, 3, 4, 4], 3.5)).global_average_pool().unwrap();
    assert!(c.value().data().iter().all(|&v| v == 3.5));

    let one = Tensor::<f32>::new(vec![2, 3, 1, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let p = g.constant(one.clone()).global_average_pool().unwrap();
    assert_eq!(p.shape(), vec![2, 3]);
    assert_eq!(p.value().data(), one.data());

    let x = randn64(&[2, 3, 4, 4], 31);
    let h = Graph::new();
    let p = h.constant(x.clone()).global_average_pool().unwrap();
    for n in 0..2 {
        for c in 0..3 {
            let mut acc = 0.0;
            for i in 0..16 {
                acc += x.data()[(n * 3 + c) * 16 + i];
            }
            assert!((p.value().data()[n * 3 + c] - acc / 16.0).abs() < 1e-12);
        }
    }
    assert!(h.constant(Tensor::zeros(vec![2, 3])).global_average_pool().is_err());
}

#[test]
fn upsample_cases() {
    let g = Graph::<f32>::new();
    let c = g.constant(Tensor::full(vec![1, 1, 3, 3], 0.7)).upsample_bilinear(9, 12).unwrap();
    assert!(c.value().data().iter().all(|&v| (v - 0.7).abs() < 1e-6));

    let s = g.constant(Tensor::full(vec![1, 1, 1, 1], 0.3)).upsample_bilinear(4, 4).unwrap();
    assert!(s.value().data().iter().all(|&v| v == 0.3));

    let src = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    let up = g.constant(src).upsample_bilinear(4, 4).unwrap();
    let v = up.value();
    let d = v.data();
    // closed-form half-pixel bilinear weights: column j samples x = clamp((j+0.5)/2 − 0.5)
    let expected_row = [0.0, 0.25, 0.75, 1.0];
    for r in 0..4 {
        for (j, e) in expected_row.iter().enumerate() {
            assert!((d[r * 4 + j] - e).abs() < 1e-6);
        }
        assert!(d[r * 4..r * 4 + 4].windows(2).all(|w| w[0] <= w[1]));
    }

    let err = g.constant(Tensor::zeros(vec![1, 1, 4, 4])).upsample_bilinear(2, 8);
    assert!(matches!(err, Err(Error::InvalidArgument(_))));

    let n = g
        .constant(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap())
        .upsample(2, 4, ResizeMode::Nearest)
        .unwrap();
    assert_eq!(n.value().data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
}

#[test]
fn masked_frobenius_examples() {
    let g = Graph::<f64>::new();
    let a = g.constant(randn64(&[1, 2, 3, 3], 41));
    let mask = g.constant(Tensor::full(vec![1, 1, 3, 3], 0.6));
    for s in [NormScaling::None, NormScaling::Count, NormScaling::Rms] {
        assert_eq!(masked_frobenius(a, a, Some(mask), s).unwrap().item(), 0.0);
    }

    let b = g.constant(randn64(&[1, 2, 3, 3], 42));
    let zero_mask = g.constant(Tensor::zeros(vec![1, 1, 3, 3]));
    assert_eq!(
        masked_frobenius(a, b, Some(zero_mask), NormScaling::Count).unwrap().item(),
        0.0
    );

    // ones vs zeros, four elements, full mask: √4 / 4
    let ones = g.constant(Tensor::full(vec![1, 1, 2, 2], 1.0));
    let zeros = g.constant(Tensor::zeros(vec![1, 1, 2, 2]));
    let full = g.constant(Tensor::full(vec![1, 1, 2, 2], 1.0));
    let v = masked_frobenius(ones, zeros, Some(full), NormScaling::Count).unwrap().item();
    assert!((v - 0.5).abs() < 1e-15);
    let rms = masked_frobenius(ones, zeros, Some(full), NormScaling::Rms).unwrap().item();
    assert!((rms - 1.0).abs() < 1e-15);
    let raw = masked_frobenius(ones, zeros, None, NormScaling::None).unwrap().item();
    assert!((raw - 2.0).abs() < 1e-15);

    let bad = g.constant(Tensor::zeros(vec![1, 3, 2, 2]));
    assert!(masked_frobenius(ones, zeros, Some(bad), NormScaling::Rms).is_err());
}

#[test]
fn masked_frobenius_gradients_wrt_all_inputs() {
    let a = randn64(&[2, 2, 3, 3], 51);
    let b = randn64(&[2, 2, 3, 3], 52);
    let m = randn64(&[2, 1, 3, 3], 53).map(|v| 1.0 / (1.0 + (-v).exp()));
    for scaling in [NormScaling::None, NormScaling::Count, NormScaling::Rms] {
        let (b1, m1) = (b.clone(), m.clone());
        let fa = scalar_fn(move |g, x| {
            let (bb, mm) = (g.constant(b1.clone()), g.constant(m1.clone()));
            batch_masked_frobenius(x, bb, Some(mm), scaling).unwrap()
        });
        assert!(check_grad(&a, &fa) < 1e-3);
        let (a1, b1) = (a.clone(), b.clone());
        let fm = scalar_fn(move |g, x| {
            let (aa, bb) = (g.constant(a1.clone()), g.constant(b1.clone()));
            masked_frobenius(aa, bb, Some(x), scaling).unwrap()
        });
        assert!(check_grad(&m, &fm) < 1e-3);
        let (a1, m1) = (a.clone(), m.clone());
        let fb = scalar_fn(move |g, x| {
            let (aa, mm) = (g.constant(a1.clone()), g.constant(m1.clone()));
            masked_frobenius(aa, x, Some(mm), scaling).unwrap()
        });
        assert!(check_grad(&b, &fb) < 1e-3);
    }
}

#[test]
fn backward_simple_cases() {
    let g = Graph::<f64>::new();
    let x = g.variable(Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap());
    let grads = g.backward(x.sum()).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);

    let h = Graph::<f64>::new();
    let z = h.variable(Tensor::scalar(0.0));
    let grads = h.backward(z.sigmoid()).unwrap();
    assert_eq!(grads.get(z).unwrap(), &[0.25]);

    let k = Graph::<f64>::new();
    let v = k.variable(Tensor::zeros(vec![2]));
    assert!(matches!(k.backward(v), Err(Error::InvalidArgument(_))));
}

/// Random projection turning any tensor into a scalar with non-trivial upstream grads.
fn weights<'g>(g: &'g Graph<f64>, y: advrf::Var<'g, f64>) -> advrf::Var<'g, f64> {
    let w = Tensor::randn(y.shape(), 1.0, &mut rng(y.value().numel() as u64));
    y.mul(g.constant(w)).unwrap().sum()
}

#[test]
fn every_differentiable_op_matches_finite_differences() {
    type F = dyn for<'g> Fn(&'g Graph<f64>, advrf::Var<'g, f64>) -> advrf::Var<'g, f64>;
    let probe = randn64(&[2, 3, 4, 4], 60);
    let k33 = randn64(&[5, 3, 3, 3], 61);
    let kt = randn64(&[3, 2, 4, 4], 62);
    let other = randn64(&[2, 1, 4, 4], 63);
    let cases: Vec<(&str, Tensor<f64>, Box<F>)> = vec![
        ("sigmoid", probe.clone(), Box::new(move |g, x| weights(g, x.sigmoid()))),
        ("leaky_relu", probe.clone(), Box::new(move |g, x| weights(g, x.leaky_relu(0.2)))),
        ("square", probe.clone(), Box::new(move |g, x| weights(g, x.square()))),
        ("sqrt", probe.map(|v| v.abs() + 0.5), Box::new(move |g, x| weights(g, x.sqrt()))),
        ("affine", probe.clone(), Box::new(move |g, x| weights(g, x.affine(-1.5, 0.25)))),
        ("mean", probe.clone(), Box::new(|_, x| x.square().mean())),
        ("sum_per_sample", probe.clone(), Box::new(move |g, x| weights(g, x.sum_per_sample()))),
        ("gap", probe.clone(), Box::new(move |g, x| weights(g, x.global_average_pool().unwrap()))),
        ("instance_norm", probe.clone(), Box::new(move |g, x| weights(g, x.instance_norm(1e-5).unwrap()))),
        ("bilinear", probe.clone(), Box::new(move |g, x| weights(g, x.upsample_bilinear(7, 9).unwrap()))),
        (
            "conv2d/input",
            probe.clone(),
            Box::new(move |g, x| weights(g, x.conv2d(g.constant(k33.clone()), 1, 1).unwrap())),
        ),
        (
            "conv2d/kernel",
            randn64(&[5, 3, 3, 3], 64),
            Box::new(move |g, k| weights(g, g.constant(probe.clone()).conv2d(k, 2, 1).unwrap())),
        ),
        (
            "conv_transpose2d/input",
            randn64(&[2, 3, 4, 4], 65),
            Box::new(move |g, x| weights(g, x.conv_transpose2d(g.constant(kt.clone()), 2, 1).unwrap())),
        ),
        (
            "conv_transpose2d/kernel",
            randn64(&[3, 2, 4, 4], 66),
            Box::new(|g, k| {
                let x = g.constant(randn64(&[2, 3, 4, 4], 67));
                let y = x.conv_transpose2d(k, 2, 1).unwrap();
                let w = g.constant(randn64(&[2, 2, 8, 8], 68));
                y.mul(w).unwrap().sum()
            }),
        ),
        (
            "mul/broadcast",
            randn64(&[2, 3, 4, 4], 69),
            Box::new(move |g, x| weights(g, x.mul(g.constant(other.clone())).unwrap())),
        ),
        (
            "mul/broadcast-mask",
            randn64(&[2, 1, 4, 4], 70),
            Box::new(|g, m| {
                let x = g.constant(randn64(&[2, 3, 4, 4], 71));
                let y = x.mul(m).unwrap();
                let w = g.constant(randn64(&[2, 3, 4, 4], 72));
                y.mul(w).unwrap().sum()
            }),
        ),
        (
            "sub/add",
            randn64(&[1, 3, 1, 1], 73),
            Box::new(|g, b| {
                let x = g.constant(randn64(&[2, 3, 4, 4], 74));
                let y = x.add(b).unwrap().sub(b.scale(3.0)).unwrap();
                y.square().sum()
            }),
        ),
        (
            "concat",
            randn64(&[2, 2, 3, 3], 75),
            Box::new(|g, a| {
                let b = g.constant(randn64(&[2, 1, 3, 3], 76));
                let y = a.concat_channels(b).unwrap();
                let w = g.constant(randn64(&[2, 3, 3, 3], 77));
                y.mul(w).unwrap().sum()
            }),
        ),
        (
            "linear+cross_entropy",
            randn64(&[4, 6], 78),
            Box::new(|g, x| {
                let w = g.constant(randn64(&[5, 6], 79));
                x.linear(w).unwrap().cross_entropy(&[0, 4, 2, 2]).unwrap()
            }),
        ),
        (
            "linear/weight",
            randn64(&[5, 6], 80),
            Box::new(|g, w| {
                let x = g.constant(randn64(&[4, 6], 81));
                x.linear(w).unwrap().cross_entropy(&[1, 3, 0, 4]).unwrap()
            }),
        ),
    ];
    for (name, x, f) in &cases {
        let err = check_grad(x, f.as_ref());
        assert!(err < 1e-3, "{name}: relative gradient error {err}");
    }
}

#[test]
fn frozen_params_receive_no_gradient() {
    let mut live = ParamSet::<f64>::new();
    live.insert("w", randn64(&[2, 3, 3, 3], 90)).unwrap();
    let mut frozen = ParamSet::<f64>::new();
    frozen.insert("w", randn64(&[4, 2, 3, 3], 91)).unwrap();
    frozen.freeze();

    let g = Graph::new();
    let (bl, bf) = (live.bind(&g), frozen.bind(&g));
    let x = g.constant(randn64(&[1, 3, 6, 6], 92));
    let h = x.conv2d(bl.get("w").unwrap(), 1, 1).unwrap().sigmoid();
    let y = h.conv2d(bf.get("w").unwrap(), 1, 0).unwrap();
    let grads = g.backward(y.square().mean()).unwrap();
    live.accumulate(&bl, &grads).unwrap();
    frozen.accumulate(&bf, &grads).unwrap();
    assert!(live.max_abs_grad() > 0.0);
    frozen.zero_grad();
    assert_eq!(frozen.max_abs_grad(), 0.0);
    assert!(grads.get(bf.get("w").unwrap()).is_none());
}

#[test]
fn cross_entropy_rejects_unknown_label() {
    let g = Graph::<f32>::new();
    let l = g.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(l.cross_entropy(&[0, 3]), Err(Error::InvalidArgument(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_adjointness(
        seed in 0u64..1000,
        c in 1usize..4, o in 1usize..4, k in 1usize..4,
        stride in 1usize..3, pad in 0usize..2, h in 4usize..8,
    ) {
        let x = randn64(&[1, c, h, h], seed);
        let kern = randn64(&[o, c, k, k], seed + 1);
        let g = Graph::new();
        let y = g.constant(x.clone()).conv2d(g.constant(kern.clone()), stride, pad).unwrap();
        let ys = y.shape();
        // Only shapes where conv_transpose reproduces the input size are adjoint pairs.
        prop_assume!(((ys[2] - 1) * stride + k).checked_sub(2 * pad) == Some(h));
        let probe = randn64(&ys, seed + 2);
        let lhs: f64 = y.value().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        let t = g.constant(probe).conv_transpose2d(g.constant(kern), stride, pad).unwrap();
        let rhs: f64 = t.value().data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-4 * (1.0 + lhs.abs()));
    }

    #[test]
    fn gap_preserves_channel_sums(seed in 0u64..1000, c in 1usize..5, h in 1usize..6) {
        let x = randn64(&[2, c, h, h], seed);
        let g = Graph::new();
        let p = g.constant(x.clone()).global_average_pool().unwrap();
        for n in 0..2 {
            let out: f64 = p.value().data()[n * c..(n + 1) * c].iter().sum();
            let per = c * h * h;
            let direct: f64 = x.data()[n * per..(n + 1) * per].iter().sum::<f64>() / (h * h) as f64;
            prop_assert!((out - direct).abs() < 1e-9);
        }
    }
}
