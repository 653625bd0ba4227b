mod common;

use advrf::discrepancy::{
    amplify, decompose, ema_update, parameterization_loss, pattern_map, save_mask_png, PatternMap,
    Resolution,
};
use advrf::models::{AdvrfModels, Architecture};
use advrf::tensor::{masked_frobenius, Graph, NormScaling, ParamSet, ResizeMode, Tensor};
use advrf::Error;
use common::rng;
use proptest::prelude::*;

fn models64(seed: u64, init_std: f64, init_bias: f64) -> AdvrfModels<f64> {
    let arch = Architecture {
        pattern_init_std: init_std,
        pattern_init_bias: init_bias,
        ..Architecture::default()
    };
    AdvrfModels::new(&arch, &mut rng(seed)).unwrap()
}

#[test]
fn constant_map_amplifies_to_constant() {
    let g = Graph::<f32>::new();
    let m = PatternMap::new(g.constant(Tensor::full(vec![2, 1, 8, 8], 0.7)), Resolution::Feature).unwrap();
    let f = g.constant(Tensor::uniform(vec![2, 4, 8, 8], -1.0, 1.0, &mut rng(0)));
    let (big, f_i) = amplify(m, f, 32, 32, ResizeMode::Bilinear).unwrap();
    assert_eq!(big.resolution, Resolution::Image);
    assert_eq!(f_i.shape(), vec![2, 4, 32, 32]);
    assert!(big.values.value().data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
}

#[test]
fn amplify_at_image_size_is_identity() {
    let g = Graph::<f32>::new();
    let mt = Tensor::uniform(vec![1, 1, 16, 16], 0.1, 0.9, &mut rng(1));
    let ft = Tensor::uniform(vec![1, 3, 16, 16], -1.0, 1.0, &mut rng(2));
    let m = PatternMap::new(g.constant(mt.clone()), Resolution::Feature).unwrap();
    let (big, f_i) = amplify(m, g.constant(ft.clone()), 16, 16, ResizeMode::Bilinear).unwrap();
    assert_eq!(big.values.value().data(), mt.data());
    assert_eq!(f_i.value().data(), ft.data());
}

#[test]
fn amplify_preserves_monotone_ramps() {
    let g = Graph::<f64>::new();
    let ramp: Vec<f64> = (0..64).map(|i| 0.05 + 0.9 * (i % 8) as f64 / 7.0).collect();
    let m = PatternMap::new(g.constant(Tensor::new(vec![1, 1, 8, 8], ramp).unwrap()), Resolution::Feature).unwrap();
    let f = g.constant(Tensor::zeros(vec![1, 1, 8, 8]));
    let (big, _) = amplify(m, f, 32, 32, ResizeMode::Bilinear).unwrap();
    let v = big.values.value();
    for row in 0..32 {
        for col in 1..32 {
            assert!(v.data()[row * 32 + col] >= v.data()[row * 32 + col - 1] - 1e-12);
        }
    }
    assert!(v.data().iter().all(|&x| x > 0.0 && x < 1.0));
}

#[test]
fn amplify_rejects_shrinking_and_wrong_resolution() {
    let g = Graph::<f32>::new();
    let m = PatternMap::new(g.constant(Tensor::full(vec![1, 1, 8, 8], 0.5)), Resolution::Feature).unwrap();
    let f = g.constant(Tensor::zeros(vec![1, 2, 8, 8]));
    assert!(matches!(
        amplify(m, f, 4, 4, ResizeMode::Bilinear),
        Err(Error::InvalidArgument(_))
    ));
    let img = PatternMap::new(m.values, Resolution::Image).unwrap();
    assert!(matches!(
        amplify(img, f, 32, 32, ResizeMode::Bilinear),
        Err(Error::ContractViolation(_))
    ));
}

#[test]
fn decompose_extremes() {
    let g = Graph::<f32>::new();
    let ft = Tensor::uniform(vec![2, 3, 4, 4], -2.0, 2.0, &mut rng(3));
    let f = g.constant(ft.clone());
    let ones = PatternMap::new(g.constant(Tensor::full(vec![2, 1, 4, 4], 1.0)), Resolution::Image).unwrap();
    let p = decompose(f, &ones).unwrap();
    assert_eq!(p.c_a.value().data(), ft.data());
    assert!(p.c_r.value().data().iter().all(|&v| v == 0.0));
    let half = PatternMap::new(g.constant(Tensor::full(vec![2, 1, 4, 4], 0.5)), Resolution::Image).unwrap();
    let p = decompose(f, &half).unwrap();
    assert_eq!(p.c_a.value().data(), p.c_r.value().data());
    for (a, &x) in p.c_a.value().data().iter().zip(ft.data()) {
        assert_eq!(*a, x / 2.0);
    }
}

fn ulps(a: f32, b: f32) -> u32 {
    if a == b {
        return 0;
    }
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs() as u32
}

#[test]
fn decompose_rejects_mismatched_shapes() {
    let g = Graph::<f32>::new();
    let m = PatternMap::new(g.constant(Tensor::full(vec![1, 1, 8, 8], 0.5)), Resolution::Image).unwrap();
    let f = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    assert!(matches!(decompose(f, &m), Err(Error::Dimension { .. })));
}

#[test]
fn parameterization_loss_is_zero_at_target() {
    let g = Graph::<f64>::new();
    let c_a = g.constant(common::randn64(&[3, 5, 4, 4], 4));
    let e = g.variable((*c_a.global_average_pool().unwrap().value()).clone());
    let l = parameterization_loss(e, c_a, NormScaling::Rms).unwrap();
    assert_eq!(l.item(), 0.0);
}

#[test]
fn parameterization_loss_of_uniform_offset_is_epsilon() {
    let eps = 0.25;
    let (n, d) = (4, 16);
    let g = Graph::<f64>::new();
    let c_a = g.constant(common::randn64(&[n, d, 4, 4], 5));
    let target = c_a.global_average_pool().unwrap().value();
    let shifted = target.map(|v| v + eps);
    let e = g.variable(shifted.clone());
    let l = parameterization_loss(e, c_a, NormScaling::Rms).unwrap().item();
    assert!((l - eps).abs() < 1e-12, "{l}");
    // same number through the norm op directly, one sample at a time
    let mut acc = 0.0;
    for i in 0..n {
        let a = g.constant(shifted.select(i));
        let b = g.constant(target.select(i));
        acc += masked_frobenius(a, b, None, NormScaling::Rms).unwrap().item();
    }
    assert!((l - acc / n as f64).abs() < 1e-12);
}

#[test]
fn parameterization_loss_never_reaches_the_encoder() {
    let mut m = models64(6, 0.3, -2.0);
    let g = Graph::new();
    let x = g.constant(Tensor::uniform(vec![2, 3, 32, 32], 0.0, 1.0, &mut rng(7)));
    let pr = m.retrieval.params.bind(&g);
    let pe = m.recon_enc.params.bind(&g);
    let (f, e) = m.retrieval.forward(&pr, x).unwrap();
    let f_hat = m.recon_enc.forward(&pe, x).unwrap();
    let (mm, f_i) = amplify(pattern_map(f, &m.mean_gen).unwrap(), f_hat, 32, 32, ResizeMode::Bilinear).unwrap();
    let pair = decompose(f_i, &mm).unwrap();
    let l = parameterization_loss(e, pair.c_a, NormScaling::Rms).unwrap();
    let grads = g.backward(l).unwrap();
    m.recon_enc.params.accumulate(&pe, &grads).unwrap();
    m.retrieval.params.accumulate(&pr, &grads).unwrap();
    assert_eq!(m.recon_enc.params.max_abs_grad(), 0.0);
    assert!(m.retrieval.params.max_abs_grad() > 0.0);
}

#[test]
fn parameterization_step_reduces_the_loss() {
    // linear probe E = x·Wᵀ towards a fixed pooled target
    let x = common::randn64(&[6, 8], 8);
    let c_a = common::randn64(&[6, 4, 3, 3], 9);
    let mut probe = ParamSet::new();
    probe.insert("w", common::randn64(&[4, 8], 10)).unwrap();
    let eval = |probe: &mut ParamSet<f64>, step: bool| {
        let g = Graph::new();
        let p = probe.bind(&g);
        let e = g.constant(x.clone()).linear(p.get("w").unwrap()).unwrap();
        let l = parameterization_loss(e, g.constant(c_a.clone()), NormScaling::Rms).unwrap();
        if step {
            let grads = g.backward(l).unwrap();
            probe.zero_grad();
            probe.accumulate(&p, &grads).unwrap();
            probe.sgd_momentum_step(1e-3, 0.0, 0.0).unwrap();
        }
        l.item()
    };
    let before = eval(&mut probe, true);
    let after = eval(&mut probe, false);
    assert!(after <= before, "{after} > {before}");
}

#[test]
fn ema_contracts_towards_a_constant_target() {
    for delta in [0.1, 0.2, 0.8] {
        let m = models64(11, 0.5, -2.0);
        let mut mean = m.mean_gen.clone();
        let mut live = m.pattern_gen.clone();
        for (_, t) in live.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v + 1.0);
        }
        let theta0: Vec<f64> = mean.params().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        let target: Vec<f64> = live.params.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        for t in 1..=100 {
            ema_update(&mut mean, &live, delta).unwrap();
            let keep = (1.0 - delta).powi(t);
            let got: Vec<f64> = mean.params().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
            for ((g, l), z) in got.iter().zip(&target).zip(&theta0) {
                let want = (1.0 - keep) * l + keep * z;
                assert!((g - want).abs() < 1e-6, "δ={delta} t={t}: {g} vs {want}");
            }
        }
    }
}

#[test]
fn zero_initialized_generator_writes_gray_masks() {
    let m = models64(12, 0.0, 0.0);
    let g = Graph::new();
    let pr = m.retrieval.params.bind(&g);
    let x = g.constant(Tensor::uniform(vec![1, 3, 32, 32], 0.0, 1.0, &mut rng(13)));
    let (f, _) = m.retrieval.forward(&pr, x).unwrap();
    let mask = pattern_map(f, &m.mean_gen).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mask.png");
    save_mask_png(&mask.values.value(), &path).unwrap();
    let img = image::open(&path).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (8, 8));
    assert!(img.pixels().all(|p| p[0].abs_diff(128) <= 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn decomposition_sums_back_within_one_ulp(seed in 0u64..10_000) {
        let g = Graph::<f32>::new();
        let ft = Tensor::uniform(vec![2, 3, 6, 6], -3.0, 3.0, &mut rng(seed));
        let mt = Tensor::uniform(vec![2, 1, 6, 6], 0.0, 1.0, &mut rng(seed + 1));
        let m = PatternMap::new(g.constant(mt), Resolution::Image).unwrap();
        let p = decompose(g.constant(ft.clone()), &m).unwrap();
        let (a, r) = (p.c_a.value(), p.c_r.value());
        for i in 0..ft.numel() {
            prop_assert!(ulps(a.data()[i] + r.data()[i], ft.data()[i]) <= 1);
        }
    }

    #[test]
    fn ema_never_moves_away_from_the_target(delta in 0.01f64..=1.0, steps in 1usize..20) {
        let m = models64(14, 0.5, -2.0);
        let mut mean = m.mean_gen.clone();
        let mut live = m.pattern_gen.clone();
        for (_, t) in live.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
        }
        let gap = |mean: &advrf::models::MeanGenerator<f64>| -> f64 {
            mean.params().iter().zip(live.params.iter())
                .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
                .fold(0.0, f64::max)
        };
        let g0 = gap(&mean);
        for _ in 0..steps {
            ema_update(&mut mean, &live, delta).unwrap();
        }
        prop_assert!(gap(&mean) <= (1.0 - delta).powi(steps as i32) * g0 + 1e-12);
    }
}
