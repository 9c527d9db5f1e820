//! Structural properties of the fusion chain, the fine branch and the ablations.

use candle_core::{Device, Tensor};
use msirn::abf::{apply_channel_gate, apply_spatial_gate, Aspp, ChannelAttention, SpatialAttention};
use msirn::config::SpatialPooling;
use msirn::fine::{FeatureAggregation, FineBranch, MIN_WORK_SIZE};
use msirn::nn::ParamStore;
use msirn::{Ablation, Error, ModelConfig, Msirn};
use rand::{Rng, SeedableRng};

fn small() -> ModelConfig {
    let mut cfg = ModelConfig::default().with_width_scale(0.125);
    cfg.input_size = [96, 96];
    cfg
}

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn values(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

fn store() -> ParamStore {
    ParamStore::new(11, Device::Cpu)
}

#[test]
fn aspp_keeps_spatial_size() {
    let mut s = store();
    let aspp = Aspp::new(&mut s.root().sub("a"), 4, &[1, 6, 12, 18], [14, 14]).unwrap();
    let y = aspp.forward(&uniform(&[2, 4, 14, 14], 1), true).unwrap();
    assert_eq!(y.dims(), &[2, 4, 14, 14]);

    let single = Aspp::new(&mut s.root().sub("b"), 4, &[1], [14, 14]).unwrap();
    let specs = single.branch_specs();
    assert_eq!(specs.len(), 1);
    assert_eq!(specs[0].kernel, 1);

    let tiny = Aspp::new(&mut s.root().sub("c"), 4, &[1, 6, 12, 18], [2, 2]).unwrap();
    let y = tiny.forward(&uniform(&[1, 4, 2, 2], 2), false).unwrap();
    assert_eq!(y.dims(), &[1, 4, 2, 2]);
    assert!(values(&y).iter().all(|v| v.is_finite()));
}

#[test]
fn identity_and_null_gates() {
    let x = uniform(&[2, 3, 5, 4], 3);
    let ones = Tensor::ones((2, 3, 1, 1), candle_core::DType::F32, &Device::Cpu).unwrap();
    assert_eq!(values(&apply_channel_gate(&x, &ones).unwrap()), values(&x));
    let zeros = ones.zeros_like().unwrap();
    assert!(values(&apply_channel_gate(&x, &zeros).unwrap()).iter().all(|&v| v == 0.0));
    let ones = Tensor::ones((2, 1, 5, 4), candle_core::DType::F32, &Device::Cpu).unwrap();
    assert_eq!(values(&apply_spatial_gate(&x, &ones).unwrap()), values(&x));
}

#[test]
fn channel_attention_scales_each_plane_by_one_gate() {
    let mut s = store();
    let ca = ChannelAttention::new(&mut s.root().sub("ca"), 8).unwrap();
    let x = uniform(&[2, 8, 6, 6], 4).abs().unwrap().affine(1.0, 0.1).unwrap();
    let gate = values(&ca.gate(&x, false).unwrap());
    assert_eq!(gate.len(), 16);
    assert!(gate.iter().all(|g| (0.0..=1.0).contains(g)));
    let (xs, ys) = (values(&x), values(&ca.forward(&x, false).unwrap()));
    for (plane, g) in gate.iter().enumerate() {
        for i in plane * 36..(plane + 1) * 36 {
            assert!((ys[i] / xs[i] - g).abs() < 1e-5, "plane {plane}");
        }
    }
    // Positive rescaling of the input keeps the gate a valid soft mask.
    let scaled = values(&ca.gate(&(x * 7.5).unwrap(), false).unwrap());
    assert!(scaled.iter().all(|g| (0.0..=1.0).contains(g)));
}

#[test]
fn spatial_attention_shares_one_gate_across_planes() {
    let mut s = store();
    let sa = SpatialAttention::new(&mut s.root().sub("sa"), 5, SpatialPooling::ChannelMean).unwrap();
    let x = uniform(&[1, 5, 7, 9], 5).abs().unwrap().affine(1.0, 0.1).unwrap();
    let (xs, ys) = (values(&x), values(&sa.forward(&x).unwrap()));
    let plane = 63;
    for p in 0..plane {
        let r0 = ys[p] / xs[p];
        assert!((0.0..=1.0).contains(&r0));
        for c in 1..5 {
            assert!((ys[c * plane + p] / xs[c * plane + p] - r0).abs() < 1e-5);
        }
    }
    // A single pixel gives a scalar gate.
    let one = uniform(&[1, 5, 1, 1], 6);
    assert_eq!(sa.gate(&one).unwrap().dims(), &[1, 1, 1, 1]);
}

#[test]
fn zero_input_gives_constant_maps_equal_to_head_bias() {
    let model = Msirn::new(small()).unwrap();
    let rgb = Tensor::zeros((1, 3, 96, 96), candle_core::DType::F32, &Device::Cpu).unwrap();
    let depth = Tensor::zeros((1, 1, 96, 96), candle_core::DType::F32, &Device::Cpu).unwrap();
    let pred = model.forward(&rgb, &depth, false).unwrap();
    let bias = |name: &str| -> f32 {
        let (_, v) = model.params().all().find(|(n, _)| *n == name).expect(name);
        values(v.as_tensor())[0]
    };
    let sig = |b: f32| 1.0 / (1.0 + (-b).exp());
    for (level, map) in pred.coarse_levels.iter().zip(&pred.coarse) {
        let want = sig(bias(&format!("abf.level{level}.head.bias")));
        assert!(values(map).iter().all(|v| (v - want).abs() < 1e-6), "level {level}");
    }
    let want = sig(bias("fine.head.bias"));
    assert!(values(pred.fine.as_ref().unwrap()).iter().all(|v| (v - want).abs() < 1e-6));
}

#[test]
fn fused_maps_double_in_size_down_the_chain() {
    let model = Msirn::new(small()).unwrap();
    let trace = model.trace(&uniform(&[1, 3, 96, 96], 7), &uniform(&[1, 1, 96, 96], 8), false).unwrap();
    assert_eq!(trace.coarse.levels, vec![6, 5, 4, 3, 2, 1]);
    let sizes: Vec<usize> = trace.coarse.fused.iter().map(|e| e.dims4().unwrap().2).collect();
    for w in sizes.windows(2) {
        assert!(w[1] > w[0] && w[1] <= 2 * w[0], "{sizes:?}");
    }
    let fine = trace.fine.unwrap();
    let enc: Vec<_> = fine.encoded.iter().map(|t| t.dims4().unwrap().2).collect();
    let dec: Vec<_> = fine.decoded.iter().rev().map(|t| t.dims4().unwrap().2).collect();
    assert_eq!(enc, vec![12, 6, 3, 2]);
    assert_eq!(enc, dec);
}

#[test]
fn truncated_chain_has_k_maps() {
    let mut cfg = small();
    cfg.k = 3;
    let model = Msirn::new(cfg).unwrap();
    let pred = model.forward(&uniform(&[1, 3, 96, 96], 9), &uniform(&[1, 1, 96, 96], 10), false).unwrap();
    assert_eq!(pred.coarse.len(), 3);
    assert_eq!(pred.coarse_levels, vec![6, 5, 4]);
}

#[test]
fn fine_branch_at_224_uses_the_documented_schedule() {
    let cfg = ModelConfig::default().with_width_scale(0.125);
    let mut s = store();
    let fine = FineBranch::new(&mut s, &cfg, 8, cfg.fine_work_size()).unwrap();
    let out = fine.forward(&uniform(&[1, 8, 4, 4], 11), false).unwrap();
    let enc: Vec<_> = out.encoded.iter().map(|t| t.dims4().unwrap().2).collect();
    assert_eq!(enc, vec![28, 14, 7, 4]);
    assert_eq!(out.saliency.dims(), &[1, 1, 224, 224]);
}

#[test]
fn fine_branch_rejects_native_top_resolution() {
    let cfg = ModelConfig::default().with_width_scale(0.125);
    let mut s = store();
    match FineBranch::new(&mut s, &cfg, 8, [4, 4]) {
        Err(Error::InvalidConfig(msg)) => assert!(msg.contains(&MIN_WORK_SIZE.to_string()), "{msg}"),
        other => panic!("expected a size error, got {other:?}"),
    }
}

#[test]
fn feature_aggregation_preserves_shape_and_is_not_a_plain_conv() {
    let mut s = store();
    let fa = FeatureAggregation::new(&mut s.root().sub("fa"), 6, [3, 5]).unwrap();
    for size in [3, 9, 28] {
        let y = fa.forward(&uniform(&[1, 6, size, size], size as u64), true).unwrap();
        assert_eq!(y.dims(), &[1, 6, size, size]);
    }
    let plain = msirn::nn::ConvBn::new(&mut s.root().sub("plain"), msirn::nn::ConvSpec::new(6, 6, 3), true).unwrap();
    let x = uniform(&[1, 6, 9, 9], 12);
    let d: f32 = values(&(fa.forward(&x, true).unwrap() - plain.forward(&x, true).unwrap()).unwrap())
        .iter()
        .map(|v| v.abs())
        .sum();
    assert!(d > 1e-3);
}

fn count(cfg: ModelConfig) -> (usize, usize, usize, usize) {
    let m = Msirn::new(cfg).unwrap();
    (
        m.param_count(),
        m.param_count_under("rgb") + m.param_count_under("depth"),
        m.param_count_under("abf"),
        m.param_count_under("fine"),
    )
}

#[test]
fn ablations_remove_parameters_where_expected() {
    let full = count(small());
    for flag in [Ablation::CA, Ablation::SA, Ablation::SC, Ablation::FA, Ablation::FR] {
        let v = count(small().with_ablation(flag));
        assert!(v.0 < full.0, "{flag}: {} vs {}", v.0, full.0);
        assert_eq!(v.1, full.1, "{flag} touched the backbone");
    }
    let sc = count(small().with_ablation(Ablation::SC));
    assert_eq!(sc.2, full.2, "skip ablation touched the fusion chain");
    assert!(sc.3 < full.3);
    let fr = count(small().with_ablation(Ablation::FR));
    assert_eq!(fr.3, 0);
}

#[test]
fn ablated_models_route_outputs_as_documented() {
    let x = uniform(&[1, 3, 96, 96], 13);
    let d = uniform(&[1, 1, 96, 96], 14);
    let fr = Msirn::new(small().with_ablation(Ablation::FR)).unwrap();
    let p = fr.forward(&x, &d, false).unwrap();
    assert!(p.fine.is_none());
    assert_eq!(p.coarse_levels[0], 6);
    assert_eq!(values(p.final_map()), values(&p.coarse[0]));

    let cr = Msirn::new(small().with_ablation(Ablation::CR)).unwrap();
    let p = cr.forward(&x, &d, false).unwrap();
    assert!(p.coarse.is_empty());
    assert!(p.fine.is_some());
}

#[test]
fn construction_is_seeded() {
    let a = Msirn::new(small()).unwrap();
    let b = Msirn::new(small()).unwrap();
    let mut c = small();
    c.seed += 1;
    let c = Msirn::new(c).unwrap();
    let x = uniform(&[1, 3, 96, 96], 15);
    let d = uniform(&[1, 1, 96, 96], 16);
    let fa = values(a.forward(&x, &d, false).unwrap().final_map());
    assert_eq!(fa, values(b.forward(&x, &d, false).unwrap().final_map()));
    assert_ne!(fa, values(c.forward(&x, &d, false).unwrap().final_map()));
}
