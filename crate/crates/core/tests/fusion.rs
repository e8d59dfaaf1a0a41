use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svio_autodiff::check::check_gradients;
use svio_autodiff::{Graph, ParamStore, Tensor};
use svio_core::encoders::{ConvSpec, FeatureVector, Modality};
use svio_core::fusion::{
    fuse_direct, fuse_hard, fuse_soft, gumbel, gumbel_max_gate, gumbel_noise, gumbel_softmax_gate,
    relaxed_gates, FusionMask, GateStage, MaskMode, MaskNetwork, MaskProbabilities,
    hard_masks_from_probabilities,
};
use svio_core::layers::init_params;
use svio_core::model::{Batch, FusionMode, GateNoise, Gating, HardGates, Model, ModelConfig};
use svio_core::sim::{generate_dataset, DegradationSpec, SimConfig};

fn mask_net(nv: usize, ni: usize, seed: u64) -> (MaskNetwork, ParamStore) {
    let net = MaskNetwork::new(nv, ni);
    let mut s = ParamStore::new();
    for (i, l) in [&net.visual, &net.inertial].into_iter().enumerate() {
        s.absorb(&l.prefix, init_params(l.kind(), seed + i as u64).unwrap().params).unwrap();
    }
    (net, s)
}

fn fv(m: Modality, n: usize, rng: &mut ChaCha8Rng) -> FeatureVector {
    FeatureVector {
        modality: m,
        values: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
    }
}

#[test]
fn zero_mask_network_gives_one_half() {
    let (net, mut s) = mask_net(3, 2, 1);
    for (_, t) in s.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (fv(Modality::Visual, 3, &mut rng), fv(Modality::Inertial, 2, &mut rng));
    let m = net.soft_masks(&s, &a, &b).unwrap();
    assert!(m.visual.iter().chain(&m.inertial).all(|&v| v == 0.5));
    let p = net.mask_probabilities(&s, &a, &b).unwrap();
    assert!(p.visual.iter().chain(&p.inertial).all(|&v| v == 0.5));
}

#[test]
fn masks_stay_inside_the_unit_interval() {
    let (net, s) = mask_net(6, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let (a, b) = (fv(Modality::Visual, 6, &mut rng), fv(Modality::Inertial, 4, &mut rng));
        let m = net.soft_masks(&s, &a, &b).unwrap();
        assert_eq!(m.mode, MaskMode::Soft);
        assert!(m.visual.iter().chain(&m.inertial).all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn mask_network_gradients_match_finite_differences() {
    let (net, s) = mask_net(3, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let av = Tensor::new(vec![2, 3], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let ai = Tensor::new(vec![2, 2], (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let report = check_gradients(&s, 1e-5, |g, p| {
        let (v, i) = (g.constant(av.clone()), g.constant(ai.clone()));
        let (sv, si) = net.forward(g, p, v, i)?;
        let fv = g.mul(v, sv)?;
        let fi = g.mul(i, si)?;
        let z = g.concat(&[fv, fi], 1)?;
        let z = g.square(z)?;
        g.sum(z)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn gumbel_mean_matches_euler_mascheroni() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = gumbel_noise(&[100_000], &mut rng);
    let mean = t.data().iter().sum::<f64>() / 1e5;
    assert!((mean - 0.5772).abs() < 0.01, "mean {mean}");
}

#[test]
fn binary_keep_rate_matches_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for pi in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let n = 100_000;
        let kept: f64 = (0..n).map(|_| gumbel_max_gate(pi, gumbel(&mut rng), gumbel(&mut rng))).sum();
        let rate = kept / n as f64;
        let se = (pi * (1.0 - pi) / n as f64).sqrt();
        assert!((rate - pi).abs() < 3.0 * se, "pi {pi}: rate {rate}");
        if pi == 0.3 {
            assert!((rate - 0.3).abs() < 0.01);
        }
    }
}

#[test]
fn saturated_probability_keeps_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let probs = MaskProbabilities {
        visual: vec![1.0 - 1e-12; 100],
        inertial: vec![1.0 - 1e-12; 100],
    };
    let mut zeros = 0usize;
    for _ in 0..50 {
        let m = hard_masks_from_probabilities(&probs, GateStage::Binary, &mut rng).unwrap();
        assert_eq!(m.mode, MaskMode::HardBinary);
        zeros += m.visual.iter().chain(&m.inertial).filter(|&&v| v == 0.0).count();
    }
    // Expected count is 10^4 · 1e-12, so any drop exceeds it.
    assert_eq!(zeros, 0);
}

#[test]
fn hard_masks_are_seed_deterministic() {
    let (net, s) = mask_net(4, 4, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (a, b) = (fv(Modality::Visual, 4, &mut rng), fv(Modality::Inertial, 4, &mut rng));
    for stage in [GateStage::Binary, GateStage::Relaxed { tau: 0.7 }] {
        let m1 = net.hard_masks(&s, &a, &b, stage, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let m2 = net.hard_masks(&s, &a, &b, stage, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(m1, m2);
    }
}

/// E[h] at τ = 1: the keep/drop noise difference is standard logistic, so
/// the relaxed gate is σ(logit π + L). Midpoint quadrature over L.
fn relaxed_mean_quadrature(pi: f64) -> f64 {
    let a = (pi / (1.0 - pi)).ln();
    let (lo, hi, n) = (-40.0, 40.0, 200_000);
    let h = (hi - lo) / n as f64;
    (0..n)
        .map(|i| {
            let x = lo + (i as f64 + 0.5) * h;
            let pdf = (-x).exp() / (1.0 + (-x).exp()).powi(2);
            pdf / (1.0 + (-(a + x)).exp()) * h
        })
        .sum()
}

#[test]
fn relaxed_gate_mean_matches_logistic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut last = 0.0;
    for pi in [0.1, 0.2, 0.3, 0.5, 0.7, 0.8, 0.9] {
        let n = 20_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| gumbel_softmax_gate(pi, gumbel(&mut rng), gumbel(&mut rng), 1.0).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expected = relaxed_mean_quadrature(pi);
        assert!((mean - expected).abs() < 3.0 * (var / n as f64).sqrt(), "pi {pi}: {mean} vs {expected}");
        // Biased toward 1/2 but order preserving.
        assert!((mean - 0.5).abs() <= (pi - 0.5).abs() + 1e-2);
        assert!(mean > last);
        last = mean;
    }
}

#[test]
fn lower_temperature_pushes_gates_toward_binary() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch: Vec<(f64, f64, f64)> = (0..2000)
        .map(|_| (rng.random_range(0.05..0.95), gumbel(&mut rng), gumbel(&mut rng)))
        .collect();
    let distance = |tau: f64| {
        batch
            .iter()
            .map(|&(p, k, d)| {
                let h = gumbel_softmax_gate(p, k, d, tau).unwrap();
                h.min(1.0 - h)
            })
            .sum::<f64>()
            / batch.len() as f64
    };
    let (d1, d5, d01) = (distance(1.0), distance(0.5), distance(0.1));
    assert!(d1 > d5 && d5 > d01, "{d1} {d5} {d01}");
}

#[test]
fn relaxed_gates_pass_gradient_binary_gates_do_not() {
    let mut s = ParamStore::new();
    s.insert("alpha", Tensor::vector(vec![0.3, 0.6, 0.8])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let nk = gumbel_noise(&[3], &mut rng);
    let nd = gumbel_noise(&[3], &mut rng);
    let mut g = Graph::new();
    let a = g.param_from(&s, "alpha").unwrap();
    let h = relaxed_gates(&mut g, a, &nk, &nd, 0.5, false).unwrap();
    let l = g.sum(h).unwrap();
    let grads = g.backward(l, &s).unwrap();
    assert!(grads.get("alpha").unwrap().data().iter().all(|&v| v != 0.0));

    let mut g = Graph::new();
    let a = g.param_from(&s, "alpha").unwrap();
    let bin = svio_core::fusion::binary_gates(g.value(a), &nk, &nd).unwrap();
    let b = g.constant(bin);
    let l = g.sum(b).unwrap();
    let grads = g.backward(l, &s).unwrap();
    assert!(grads.get("alpha").unwrap().data().iter().all(|&v| v == 0.0));
    assert_eq!(grads.unreached(), ["alpha".to_string()]);
}

#[test]
fn straight_through_forward_is_binary() {
    let mut s = ParamStore::new();
    s.insert("alpha", Tensor::vector(vec![0.3, 0.6, 0.8, 0.1])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let nk = gumbel_noise(&[4], &mut rng);
    let nd = gumbel_noise(&[4], &mut rng);
    let mut g = Graph::new();
    let a = g.param_from(&s, "alpha").unwrap();
    let h = relaxed_gates(&mut g, a, &nk, &nd, 0.5, true).unwrap();
    assert!(g.value(h).data().iter().all(|&v| v == 0.0 || v == 1.0));
    let l = g.sum(h).unwrap();
    let grads = g.backward(l, &s).unwrap();
    assert!(grads.get("alpha").unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn unit_masks_reproduce_direct_fusion_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let nv = rng.random_range(1..8);
        let ni = rng.random_range(1..8);
        let (a, b) = (fv(Modality::Visual, nv, &mut rng), fv(Modality::Inertial, ni, &mut rng));
        let direct = fuse_direct(&a, &b).unwrap();
        let soft = fuse_soft(&a, &b, &FusionMask::ones(nv, ni, MaskMode::Soft)).unwrap();
        let hard = fuse_hard(&a, &b, &FusionMask::ones(nv, ni, MaskMode::HardBinary)).unwrap();
        assert_eq!(soft, direct);
        assert_eq!(hard, direct);
    }
}

fn tiny(fusion: FusionMode) -> ModelConfig {
    ModelConfig {
        fusion,
        frame_channels: 1,
        frame_size: 6,
        visual_convs: vec![ConvSpec {
            channels: 2,
            kernel: 3,
            stride: 2,
        }],
        visual_features: 3,
        imu_samples: 3,
        inertial_hidden: 2,
        inertial_layers: 1,
        inertial_features: 3,
        temporal_hidden: 3,
        temporal_layers: 1,
    }
}

fn tiny_data() -> svio_core::sim::Dataset {
    let mut sim = SimConfig::default();
    sim.camera.channels = 1;
    sim.camera.size = 6;
    sim.dynamics.imu_ratio = 3;
    sim.windows_per_trajectory = 4;
    generate_dataset(&sim, 4, 3, &DegradationSpec::preset("clean", 0).unwrap()).unwrap()
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let ds = tiny_data();
    let seqs: Vec<&[_]> = vec![&ds.windows[0..2], &ds.windows[2..4]];
    let batch = Batch::from_sequences(&seqs).unwrap();
    for mode in FusionMode::ALL {
        let model = Model::new(&tiny(mode)).unwrap();
        let params = model.init(21).unwrap();
        let noise = GateNoise::sample(4, 3, 3, &mut ChaCha8Rng::seed_from_u64(4));
        let gating = match mode {
            FusionMode::Hard => Gating::Learned(HardGates::Relaxed {
                tau: 0.8,
                straight_through: false,
                noise,
            }),
            _ => Gating::Learned(HardGates::None),
        };
        let report = check_gradients(&params, 1e-5, |g, p| {
            let (loss, _) = model.loss(g, p, &batch, &gating, 100.0)?;
            Ok(loss)
        })
        .unwrap();
        assert!(report.passes(1e-3), "{mode}: {report:?}");
    }
}

#[test]
fn mask_network_receives_gradient_in_soft_and_hard_modes() {
    let ds = tiny_data();
    let seqs: Vec<&[_]> = vec![&ds.windows[0..4]];
    let batch = Batch::from_sequences(&seqs).unwrap();
    for mode in [FusionMode::Soft, FusionMode::Hard] {
        let model = Model::new(&tiny(mode)).unwrap();
        let params = model.init(5).unwrap();
        let gating = Gating::Learned(match mode {
            FusionMode::Hard => HardGates::Relaxed {
                tau: 1.0,
                straight_through: false,
                noise: GateNoise::sample(4, 3, 3, &mut ChaCha8Rng::seed_from_u64(5)),
            },
            _ => HardGates::None,
        });
        let mut g = Graph::new();
        let (loss, _) = model.loss(&mut g, &params, &batch, &gating, 100.0).unwrap();
        let grads = g.backward(loss, &params).unwrap();
        assert!(grads.unreached().is_empty(), "{:?}", grads.unreached());
        let norm: f64 = grads
            .iter()
            .filter(|(n, _)| n.starts_with("fusion."))
            .flat_map(|(_, t)| t.data().iter())
            .map(|v| v * v)
            .sum();
        assert!(norm > 0.0, "{mode}");
    }
}
