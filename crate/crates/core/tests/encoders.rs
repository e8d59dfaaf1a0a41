use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svio_autodiff::check::check_gradients;
use svio_autodiff::{Graph, ParamStore, Tensor, Var};
use svio_core::encoders::{ConvSpec, InertialEncoder, VisualEncoder};
use svio_core::layers::{init_params, LayerKind};
use svio_core::window::{Frame, ImuSample, InertialWindow, VisualWindow};
use svio_core::SvioError;

fn init(layers: &[(String, LayerKind)], seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, (prefix, kind)) in layers.iter().enumerate() {
        s.absorb(prefix, init_params(*kind, seed + i as u64).unwrap().params).unwrap();
    }
    s
}

fn visual_layers(e: &VisualEncoder) -> Vec<(String, LayerKind)> {
    let mut v: Vec<_> = e.convs.iter().map(|c| (c.prefix.clone(), c.kind())).collect();
    v.push((e.proj.prefix.clone(), e.proj.kind()));
    v
}

fn inertial_layers(e: &InertialEncoder) -> Vec<(String, LayerKind)> {
    vec![(e.rnn.prefix.clone(), e.rnn.kind()), (e.proj.prefix.clone(), e.proj.kind())]
}

fn frame(c: usize, n: usize, rng: &mut ChaCha8Rng) -> Frame {
    let mut f = Frame::zeros(c, n, n);
    f.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
    f
}

fn imu(n: usize, rng: &mut ChaCha8Rng) -> InertialWindow {
    InertialWindow::new(
        (0..n)
            .map(|_| ImuSample {
                gyro: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                accel: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            })
            .collect(),
    )
}

fn default_visual() -> VisualEncoder {
    let stack = [
        ConvSpec {
            channels: 16,
            kernel: 3,
            stride: 2,
        },
        ConvSpec {
            channels: 32,
            kernel: 3,
            stride: 2,
        },
    ];
    VisualEncoder::new(2, 16, &stack, 64).unwrap()
}

#[test]
fn zero_frames_with_zero_biases_encode_to_zero() {
    let enc = default_visual();
    let params = init(&visual_layers(&enc), 1);
    let w = VisualWindow::new([Frame::zeros(2, 16, 16), Frame::zeros(2, 16, 16)], [0.0, 0.1]).unwrap();
    let f = enc.encode(&params, &w).unwrap();
    assert_eq!(f.values.len(), 64);
    assert!(f.values.iter().all(|&v| v == 0.0));
}

#[test]
fn visual_encoding_is_deterministic_and_sized_by_conv_arithmetic() {
    let enc = default_visual();
    assert_eq!(enc.flat_size(), 32 * 4 * 4);
    let params = init(&visual_layers(&enc), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = VisualWindow::new([frame(2, 16, &mut rng), frame(2, 16, &mut rng)], [0.0, 0.1]).unwrap();
    let a = enc.encode(&params, &w).unwrap();
    assert_eq!(a, enc.encode(&params, &w).unwrap());
    assert_eq!(a.values.len(), 64);
}

#[test]
fn visual_shape_mismatch_is_dimension_error() {
    let enc = default_visual();
    let params = init(&visual_layers(&enc), 2);
    let w = VisualWindow::new([Frame::zeros(2, 8, 8), Frame::zeros(2, 8, 8)], [0.0, 0.1]).unwrap();
    assert!(matches!(enc.encode(&params, &w), Err(SvioError::Dimension(_))));
}

#[test]
fn zero_frame_size_is_rejected() {
    let stack = [ConvSpec {
        channels: 2,
        kernel: 3,
        stride: 2,
    }];
    assert!(VisualEncoder::new(1, 0, &stack, 4).is_err());
}

#[test]
fn zero_inertial_encoder_outputs_zero() {
    let enc = InertialEncoder::new(10, 6, 2, 64);
    let mut params = init(&inertial_layers(&enc), 3);
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let w = imu(10, &mut ChaCha8Rng::seed_from_u64(3));
    let f = enc.encode(&params, &w).unwrap();
    assert_eq!(f.values.len(), 64);
    assert!(f.values.iter().all(|&v| v == 0.0));
}

#[test]
fn reversing_imu_samples_changes_the_feature() {
    let enc = InertialEncoder::new(10, 6, 2, 16);
    let params = init(&inertial_layers(&enc), 4);
    let w = imu(10, &mut ChaCha8Rng::seed_from_u64(4));
    let mut rev = w.clone();
    rev.samples.reverse();
    assert_ne!(enc.encode(&params, &w).unwrap(), enc.encode(&params, &rev).unwrap());
}

#[test]
fn wrong_sample_count_is_contract_error() {
    let enc = InertialEncoder::new(10, 4, 1, 8);
    let params = init(&inertial_layers(&enc), 5);
    let w = imu(9, &mut ChaCha8Rng::seed_from_u64(5));
    assert!(matches!(enc.encode(&params, &w), Err(SvioError::Contract(_))));
}

fn probe(g: &mut Graph, y: Var) -> Var {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p).unwrap()
}

#[test]
fn visual_encoder_gradients_match_finite_differences() {
    let stack = [
        ConvSpec {
            channels: 3,
            kernel: 3,
            stride: 2,
        },
        ConvSpec {
            channels: 2,
            kernel: 3,
            stride: 2,
        },
    ];
    let enc = VisualEncoder::new(1, 8, &stack, 4).unwrap();
    let params = init(&visual_layers(&enc), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let windows = [
        VisualWindow::new([frame(1, 8, &mut rng), frame(1, 8, &mut rng)], [0.0, 0.1]).unwrap(),
        VisualWindow::new([frame(1, 8, &mut rng), frame(1, 8, &mut rng)], [0.1, 0.2]).unwrap(),
    ];
    let x = enc.batch_input(&[&windows[0], &windows[1]]).unwrap();
    let report = check_gradients(&params, 1e-5, |g, p| {
        let xv = g.constant(x.clone());
        let y = enc.forward(g, p, xv)?;
        Ok(probe(g, y))
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn inertial_encoder_gradients_match_finite_differences() {
    let enc = InertialEncoder::new(5, 3, 2, 4);
    let params = init(&inertial_layers(&enc), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let windows = [imu(5, &mut rng), imu(5, &mut rng)];
    let steps = enc.batch_input(&[&windows[0], &windows[1]]).unwrap();
    let report = check_gradients(&params, 1e-5, |g, p| {
        let vars: Vec<Var> = steps.iter().map(|t| g.constant(t.clone())).collect();
        let y = enc.forward(g, p, &vars)?;
        Ok(probe(g, y))
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}
