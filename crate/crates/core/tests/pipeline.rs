use std::path::PathBuf;

use svio_core::encoders::ConvSpec;
use svio_core::eval::{analyze_masks, evaluate, evaluate_predictions, run_model, EvalOptions};
use svio_core::model::{FusionMode, Model, ModelConfig};
use svio_core::odometry::PoseDelta;
use svio_core::sim::{generate_dataset, DegradationSpec, SimConfig};
use svio_core::train::{
    load_checkpoint, save_checkpoint, train, Adam, AdamConfig, Checkpoint, TrainConfig,
};
use svio_core::SvioError;
use svio_autodiff::{GradientMap, ParamStore, Tensor};

fn tiny_model(fusion: FusionMode) -> ModelConfig {
    ModelConfig {
        fusion,
        visual_convs: vec![
            ConvSpec {
                channels: 4,
                kernel: 3,
                stride: 2,
            },
            ConvSpec {
                channels: 4,
                kernel: 3,
                stride: 2,
            },
        ],
        visual_features: 8,
        inertial_hidden: 6,
        inertial_layers: 1,
        inertial_features: 8,
        temporal_hidden: 8,
        temporal_layers: 1,
        ..ModelConfig::default()
    }
}

fn tiny_train(fusion: FusionMode) -> TrainConfig {
    TrainConfig {
        model: tiny_model(fusion),
        batch_size: 1,
        learning_rate: 1e-3,
        epochs: 10,
        seq_len: 4,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn twenty_windows() -> svio_core::sim::Dataset {
    let sim = SimConfig {
        windows_per_trajectory: 20,
        ..SimConfig::default()
    };
    generate_dataset(&sim, 20, 5, &DegradationSpec::preset("clean", 0).unwrap()).unwrap()
}

fn tmp(dir: &tempfile::TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

#[test]
fn adam_first_step_moves_lr_against_gradient() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::scalar(1.0)).unwrap();
    let mut g = GradientMap::default();
    g.insert("w", Tensor::scalar(1.0));
    Adam::new(AdamConfig::default()).step(&mut p, &g, 0.1).unwrap();
    let w = p.get("w").unwrap().item().unwrap();
    assert!((w - 0.9).abs() < 1e-6, "w = {w}");
}

#[test]
fn adam_rejects_shape_mismatch() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
    let mut g = GradientMap::default();
    g.insert("w", Tensor::vector(vec![1.0]));
    let err = Adam::new(AdamConfig::default()).step(&mut p, &g, 0.1);
    assert!(matches!(err, Err(SvioError::Contract(_))));
}

#[test]
fn fifty_steps_reduce_loss_in_every_mode() {
    let ds = twenty_windows();
    for mode in FusionMode::ALL {
        let out = train(&tiny_train(mode), &ds).unwrap();
        assert_eq!(out.step_losses.len(), 50);
        let (first, last) = (out.curve[0].loss, out.curve.last().unwrap().loss);
        assert!(last < first, "{mode}: {first} -> {last}");
    }
}

#[test]
fn training_is_bit_reproducible() {
    let ds = twenty_windows();
    let cfg = tiny_train(FusionMode::Hard);
    let a = train(&cfg, &ds).unwrap();
    let b = train(&cfg, &ds).unwrap();
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(
        Checkpoint::new(&cfg, a.params).to_bytes(),
        Checkpoint::new(&cfg, b.params).to_bytes()
    );
}

#[test]
fn vision_only_has_no_inertial_or_fusion_parameters() {
    let model = Model::new(&tiny_model(FusionMode::VisionOnly)).unwrap();
    let params = model.init(1).unwrap();
    assert!(params.names().all(|n| !n.starts_with("inertial.") && !n.starts_with("fusion.")));
    let soft = Model::new(&tiny_model(FusionMode::Soft)).unwrap().init(1).unwrap();
    assert!(soft.names().any(|n| n.starts_with("fusion.")));
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation() {
    let ds = twenty_windows();
    let cfg = TrainConfig {
        epochs: 2,
        ..tiny_train(FusionMode::Hard)
    };
    let out = train(&cfg, &ds).unwrap();
    let ckpt = Checkpoint::new(&cfg, out.params);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&tmp(&dir, "m.ckpt"), &ckpt).unwrap();
    let loaded = load_checkpoint(&tmp(&dir, "m.ckpt")).unwrap();
    assert_eq!(loaded, ckpt);
    let opts = EvalOptions::for_checkpoint(&ckpt).unwrap();
    assert_eq!(evaluate(&ckpt, &ds, &opts).unwrap(), evaluate(&loaded, &ds, &opts).unwrap());
}

#[test]
fn corrupted_checkpoint_fails_checksum() {
    let cfg = tiny_train(FusionMode::Soft);
    let params = Model::new(&cfg.model).unwrap().init(3).unwrap();
    let mut bytes = Checkpoint::new(&cfg, params).to_bytes();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(SvioError::Checksum { .. })));
}

#[test]
fn mismatched_config_lists_offending_parameters() {
    let small = tiny_train(FusionMode::Soft);
    let params = Model::new(&small.model).unwrap().init(3).unwrap();
    let mut bigger = small.clone();
    bigger.model.temporal_hidden = 12;
    let ckpt = Checkpoint::new(&bigger, params);
    match ckpt.model() {
        Err(SvioError::ParamMismatch(names)) => {
            assert!(names.iter().all(|n| n.starts_with("temporal.")), "{names:?}");
            assert!(!names.is_empty());
        }
        other => panic!("expected mismatch, got {other:?}"),
    }
}

#[test]
fn ground_truth_against_itself_scores_zero() {
    let truth: Vec<PoseDelta> = twenty_windows().windows.iter().map(|w| w.truth).collect();
    assert_eq!(evaluate_predictions(&truth, &truth).unwrap(), (0.0, 0.0));
}

#[test]
fn zero_predictor_error_equals_mean_step_length() {
    let ds = twenty_windows();
    let cfg = tiny_train(FusionMode::Direct);
    let model = Model::new(&cfg.model).unwrap();
    let mut params = model.init(0).unwrap();
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let records = run_model(&model, &params, &ds, &EvalOptions::default()).unwrap();
    let preds: Vec<_> = records.iter().map(|r| r.prediction).collect();
    assert!(preds.iter().all(|p| p.as_array() == [0.0; 6]));
    let truth: Vec<_> = ds.windows.iter().map(|w| w.truth).collect();
    let (t, _) = evaluate_predictions(&preds, &truth).unwrap();
    let mean_len = truth.iter().map(PoseDelta::translation_norm).sum::<f64>() / truth.len() as f64;
    assert!((t - mean_len).abs() < 1e-12);
}

#[test]
fn evaluation_is_deterministic_and_sees_every_window() {
    let ds = twenty_windows();
    let cfg = tiny_train(FusionMode::Hard);
    let ckpt = Checkpoint::new(&cfg, Model::new(&cfg.model).unwrap().init(2).unwrap());
    let opts = EvalOptions {
        seq_len: 6,
        ..EvalOptions::default()
    };
    let a = evaluate(&ckpt, &ds, &opts).unwrap();
    assert_eq!(a, evaluate(&ckpt, &ds, &opts).unwrap());
    assert_eq!(a.steps, ds.windows.len());
    assert!(a.translation >= 0.0 && a.rotation_deg >= 0.0);
}

#[test]
fn mask_analysis_rejects_unmasked_modes() {
    let ds = twenty_windows();
    for mode in [FusionMode::Direct, FusionMode::VisionOnly] {
        let cfg = tiny_train(mode);
        let ckpt = Checkpoint::new(&cfg, Model::new(&cfg.model).unwrap().init(2).unwrap());
        let err = analyze_masks(&ckpt, &ds, &EvalOptions::default(), 4);
        assert!(matches!(err, Err(SvioError::UnsupportedMode(_))), "{mode}");
    }
}

#[test]
fn forced_masks_select_everything_and_bins_conserve_counts() {
    let ds = twenty_windows();
    for mode in [FusionMode::Soft, FusionMode::Hard] {
        let cfg = tiny_train(mode);
        let ckpt = Checkpoint::new(&cfg, Model::new(&cfg.model).unwrap().init(2).unwrap());
        let opts = EvalOptions {
            force_ones: true,
            ..EvalOptions::default()
        };
        let report = analyze_masks(&ckpt, &ds, &opts, 3).unwrap();
        assert_eq!(report.overall.visual_rate, 1.0);
        assert_eq!(report.overall.inertial_rate, 1.0);
        for bins in [&report.rotation_bins, &report.translation_bins] {
            assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), ds.windows.len());
        }
        let hard = analyze_masks(&ckpt, &ds, &EvalOptions::default(), 3).unwrap();
        for r in &hard.records {
            assert!((0.0..=1.0).contains(&r.visual_rate) && (0.0..=1.0).contains(&r.inertial_rate));
        }
    }
}
