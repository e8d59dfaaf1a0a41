//! Adam, the training loop and checkpoint files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use svio_autodiff::{GradientMap, Graph, ParamStore, Tensor};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Result, SvioError};
use crate::fusion::{HardEvalMode, HardFusionConfig};
use crate::kv::KvMap;
use crate::model::{Batch, FusionMode, GateNoise, Gating, HardGates, Model, ModelConfig};
use crate::seed;
use crate::sim::{Dataset, PRESETS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One bias-corrected update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradientMap, lr: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params
                .get(name)
                .map_err(|_| SvioError::Contract(format!("adam: gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(SvioError::Contract(format!(
                    "adam: {name} has shape {:?} but gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if let Some(m) = self.m.get(name) {
                if m.len() != g.numel() {
                    return Err(SvioError::Contract(format!("adam: state for {name} has wrong size")));
                }
            }
        }
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads.iter() {
            let n = g.numel();
            let m = self.m.entry(name.to_owned()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.to_owned()).or_insert_with(|| vec![0.0; n]);
            let p = params.get_mut(name).expect("checked above").data_mut();
            for k in 0..n {
                let gk = g.data()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seq_len: usize,
    pub rotation_weight: f64,
    /// Rescale gradients whose global norm exceeds this; 0 disables.
    pub grad_clip: f64,
    pub hard: HardFusionConfig,
    /// Master seed for initialization, batch order and Gumbel noise.
    pub seed: u64,
    pub train_preset: String,
    pub eval_preset: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            batch_size: 8,
            learning_rate: 1e-4,
            epochs: 10,
            seq_len: 8,
            rotation_weight: 100.0,
            grad_clip: 0.0,
            hard: HardFusionConfig::default(),
            seed: 0,
            train_preset: "clean".into(),
            eval_preset: "clean".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.hard.validate()?;
        if self.batch_size == 0 || self.epochs == 0 || self.seq_len == 0 {
            return Err(SvioError::Parameter(
                "batch_size, epochs and seq_len must be ≥ 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SvioError::Parameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.rotation_weight >= 0.0 && self.rotation_weight.is_finite()) {
            return Err(SvioError::Parameter("rotation weight must be ≥ 0".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(SvioError::Parameter("grad_clip must be ≥ 0".into()));
        }
        for p in [&self.train_preset, &self.eval_preset] {
            if !PRESETS.contains(&p.as_str()) {
                return Err(SvioError::Parameter(format!(
                    "unknown degradation preset '{p}' (valid: {})",
                    PRESETS.join(", ")
                )));
            }
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        self.model.write_kv("model", kv);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.learning_rate", self.learning_rate);
        kv.set("train.epochs", self.epochs);
        kv.set("train.seq_len", self.seq_len);
        kv.set("train.rotation_weight", self.rotation_weight);
        kv.set("train.grad_clip", self.grad_clip);
        kv.set("train.seed", self.seed);
        kv.set("train.train_preset", &self.train_preset);
        kv.set("train.eval_preset", &self.eval_preset);
        kv.set("fusion.tau_start", self.hard.tau_start);
        kv.set("fusion.tau_end", self.hard.tau_end);
        kv.set("fusion.decay_steps", self.hard.decay_steps);
        kv.set("fusion.eval_mode", self.hard.eval_mode.name());
        kv.set("fusion.straight_through", self.hard.straight_through);
        kv.set("fusion.seed", self.hard.seed);
    }

    pub fn keys() -> Vec<String> {
        let mut kv = KvMap::new();
        Self::default().write_kv(&mut kv);
        kv.keys().map(str::to_owned).collect()
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        self.model.apply_kv("model", kv)?;
        kv.apply("train.batch_size", &mut self.batch_size)?;
        kv.apply("train.learning_rate", &mut self.learning_rate)?;
        kv.apply("train.epochs", &mut self.epochs)?;
        kv.apply("train.seq_len", &mut self.seq_len)?;
        kv.apply("train.rotation_weight", &mut self.rotation_weight)?;
        kv.apply("train.grad_clip", &mut self.grad_clip)?;
        kv.apply("train.seed", &mut self.seed)?;
        kv.apply("train.train_preset", &mut self.train_preset)?;
        kv.apply("train.eval_preset", &mut self.eval_preset)?;
        kv.apply("fusion.tau_start", &mut self.hard.tau_start)?;
        kv.apply("fusion.tau_end", &mut self.hard.tau_end)?;
        kv.apply("fusion.decay_steps", &mut self.hard.decay_steps)?;
        kv.apply::<HardEvalMode>("fusion.eval_mode", &mut self.hard.eval_mode)?;
        kv.apply("fusion.straight_through", &mut self.hard.straight_through)?;
        kv.apply("fusion.seed", &mut self.hard.seed)?;
        Ok(())
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(kv)?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
    /// Temperature at the end of the epoch (hard mode), else NaN.
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub best_params: ParamStore,
    pub best_epoch: usize,
    pub curve: Vec<EpochLoss>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn write_curve_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "loss", "tau"])?;
        for e in &self.curve {
            w.write_record([e.epoch.to_string(), e.loss.to_string(), e.tau.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Checks that `model` can consume `ds` at sequence length `seq_len`.
pub fn check_compatible(model: &Model, ds: &Dataset, seq_len: usize) -> Result<()> {
    let first = ds
        .windows
        .first()
        .ok_or_else(|| SvioError::Contract("dataset is empty".into()))?;
    model.check_window(first)?;
    if ds.chunks(seq_len, true).is_empty() {
        return Err(SvioError::Contract(format!(
            "no trajectory has {seq_len} consecutive windows"
        )));
    }
    Ok(())
}

/// Gradient-based training for `steps` optimizer updates per epoch over
/// full-length sequences, shuffled per epoch.
pub fn train(config: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    train_with(config, ds, None)
}

/// As [`train`], optionally starting from existing parameters.
pub fn train_with(config: &TrainConfig, ds: &Dataset, init: Option<ParamStore>) -> Result<TrainOutcome> {
    config.validate()?;
    let model = Model::new(&config.model)?;
    check_compatible(&model, ds, config.seq_len)?;
    let mut params = match init {
        Some(p) => {
            model.validate_params(&p)?;
            p
        }
        None => model.init(seed::derive(config.seed, "init"))?,
    };
    let chunks = ds.chunks(config.seq_len, true);
    let mut adam = Adam::new(AdamConfig::default());
    let mut gumbel_rng = seed::rng(config.seed, "gumbel");
    let (nv, ni) = (config.model.visual_features, config.model.inertial_features);

    let mut curve = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::new();
    let mut best = (f64::INFINITY, 0, params.clone());
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..chunks.len()).collect();
        order.shuffle(&mut seed::rng_indexed(config.seed, "shuffle", epoch as u64));
        let mut total = 0.0;
        let mut count = 0usize;
        let mut tau = f64::NAN;
        for group in order.chunks(config.batch_size) {
            let seqs: Vec<&[_]> = group.iter().map(|&k| &ds.windows[chunks[k].clone()]).collect();
            let batch = Batch::from_sequences(&seqs)?;
            let gates = match config.model.fusion {
                FusionMode::Hard => {
                    tau = config.hard.tau_at(step);
                    HardGates::Relaxed {
                        tau,
                        straight_through: config.hard.straight_through,
                        noise: GateNoise::sample(batch.windows.len(), nv, ni, &mut gumbel_rng),
                    }
                }
                _ => HardGates::None,
            };
            let mut g = Graph::new();
            let (loss, _) = model.loss(&mut g, &params, &batch, &Gating::Learned(gates), config.rotation_weight)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(SvioError::Numerical {
                    step,
                    detail: format!("loss is {value} in epoch {epoch}"),
                });
            }
            let mut grads = g.backward(loss, &params)?;
            if !grads.is_finite() {
                return Err(SvioError::Numerical {
                    step,
                    detail: format!("non-finite gradient in epoch {epoch}"),
                });
            }
            if config.grad_clip > 0.0 {
                let norm = grads.global_norm();
                if norm > config.grad_clip {
                    grads.scale(config.grad_clip / norm);
                }
            }
            adam.step(&mut params, &grads, config.learning_rate)?;
            step_losses.push(value);
            total += value * group.len() as f64;
            count += group.len();
            step += 1;
        }
        let mean = total / count as f64;
        curve.push(EpochLoss {
            epoch,
            loss: mean,
            tau,
        });
        if mean < best.0 {
            best = (mean, epoch, params.clone());
        }
    }
    Ok(TrainOutcome {
        params,
        best_params: best.2,
        best_epoch: best.1,
        curve,
        step_losses,
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SVIOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Training configuration echo; `model.*` keys rebuild the network.
    pub config: KvMap,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, params: ParamStore) -> Self {
        let mut kv = KvMap::new();
        config.write_kv(&mut kv);
        Self { config: kv, params }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        TrainConfig::from_kv(&self.config)
    }

    /// Rebuilds the model and checks the parameter table against it.
    pub fn model(&self) -> Result<Model> {
        let cfg = self.train_config()?;
        let model = Model::new(&cfg.model)?;
        model.validate_params(&self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&self.config.to_text());
        w.u32(self.params.len() as u32);
        for (name, t) in self.params.iter() {
            w.str(name);
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        let crc = crc32fast::hash(w.as_slice());
        w.u32(crc);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut head = ByteReader::new(bytes);
        head.expect_magic(CHECKPOINT_MAGIC)?;
        let version = head.u32("format version")?;
        if version != CHECKPOINT_VERSION {
            return Err(SvioError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 16 {
            return Err(SvioError::Format {
                offset: bytes.len(),
                detail: "truncated before checksum".into(),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(SvioError::Checksum { stored, computed });
        }
        let mut r = ByteReader::new(body);
        r.take(12, "header")?;
        let config = KvMap::parse(&r.str("config block")?)?;
        let n = r.u32("parameter count")? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.str("parameter name")?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.error(format!("{name}: shape overflows")))?;
            let data = r.f64s(numel, "parameter payload")?;
            let t = Tensor::new(shape, data).map_err(|e| r.error(e.to_string()))?;
            params
                .insert(name.clone(), t)
                .map_err(|_| r.error(format!("duplicate parameter {name}")))?;
        }
        if r.remaining() != 0 {
            return Err(r.error(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { config, params })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes())?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Writes `final.ckpt`, `best.ckpt` and `loss.csv` into `dir`.
pub fn write_training_outputs(dir: &Path, config: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_checkpoint(&dir.join("final.ckpt"), &Checkpoint::new(config, outcome.params.clone()))?;
    save_checkpoint(&dir.join("best.ckpt"), &Checkpoint::new(config, outcome.best_params.clone()))?;
    outcome.write_curve_csv(fs::File::create(dir.join("loss.csv"))?)?;
    Ok(())
}
