//! Layered run configuration: defaults < config file < `SVIO_*` environment
//! variables < command-line flags.

use std::path::Path;

use svio_core::eval::EvalOptions;
use svio_core::fusion::HardEvalMode;
use svio_core::kv::KvMap;
use svio_core::sim::{DegradationSpec, SimConfig, PRESETS};
use svio_core::train::{Checkpoint, TrainConfig};
use svio_core::{Result, SvioError};

pub const ENV_PREFIX: &str = "SVIO_";

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub preset: String,
    pub eval_preset: String,
    pub windows: usize,
    pub eval_windows: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            preset: "clean".into(),
            eval_preset: "clean".into(),
            windows: 2000,
            eval_windows: 500,
            seed: 0,
        }
    }
}

/// Evaluation settings. Unset fields fall back to the checkpoint's training
/// configuration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalConfig {
    pub seq_len: Option<usize>,
    pub seed: Option<u64>,
    pub hard_mode: Option<HardEvalMode>,
    pub tau: Option<f64>,
    pub force_ones: bool,
    pub bins: usize,
}

const EVAL_KEYS: [&str; 6] = [
    "eval.seq_len",
    "eval.seed",
    "eval.hard_mode",
    "eval.tau",
    "eval.force_ones",
    "eval.bins",
];

const DATA_KEYS: [&str; 5] = [
    "data.preset",
    "data.eval_preset",
    "data.windows",
    "data.eval_windows",
    "data.seed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sim: SimConfig,
    /// Explicit `degrade.*` entries, applied on top of the chosen preset.
    pub degrade: KvMap,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Every key that was set by a file, the environment or a flag.
    pub explicit: KvMap,
}

impl RunConfig {
    pub fn known_keys() -> Vec<String> {
        let mut keys = SimConfig::keys("sim");
        keys.extend(
            DegradationSpec::keys("degrade")
                .into_iter()
                .filter(|k| k != "degrade.seed"),
        );
        keys.extend(DATA_KEYS.iter().map(|k| k.to_string()));
        keys.extend(TrainConfig::keys());
        keys.extend(EVAL_KEYS.iter().map(|k| k.to_string()));
        keys
    }

    /// `SVIO_TRAIN_BATCH_SIZE` for `train.batch_size`.
    pub fn env_name(key: &str) -> String {
        format!("{ENV_PREFIX}{}", key.replace('.', "_").to_uppercase())
    }

    /// Builds the layered configuration. `env` yields variable name/value
    /// pairs; `flags` are applied last.
    pub fn load(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        flags: &KvMap,
    ) -> Result<Self> {
        let known = Self::known_keys();
        let mut merged = KvMap::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            merged.merge(&KvMap::parse(&text)?);
        }
        let env: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        for key in &known {
            let name = Self::env_name(key);
            if let Some((_, v)) = env.iter().find(|(k, _)| *k == name) {
                merged.set(key.clone(), v);
            }
        }
        merged.merge(flags);
        let unknown = merged.unknown_keys(&known);
        if !unknown.is_empty() {
            return Err(SvioError::Parameter(format!(
                "unknown configuration keys: {}",
                unknown.join(", ")
            )));
        }
        Self::from_kv(merged)
    }

    fn from_kv(kv: KvMap) -> Result<Self> {
        let mut sim = SimConfig::default();
        sim.apply_kv("sim", &kv)?;
        sim.validate()?;

        let mut degrade = KvMap::new();
        for (k, v) in kv.iter().filter(|(k, _)| k.starts_with("degrade.")) {
            degrade.set(k, v);
        }

        let mut data = DataConfig::default();
        kv.apply("data.preset", &mut data.preset)?;
        kv.apply("data.eval_preset", &mut data.eval_preset)?;
        kv.apply("data.windows", &mut data.windows)?;
        kv.apply("data.eval_windows", &mut data.eval_windows)?;
        kv.apply("data.seed", &mut data.seed)?;

        let train = TrainConfig::from_kv(&kv)?;
        train.validate()?;

        let mut eval = EvalConfig {
            bins: 5,
            ..EvalConfig::default()
        };
        eval.seq_len = optional(&kv, "eval.seq_len")?;
        eval.seed = optional(&kv, "eval.seed")?;
        eval.hard_mode = optional(&kv, "eval.hard_mode")?;
        eval.tau = optional(&kv, "eval.tau")?;
        kv.apply("eval.force_ones", &mut eval.force_ones)?;
        kv.apply("eval.bins", &mut eval.bins)?;

        let cfg = Self {
            sim,
            degrade,
            data,
            train,
            eval,
            explicit: kv,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for p in [&self.data.preset, &self.data.eval_preset] {
            if !PRESETS.contains(&p.as_str()) {
                return Err(SvioError::Parameter(format!(
                    "unknown degradation preset `{p}`; valid presets: {}",
                    PRESETS.join(", ")
                )));
            }
        }
        if self.data.windows == 0 || self.data.eval_windows == 0 {
            return Err(SvioError::Parameter("window counts must be ≥ 1".into()));
        }
        if self.eval.bins == 0 || self.eval.seq_len == Some(0) {
            return Err(SvioError::Parameter("eval.bins and eval.seq_len must be ≥ 1".into()));
        }
        if let Some(t) = self.eval.tau {
            if !(t > 0.0) {
                return Err(SvioError::Parameter(format!("eval.tau must be positive, got {t}")));
            }
        }
        self.degradation(&self.data.preset, 0)?;
        Ok(())
    }

    /// Preset probabilities with explicit `degrade.*` overrides.
    pub fn degradation(&self, preset: &str, seed: u64) -> Result<DegradationSpec> {
        let mut spec = DegradationSpec::preset(preset, seed)?;
        spec.apply_kv("degrade", &self.degrade)?;
        spec.seed = seed;
        spec.validate()?;
        Ok(spec)
    }

    pub fn eval_options(&self, ckpt: &Checkpoint) -> Result<EvalOptions> {
        let mut opts = EvalOptions::for_checkpoint(ckpt)?;
        if let Some(v) = self.eval.seq_len {
            opts.seq_len = v;
        }
        if let Some(v) = self.eval.seed {
            opts.seed = v;
        }
        if let Some(v) = self.eval.hard_mode {
            opts.hard_mode = v;
        }
        if let Some(v) = self.eval.tau {
            opts.tau = v;
        }
        opts.force_ones = self.eval.force_ones;
        Ok(opts)
    }

    /// Full effective configuration, one `key=value` per line.
    pub fn echo(&self) -> KvMap {
        let mut kv = KvMap::new();
        self.sim.write_kv("sim", &mut kv);
        let mut spec = DegradationSpec::default();
        spec.apply_kv("degrade", &self.degrade).expect("validated on load");
        spec.write_kv("degrade", &mut kv);
        kv.set("data.preset", &self.data.preset);
        kv.set("data.eval_preset", &self.data.eval_preset);
        kv.set("data.windows", self.data.windows);
        kv.set("data.eval_windows", self.data.eval_windows);
        kv.set("data.seed", self.data.seed);
        self.train.write_kv(&mut kv);
        let opt = |v: Option<String>| v.unwrap_or_else(|| "checkpoint".into());
        kv.set("eval.seq_len", opt(self.eval.seq_len.map(|v| v.to_string())));
        kv.set("eval.seed", opt(self.eval.seed.map(|v| v.to_string())));
        kv.set("eval.hard_mode", opt(self.eval.hard_mode.map(|v| v.name().to_string())));
        kv.set("eval.tau", opt(self.eval.tau.map(|v| v.to_string())));
        kv.set("eval.force_ones", self.eval.force_ones);
        kv.set("eval.bins", self.eval.bins);
        kv
    }
}

fn optional<T: std::str::FromStr>(kv: &KvMap, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    kv.get_str(key)
        .map(|raw| {
            raw.parse()
                .map_err(|e| SvioError::Parameter(format!("`{key}` = `{raw}`: {e}")))
        })
        .transpose()
}
