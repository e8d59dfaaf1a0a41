//! The end-to-end odometry network: encoders, fusion and temporal regression.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use svio_autodiff::{Graph, ParamStore, Tensor, Var};

use crate::encoders::{ConvSpec, InertialEncoder, VisualEncoder};
use crate::error::{Result, SvioError};
use crate::fusion::{binary_gates, gumbel, relaxed_gates, MaskNetwork};
use crate::kv::KvMap;
use crate::layers::{init_params, LayerKind};
use crate::odometry::{pose_loss_graph, PoseDelta, TemporalModel};
use crate::seed;
use crate::window::SequenceWindow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionMode {
    Direct,
    Soft,
    Hard,
    VisionOnly,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [Self::VisionOnly, Self::Direct, Self::Soft, Self::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::Soft => "soft",
            Self::Hard => "hard",
            Self::VisionOnly => "vision-only",
        }
    }

    pub fn uses_inertial(self) -> bool {
        self != Self::VisionOnly
    }

    pub fn has_masks(self) -> bool {
        matches!(self, Self::Soft | Self::Hard)
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "direct" => Ok(Self::Direct),
            "soft" => Ok(Self::Soft),
            "hard" => Ok(Self::Hard),
            "none" | "vision-only" => Ok(Self::VisionOnly),
            _ => Err(format!(
                "unknown fusion mode '{s}' (expected direct, soft, hard, none or vision-only)"
            )),
        }
    }
}

fn format_convs(convs: &[ConvSpec]) -> String {
    convs
        .iter()
        .map(|c| format!("{}:{}:{}", c.channels, c.kernel, c.stride))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_convs(s: &str) -> Result<Vec<ConvSpec>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|part| {
            let nums: Vec<usize> = part
                .trim()
                .split(':')
                .map(|n| n.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| SvioError::Parameter(format!("conv spec '{part}': {e}")))?;
            match nums[..] {
                [channels, kernel, stride] => Ok(ConvSpec {
                    channels,
                    kernel,
                    stride,
                }),
                _ => Err(SvioError::Parameter(format!(
                    "conv spec '{part}' must be channels:kernel:stride"
                ))),
            }
        })
        .collect()
}

/// Architecture hyperparameters. Input shapes come from the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub fusion: FusionMode,
    pub frame_channels: usize,
    pub frame_size: usize,
    pub visual_convs: Vec<ConvSpec>,
    pub visual_features: usize,
    pub imu_samples: usize,
    pub inertial_hidden: usize,
    pub inertial_layers: usize,
    pub inertial_features: usize,
    pub temporal_hidden: usize,
    pub temporal_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fusion: FusionMode::Soft,
            frame_channels: 2,
            frame_size: 16,
            visual_convs: vec![
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
            ],
            visual_features: 64,
            imu_samples: 10,
            inertial_hidden: 128,
            inertial_layers: 2,
            inertial_features: 64,
            temporal_hidden: 128,
            temporal_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("frame_channels", self.frame_channels),
            ("frame_size", self.frame_size),
            ("visual_features", self.visual_features),
            ("imu_samples", self.imu_samples),
            ("inertial_hidden", self.inertial_hidden),
            ("inertial_layers", self.inertial_layers),
            ("inertial_features", self.inertial_features),
            ("temporal_hidden", self.temporal_hidden),
            ("temporal_layers", self.temporal_layers),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(SvioError::Parameter(format!("model.{name} must be ≥ 1")));
            }
        }
        for c in &self.visual_convs {
            if c.channels == 0 || c.kernel == 0 || c.stride == 0 {
                return Err(SvioError::Parameter(format!("invalid conv spec {c:?}")));
            }
        }
        VisualEncoder::new(self.frame_channels, self.frame_size, &self.visual_convs, self.visual_features)?;
        Ok(())
    }

    pub fn fused_size(&self) -> usize {
        if self.fusion.uses_inertial() {
            self.visual_features + self.inertial_features
        } else {
            self.visual_features
        }
    }

    pub fn write_kv(&self, prefix: &str, kv: &mut KvMap) {
        let p = |k: &str| format!("{prefix}.{k}");
        kv.set(p("fusion"), self.fusion.name());
        kv.set(p("frame_channels"), self.frame_channels);
        kv.set(p("frame_size"), self.frame_size);
        kv.set(p("visual_convs"), format_convs(&self.visual_convs));
        kv.set(p("visual_features"), self.visual_features);
        kv.set(p("imu_samples"), self.imu_samples);
        kv.set(p("inertial_hidden"), self.inertial_hidden);
        kv.set(p("inertial_layers"), self.inertial_layers);
        kv.set(p("inertial_features"), self.inertial_features);
        kv.set(p("temporal_hidden"), self.temporal_hidden);
        kv.set(p("temporal_layers"), self.temporal_layers);
    }

    pub fn keys(prefix: &str) -> Vec<String> {
        let mut kv = KvMap::new();
        Self::default().write_kv(prefix, &mut kv);
        kv.keys().map(str::to_owned).collect()
    }

    pub fn apply_kv(&mut self, prefix: &str, kv: &KvMap) -> Result<()> {
        let p = |k: &str| format!("{prefix}.{k}");
        if let Some(s) = kv.get_str(&p("fusion")) {
            self.fusion = s.parse().map_err(SvioError::Parameter)?;
        }
        if let Some(s) = kv.get_str(&p("visual_convs")) {
            self.visual_convs = parse_convs(s)?;
        }
        kv.apply(&p("frame_channels"), &mut self.frame_channels)?;
        kv.apply(&p("frame_size"), &mut self.frame_size)?;
        kv.apply(&p("visual_features"), &mut self.visual_features)?;
        kv.apply(&p("imu_samples"), &mut self.imu_samples)?;
        kv.apply(&p("inertial_hidden"), &mut self.inertial_hidden)?;
        kv.apply(&p("inertial_layers"), &mut self.inertial_layers)?;
        kv.apply(&p("inertial_features"), &mut self.inertial_features)?;
        kv.apply(&p("temporal_hidden"), &mut self.temporal_hidden)?;
        kv.apply(&p("temporal_layers"), &mut self.temporal_layers)?;
        Ok(())
    }
}

/// Keep/drop Gumbel noise for every gate of a batch, one row per window.
#[derive(Debug, Clone, PartialEq)]
pub struct GateNoise {
    pub visual: [Tensor; 2],
    pub inertial: [Tensor; 2],
}

impl GateNoise {
    fn draw(rows: usize, n: usize, rng: &mut impl Rng) -> [Tensor; 2] {
        let mut keep = Vec::with_capacity(rows * n);
        let mut drop = Vec::with_capacity(rows * n);
        for _ in 0..rows * n {
            keep.push(gumbel(rng));
            drop.push(gumbel(rng));
        }
        [
            Tensor::new(vec![rows, n], keep).expect("sized"),
            Tensor::new(vec![rows, n], drop).expect("sized"),
        ]
    }

    pub fn sample(rows: usize, visual: usize, inertial: usize, rng: &mut impl Rng) -> Self {
        Self {
            visual: Self::draw(rows, visual, rng),
            inertial: Self::draw(rows, inertial, rng),
        }
    }

    /// One independent stream per row, so a window's gates do not depend on
    /// how it was batched.
    pub fn per_row(seeds: &[u64], visual: usize, inertial: usize) -> Self {
        let mut vk = Vec::new();
        let mut vd = Vec::new();
        let mut ik = Vec::new();
        let mut id = Vec::new();
        for &s in seeds {
            let mut rng = seed::rng(s, "gate-noise");
            let [k, d] = Self::draw(1, visual, &mut rng);
            vk.extend_from_slice(k.data());
            vd.extend_from_slice(d.data());
            let [k, d] = Self::draw(1, inertial, &mut rng);
            ik.extend_from_slice(k.data());
            id.extend_from_slice(d.data());
        }
        let r = seeds.len();
        Self {
            visual: [
                Tensor::new(vec![r, visual], vk).expect("sized"),
                Tensor::new(vec![r, visual], vd).expect("sized"),
            ],
            inertial: [
                Tensor::new(vec![r, inertial], ik).expect("sized"),
                Tensor::new(vec![r, inertial], id).expect("sized"),
            ],
        }
    }
}

/// How the fusion stage forms its masks for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum Gating {
    /// Learned masks: sigmoid for soft mode, Gumbel gates for hard mode.
    Learned(HardGates),
    /// Every mask forced to 1.
    Ones,
}

/// Gate flavor for hard fusion; ignored by other modes.
#[derive(Debug, Clone, PartialEq)]
pub enum HardGates {
    Relaxed {
        tau: f64,
        straight_through: bool,
        noise: GateNoise,
    },
    Binary {
        noise: GateNoise,
    },
    /// For modes without stochastic gates.
    None,
}

/// Graph handles of one batched forward pass. Row `t·B + b` of every
/// per-window tensor is step `t` of sequence `b`.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One B×6 tensor per step.
    pub poses: Vec<Var>,
    /// (L·B)×6.
    pub stacked: Var,
    /// (L·B)×n_V and (L·B)×n_I mask values, when the mode has masks.
    pub masks: Option<(Var, Var)>,
    /// Keep probabilities of hard mode before gating.
    pub probabilities: Option<(Var, Var)>,
}

/// A batch of `batch` sequences of `steps` consecutive windows.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub steps: usize,
    pub batch: usize,
    /// Ordered by step, then sequence.
    pub windows: Vec<&'a SequenceWindow>,
}

impl<'a> Batch<'a> {
    /// `sequences[b]` holds the consecutive windows of sequence `b`.
    pub fn from_sequences(sequences: &[&'a [SequenceWindow]]) -> Result<Self> {
        let steps = sequences.first().map_or(0, |s| s.len());
        if steps == 0 || sequences.iter().any(|s| s.len() != steps) {
            return Err(SvioError::Contract(
                "batch sequences must be non-empty and of equal length".into(),
            ));
        }
        let mut windows = Vec::with_capacity(steps * sequences.len());
        for t in 0..steps {
            for s in sequences {
                windows.push(&s[t]);
            }
        }
        Ok(Self {
            steps,
            batch: sequences.len(),
            windows,
        })
    }

    pub fn truth(&self) -> Tensor {
        let data = self.windows.iter().flat_map(|w| w.truth.as_array()).collect();
        Tensor::new(vec![self.windows.len(), 6], data).expect("sized")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub visual: VisualEncoder,
    pub inertial: Option<InertialEncoder>,
    pub mask: Option<MaskNetwork>,
    pub temporal: TemporalModel,
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let visual = VisualEncoder::new(
            config.frame_channels,
            config.frame_size,
            &config.visual_convs,
            config.visual_features,
        )?;
        let inertial = config.fusion.uses_inertial().then(|| {
            InertialEncoder::new(
                config.imu_samples,
                config.inertial_hidden,
                config.inertial_layers,
                config.inertial_features,
            )
        });
        let mask = config
            .fusion
            .has_masks()
            .then(|| MaskNetwork::new(config.visual_features, config.inertial_features));
        let temporal = TemporalModel::new(config.fused_size(), config.temporal_hidden, config.temporal_layers);
        Ok(Self {
            config: config.clone(),
            visual,
            inertial,
            mask,
            temporal,
        })
    }

    /// Every layer as (prefix, kind), in a fixed order.
    pub fn layers(&self) -> Vec<(String, LayerKind)> {
        let mut out: Vec<(String, LayerKind)> = self
            .visual
            .convs
            .iter()
            .map(|c| (c.prefix.clone(), c.kind()))
            .collect();
        out.push((self.visual.proj.prefix.clone(), self.visual.proj.kind()));
        if let Some(i) = &self.inertial {
            out.push((i.rnn.prefix.clone(), i.rnn.kind()));
            out.push((i.proj.prefix.clone(), i.proj.kind()));
        }
        if let Some(m) = &self.mask {
            out.push((m.visual.prefix.clone(), m.visual.kind()));
            out.push((m.inertial.prefix.clone(), m.inertial.kind()));
        }
        out.push((self.temporal.rnn.prefix.clone(), self.temporal.rnn.kind()));
        out.push((self.temporal.head.prefix.clone(), self.temporal.head.kind()));
        out
    }

    /// Freshly initialized parameters; layer `k` draws from its own stream.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (prefix, kind) in self.layers() {
            let lp = init_params(kind, seed::derive(seed, &prefix))?;
            store.absorb(&prefix, lp.params)?;
        }
        Ok(store)
    }

    /// Checks that `loaded` has exactly the expected names and shapes.
    /// Nothing is returned unless every entry matches.
    pub fn validate_params(&self, loaded: &ParamStore) -> Result<()> {
        let expected = self.init(0)?;
        let mut bad = Vec::new();
        for (name, t) in expected.iter() {
            match loaded.get(name) {
                Ok(l) if l.shape() == t.shape() => {}
                Ok(l) => bad.push(format!("{name} (shape {:?}, expected {:?})", l.shape(), t.shape())),
                Err(_) => bad.push(format!("{name} (missing)")),
            }
        }
        for (name, _) in loaded.iter() {
            if !expected.contains(name) {
                bad.push(format!("{name} (unknown)"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(SvioError::ParamMismatch(bad))
        }
    }

    pub fn check_window(&self, w: &SequenceWindow) -> Result<()> {
        let c = &self.config;
        if w.visual.frame_shape() != [c.frame_channels, c.frame_size, c.frame_size] {
            return Err(SvioError::Dimension(format!(
                "dataset frames {:?} vs model {:?}",
                w.visual.frame_shape(),
                [c.frame_channels, c.frame_size, c.frame_size]
            )));
        }
        if self.inertial.is_some() && w.inertial.samples.len() != c.imu_samples {
            return Err(SvioError::Dimension(format!(
                "dataset has {} IMU samples per window, model expects {}",
                w.inertial.samples.len(),
                c.imu_samples
            )));
        }
        Ok(())
    }

    /// Batched forward pass over `batch`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch<'_>,
        gating: &Gating,
    ) -> Result<ForwardOutput> {
        let rows = batch.windows.len();
        let visual_windows: Vec<_> = batch.windows.iter().map(|w| &w.visual).collect();
        let xv = g.constant(self.visual.batch_input(&visual_windows)?);
        let a_v = self.visual.forward(g, store, xv)?;

        let mut masks = None;
        let mut probabilities = None;
        let fused = match (&self.inertial, self.config.fusion) {
            (None, _) => a_v,
            (Some(enc), mode) => {
                let imu: Vec<_> = batch.windows.iter().map(|w| &w.inertial).collect();
                let steps: Vec<Var> = enc
                    .batch_input(&imu)?
                    .into_iter()
                    .map(|t| g.constant(t))
                    .collect();
                let a_i = enc.forward(g, store, &steps)?;
                match (mode, gating, &self.mask) {
                    (FusionMode::Direct, _, _) => g.concat(&[a_v, a_i], 1)?,
                    (_, Gating::Ones, _) | (_, _, None) => {
                        let mv = g.constant(Tensor::filled(&[rows, self.config.visual_features], 1.0));
                        let mi = g.constant(Tensor::filled(&[rows, self.config.inertial_features], 1.0));
                        masks = Some((mv, mi));
                        let v = g.mul(a_v, mv)?;
                        let i = g.mul(a_i, mi)?;
                        g.concat(&[v, i], 1)?
                    }
                    (FusionMode::Soft, Gating::Learned(_), Some(net)) => {
                        let (sv, si) = net.forward(g, store, a_v, a_i)?;
                        masks = Some((sv, si));
                        let v = g.mul(a_v, sv)?;
                        let i = g.mul(a_i, si)?;
                        g.concat(&[v, i], 1)?
                    }
                    (FusionMode::Hard, Gating::Learned(gates), Some(net)) => {
                        let (pv, pi) = net.forward(g, store, a_v, a_i)?;
                        probabilities = Some((pv, pi));
                        let (mv, mi) = match gates {
                            HardGates::Relaxed {
                                tau,
                                straight_through,
                                noise,
                            } => (
                                relaxed_gates(g, pv, &noise.visual[0], &noise.visual[1], *tau, *straight_through)?,
                                relaxed_gates(g, pi, &noise.inertial[0], &noise.inertial[1], *tau, *straight_through)?,
                            ),
                            HardGates::Binary { noise } => {
                                let bv = binary_gates(g.value(pv), &noise.visual[0], &noise.visual[1])?;
                                let bi = binary_gates(g.value(pi), &noise.inertial[0], &noise.inertial[1])?;
                                (g.constant(bv), g.constant(bi))
                            }
                            HardGates::None => {
                                return Err(SvioError::Contract(
                                    "hard fusion needs relaxed or binary gates".into(),
                                ))
                            }
                        };
                        masks = Some((mv, mi));
                        let v = g.mul(a_v, mv)?;
                        let i = g.mul(a_i, mi)?;
                        g.concat(&[v, i], 1)?
                    }
                    (FusionMode::VisionOnly, ..) => unreachable!("vision-only has no inertial encoder"),
                }
            }
        };

        let per_step: Vec<Var> = (0..batch.steps)
            .map(|t| g.slice(fused, 0, t * batch.batch, batch.batch))
            .collect::<std::result::Result<_, _>>()?;
        let poses = self.temporal.forward(g, store, &per_step, None)?;
        let stacked = g.concat(&poses, 0)?;
        Ok(ForwardOutput {
            poses,
            stacked,
            masks,
            probabilities,
        })
    }

    /// Forward pass plus mean pose loss against the batch's ground truth.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch<'_>,
        gating: &Gating,
        rotation_weight: f64,
    ) -> Result<(Var, ForwardOutput)> {
        let out = self.forward(g, store, batch, gating)?;
        let loss = pose_loss_graph(g, out.stacked, &batch.truth(), rotation_weight)?;
        Ok((loss, out))
    }
}

/// Reads the `(L·B)×6` prediction tensor back into pose deltas, in batch order.
pub fn predictions(g: &Graph, out: &ForwardOutput) -> Vec<PoseDelta> {
    g.value(out.stacked)
        .data()
        .chunks_exact(6)
        .map(|d| PoseDelta::from_array([d[0], d[1], d[2], d[3], d[4], d[5]]))
        .collect()
}
