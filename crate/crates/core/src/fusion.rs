//! Direct, soft and hard fusion of visual and inertial features.
//!
//! Soft fusion re-weights every feature by a sigmoid mask conditioned on both
//! modalities. Hard fusion treats each mask entry as an independent
//! Bernoulli(π) keep/drop gate: a two-category Gumbel-Softmax relaxation for
//! training, and Gumbel-max binarization for evaluation.

use rand::Rng;
use svio_autodiff::{Graph, ParamStore, Tensor, Var};

use crate::encoders::{FeatureVector, Modality};
use crate::error::{Result, SvioError};
use crate::layers::Linear;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;
/// Uniform draws are clamped likewise before the double log.
pub const UNIFORM_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskProbabilities {
    pub visual: Vec<f64>,
    pub inertial: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Soft,
    HardRelaxed,
    HardBinary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionMask {
    pub visual: Vec<f64>,
    pub inertial: Vec<f64>,
    pub mode: MaskMode,
}

impl FusionMask {
    pub fn ones(visual: usize, inertial: usize, mode: MaskMode) -> Self {
        Self {
            visual: vec![1.0; visual],
            inertial: vec![1.0; inertial],
            mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HardEvalMode {
    /// Relaxed Gumbel-Softmax gates at the final temperature.
    Sample,
    /// Gumbel-max binary gates.
    ArgmaxBinary,
}

impl HardEvalMode {
    pub fn name(self) -> &'static str {
        match self {
            HardEvalMode::Sample => "sample",
            HardEvalMode::ArgmaxBinary => "argmax-binary",
        }
    }
}

impl std::str::FromStr for HardEvalMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sample" => Ok(HardEvalMode::Sample),
            "argmax-binary" => Ok(HardEvalMode::ArgmaxBinary),
            other => Err(format!("unknown hard evaluation mode `{other}` (sample|argmax-binary)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardFusionConfig {
    pub tau_start: f64,
    pub tau_end: f64,
    pub decay_steps: usize,
    pub eval_mode: HardEvalMode,
    pub straight_through: bool,
    pub seed: u64,
}

impl Default for HardFusionConfig {
    fn default() -> Self {
        Self {
            tau_start: 1.0,
            tau_end: 0.5,
            decay_steps: 1000,
            eval_mode: HardEvalMode::ArgmaxBinary,
            straight_through: false,
            seed: 0,
        }
    }
}

impl HardFusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_end > 0.0) || !(self.tau_start >= self.tau_end) || !self.tau_start.is_finite() {
            return Err(SvioError::Parameter(format!(
                "temperature schedule needs 0 < end ≤ start, got start={} end={}",
                self.tau_start, self.tau_end
            )));
        }
        Ok(())
    }

    /// Exponential decay from `tau_start` to `tau_end` over `decay_steps`.
    pub fn tau_at(&self, step: usize) -> f64 {
        if self.decay_steps == 0 {
            return self.tau_end;
        }
        let frac = (step as f64 / self.decay_steps as f64).min(1.0);
        self.tau_start * (self.tau_end / self.tau_start).powf(frac)
    }
}

/// How hard gates are produced for one pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateStage {
    Relaxed { tau: f64 },
    Binary,
}

fn check_lengths(op: &str, a_v: &FeatureVector, a_i: &FeatureVector, nv: usize, ni: usize) -> Result<()> {
    if a_v.modality != Modality::Visual || a_i.modality != Modality::Inertial {
        return Err(SvioError::Contract(format!("{op}: modality tags swapped")));
    }
    if a_v.values.len() != nv || a_i.values.len() != ni {
        return Err(SvioError::Dimension(format!(
            "{op}: features of length {}/{} vs expected {nv}/{ni}",
            a_v.values.len(),
            a_i.values.len()
        )));
    }
    Ok(())
}

/// `[a_V; a_I]`.
pub fn fuse_direct(a_v: &FeatureVector, a_i: &FeatureVector) -> Result<FusedFeature> {
    if a_v.modality != Modality::Visual || a_i.modality != Modality::Inertial {
        return Err(SvioError::Contract("fuse_direct: modality tags swapped".into()));
    }
    let mut values = a_v.values.clone();
    values.extend_from_slice(&a_i.values);
    Ok(FusedFeature { values })
}

fn gate(a_v: &FeatureVector, a_i: &FeatureVector, m: &FusionMask) -> Result<FusedFeature> {
    if m.visual.len() != a_v.values.len() || m.inertial.len() != a_i.values.len() {
        return Err(SvioError::Dimension(format!(
            "mask lengths {}/{} vs features {}/{}",
            m.visual.len(),
            m.inertial.len(),
            a_v.values.len(),
            a_i.values.len()
        )));
    }
    let values = a_v
        .values
        .iter()
        .zip(&m.visual)
        .chain(a_i.values.iter().zip(&m.inertial))
        .map(|(a, s)| a * s)
        .collect();
    Ok(FusedFeature { values })
}

/// `[a_V ⊙ s_V; a_I ⊙ s_I]` with a soft mask.
pub fn fuse_soft(a_v: &FeatureVector, a_i: &FeatureVector, m: &FusionMask) -> Result<FusedFeature> {
    if m.mode != MaskMode::Soft {
        return Err(SvioError::Contract(format!("fuse_soft given a {:?} mask", m.mode)));
    }
    gate(a_v, a_i, m)
}

/// `[a_V ⊙ s_V; a_I ⊙ s_I]` with a relaxed or binary hard mask.
pub fn fuse_hard(a_v: &FeatureVector, a_i: &FeatureVector, m: &FusionMask) -> Result<FusedFeature> {
    if m.mode == MaskMode::Soft {
        return Err(SvioError::Contract("fuse_hard given a soft mask".into()));
    }
    gate(a_v, a_i, m)
}

/// Two affine maps over the concatenated features, each followed by a sigmoid.
/// Used for both the soft masks and the hard-fusion keep probabilities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskNetwork {
    pub visual: Linear,
    pub inertial: Linear,
}

impl MaskNetwork {
    pub fn new(visual_features: usize, inertial_features: usize) -> Self {
        let joint = visual_features + inertial_features;
        Self {
            visual: Linear::new("fusion.visual", joint, visual_features),
            inertial: Linear::new("fusion.inertial", joint, inertial_features),
        }
    }

    /// N×n_V and N×n_I features in, sigmoid outputs of the same shapes out.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, a_v: Var, a_i: Var) -> Result<(Var, Var)> {
        let joint = g.concat(&[a_v, a_i], 1)?;
        let lv = self.visual.forward(g, store, joint)?;
        let sv = g.sigmoid(lv)?;
        let li = self.inertial.forward(g, store, joint)?;
        let si = g.sigmoid(li)?;
        Ok((sv, si))
    }

    fn forward_values(
        &self,
        store: &ParamStore,
        a_v: &FeatureVector,
        a_i: &FeatureVector,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        check_lengths("mask network", a_v, a_i, self.visual.output, self.inertial.output)?;
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![1, a_v.values.len()], a_v.values.clone())?);
        let i = g.constant(Tensor::new(vec![1, a_i.values.len()], a_i.values.clone())?);
        let (sv, si) = self.forward(&mut g, store, v, i)?;
        Ok((g.value(sv).data().to_vec(), g.value(si).data().to_vec()))
    }

    pub fn soft_masks(&self, store: &ParamStore, a_v: &FeatureVector, a_i: &FeatureVector) -> Result<FusionMask> {
        let (visual, inertial) = self.forward_values(store, a_v, a_i)?;
        Ok(FusionMask {
            visual,
            inertial,
            mode: MaskMode::Soft,
        })
    }

    pub fn mask_probabilities(
        &self,
        store: &ParamStore,
        a_v: &FeatureVector,
        a_i: &FeatureVector,
    ) -> Result<MaskProbabilities> {
        let (visual, inertial) = self.forward_values(store, a_v, a_i)?;
        Ok(MaskProbabilities { visual, inertial })
    }

    /// Hard gates for a single window. Relaxed gates use `tau`; binary gates
    /// follow the Gumbel-max rule.
    pub fn hard_masks(
        &self,
        store: &ParamStore,
        a_v: &FeatureVector,
        a_i: &FeatureVector,
        stage: GateStage,
        rng: &mut impl Rng,
    ) -> Result<FusionMask> {
        let probs = self.mask_probabilities(store, a_v, a_i)?;
        hard_masks_from_probabilities(&probs, stage, rng)
    }
}

/// Draws the keep/drop noise pairs and gates each probability.
pub fn hard_masks_from_probabilities(
    probs: &MaskProbabilities,
    stage: GateStage,
    rng: &mut impl Rng,
) -> Result<FusionMask> {
    let mut gate_all = |p: &[f64]| -> Result<Vec<f64>> {
        p.iter()
            .map(|&pi| {
                let keep = gumbel(rng);
                let drop = gumbel(rng);
                match stage {
                    GateStage::Relaxed { tau } => gumbel_softmax_gate(pi, keep, drop, tau),
                    GateStage::Binary => Ok(gumbel_max_gate(pi, keep, drop)),
                }
            })
            .collect()
    };
    let visual = gate_all(&probs.visual)?;
    let inertial = gate_all(&probs.inertial)?;
    Ok(FusionMask {
        visual,
        inertial,
        mode: match stage {
            GateStage::Relaxed { .. } => MaskMode::HardRelaxed,
            GateStage::Binary => MaskMode::HardBinary,
        },
    })
}

/// Standard Gumbel sample from a uniform draw: `−log(−log u)`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

pub fn gumbel(rng: &mut impl Rng) -> f64 {
    gumbel_from_uniform(rng.random::<f64>())
}

/// I.i.d. standard Gumbel samples.
pub fn gumbel_noise(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| gumbel(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

fn clamp_prob(pi: f64) -> f64 {
    pi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Keep coordinate of the two-category softmax over
/// `[(log π + ε_keep)/τ, (log(1−π) + ε_drop)/τ]`.
pub fn gumbel_softmax_gate(pi: f64, eps_keep: f64, eps_drop: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(SvioError::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let pi = clamp_prob(pi);
    let keep = (pi.ln() + eps_keep) / tau;
    let drop = ((1.0 - pi).ln() + eps_drop) / tau;
    let m = keep.max(drop);
    let (ek, ed) = ((keep - m).exp(), (drop - m).exp());
    Ok(ek / (ek + ed))
}

/// 1 iff `ε_keep + log π ≥ ε_drop + log(1−π)`.
pub fn gumbel_max_gate(pi: f64, eps_keep: f64, eps_drop: f64) -> f64 {
    let pi = clamp_prob(pi);
    if eps_keep + pi.ln() >= eps_drop + (1.0 - pi).ln() {
        1.0
    } else {
        0.0
    }
}

/// Graph form of [`gumbel_softmax_gate`] over a tensor of probabilities.
///
/// `noise_keep` and `noise_drop` must match `alpha`'s shape. With
/// `straight_through`, the forward value is the Gumbel-max binary gate and
/// the gradient is that of the relaxed gate.
pub fn relaxed_gates(
    g: &mut Graph,
    alpha: Var,
    noise_keep: &Tensor,
    noise_drop: &Tensor,
    tau: f64,
    straight_through: bool,
) -> Result<Var> {
    let shape = g.shape(alpha).to_vec();
    if noise_keep.shape() != shape.as_slice() || noise_drop.shape() != shape.as_slice() {
        return Err(SvioError::Dimension(format!(
            "gate noise {:?}/{:?} vs probabilities {shape:?}",
            noise_keep.shape(),
            noise_drop.shape()
        )));
    }
    let p = g.clamp(alpha, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_keep = g.log(p)?;
    let q = g.neg(p)?;
    let q = g.offset(q, 1.0)?;
    let log_drop = g.log(q)?;
    let nk = g.constant(noise_keep.clone());
    let nd = g.constant(noise_drop.clone());
    let keep = g.add(log_keep, nk)?;
    let drop = g.add(log_drop, nd)?;
    let mut col_shape = shape.clone();
    col_shape.push(1);
    let keep = g.reshape(keep, &col_shape)?;
    let drop = g.reshape(drop, &col_shape)?;
    let axis = shape.len();
    let pair = g.concat(&[keep, drop], axis)?;
    let soft = g.softmax_axis(pair, axis, tau)?;
    let keep = g.slice(soft, axis, 0, 1)?;
    let relaxed = g.reshape(keep, &shape)?;
    if !straight_through {
        return Ok(relaxed);
    }
    let probs = g.value(alpha).data();
    let hard: Vec<f64> = probs
        .iter()
        .zip(noise_keep.data().iter().zip(noise_drop.data()))
        .map(|(&pi, (&k, &d))| gumbel_max_gate(pi, k, d))
        .collect();
    let hard = g.constant(Tensor::new(shape, hard)?);
    let frozen = g.detach(relaxed);
    let residual = g.sub(relaxed, frozen)?;
    Ok(g.add(hard, residual)?)
}

/// Gumbel-max binary gates as a constant tensor.
pub fn binary_gates(alpha: &Tensor, noise_keep: &Tensor, noise_drop: &Tensor) -> Result<Tensor> {
    if noise_keep.shape() != alpha.shape() || noise_drop.shape() != alpha.shape() {
        return Err(SvioError::Dimension("gate noise shape mismatch".into()));
    }
    let data = alpha
        .data()
        .iter()
        .zip(noise_keep.data().iter().zip(noise_drop.data()))
        .map(|(&pi, (&k, &d))| gumbel_max_gate(pi, k, d))
        .collect();
    Ok(Tensor::new(alpha.shape().to_vec(), data)?)
}
