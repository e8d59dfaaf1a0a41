//! Parameterized layers over a shared [`ParamStore`].
//!
//! A layer descriptor carries its hyperparameters and the name prefix of its
//! tensors; the tensors themselves live in the store so one store can back a
//! whole model, a checkpoint and the optimizer state.

use rand::Rng;
use svio_autodiff::{Conv2dSpec, Graph, ParamStore, Tensor, Var};

use crate::error::{Result, SvioError};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear {
        input: usize,
        output: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BiLstm {
        input: usize,
        hidden: usize,
        layers: usize,
    },
}

/// Freshly initialized tensors of one layer, keyed by local name (`w`, `b`,
/// `l0.fwd.w_ih`, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub params: ParamStore,
}

const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];

fn glorot(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-s..s)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data sized together")
}

/// Uniform(−s, s) weights with `s = sqrt(6/(fan_in+fan_out))`, zero biases,
/// and forget-gate biases of 1 for recurrent layers.
pub fn init_params(kind: LayerKind, seed: u64) -> Result<LayerParams> {
    let mut rng = seed::rng(seed, "layer-init");
    let mut params = ParamStore::new();
    match kind {
        LayerKind::Linear { input, output } => {
            if input == 0 || output == 0 {
                return Err(SvioError::Parameter(format!(
                    "linear layer {input}→{output} has a zero-sized dimension"
                )));
            }
            params.insert("w", glorot(&mut rng, &[input, output], input, output))?;
            params.insert("b", Tensor::zeros(&[output]))?;
        }
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            ..
        } => {
            if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                return Err(SvioError::Parameter(format!("conv layer {kind:?} has a zero size")));
            }
            let area = kernel * kernel;
            params.insert(
                "w",
                glorot(
                    &mut rng,
                    &[out_channels, in_channels, kernel, kernel],
                    in_channels * area,
                    out_channels * area,
                ),
            )?;
            params.insert("b", Tensor::zeros(&[out_channels]))?;
        }
        LayerKind::BiLstm {
            input,
            hidden,
            layers,
        } => {
            if input == 0 || hidden == 0 || layers == 0 {
                return Err(SvioError::Parameter(format!("bilstm {kind:?} has a zero size")));
            }
            for layer in 0..layers {
                let in_size = if layer == 0 { input } else { 2 * hidden };
                for dir in DIRECTIONS {
                    let p = format!("l{layer}.{dir}");
                    let gates = 4 * hidden;
                    params.insert(
                        format!("{p}.w_ih"),
                        glorot(&mut rng, &[in_size, gates], in_size, gates),
                    )?;
                    params.insert(
                        format!("{p}.w_hh"),
                        glorot(&mut rng, &[hidden, gates], hidden, gates),
                    )?;
                    let mut b = vec![0.0; gates];
                    b[hidden..2 * hidden].fill(1.0);
                    params.insert(format!("{p}.b"), Tensor::vector(b))?;
                }
            }
        }
    }
    Ok(LayerParams { kind, params })
}

/// Affine map `x·W + b` over the last axis of a rank-1 or rank-2 input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub prefix: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, input: usize, output: usize) -> Self {
        Self {
            prefix: prefix.into(),
            input,
            output,
        }
    }

    pub fn kind(&self) -> LayerKind {
        LayerKind::Linear {
            input: self.input,
            output: self.output,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.input) || shape.len() > 2 {
            return Err(SvioError::Dimension(format!(
                "{}: input shape {shape:?}, expected [.., {}]",
                self.prefix, self.input
            )));
        }
        let x2 = if shape.len() == 1 {
            g.reshape(x, &[1, self.input])?
        } else {
            x
        };
        let w = g.param_from(store, &format!("{}.w", self.prefix))?;
        let b = g.param_from(store, &format!("{}.b", self.prefix))?;
        let y = g.matmul(x2, w)?;
        let y = g.add(y, b)?;
        if shape.len() == 1 {
            Ok(g.reshape(y, &[self.output])?)
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv2d {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn kind(&self) -> LayerKind {
        LayerKind::Conv2d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    /// Spatial output extent for an input extent.
    pub fn output_size(&self, input: usize) -> Option<usize> {
        (input + 2 * self.pad)
            .checked_sub(self.kernel)
            .map(|r| r / self.stride + 1)
    }

    /// `x` is C×H×W or batch×C×H×W.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let unbatched = shape.len() == 3;
        let x4 = if unbatched {
            g.reshape(x, &[1, shape[0], shape[1], shape[2]])?
        } else {
            x
        };
        let w = g.param_from(store, &format!("{}.w", self.prefix))?;
        let b = g.param_from(store, &format!("{}.b", self.prefix))?;
        let y = g.conv2d(
            x4,
            w,
            b,
            Conv2dSpec {
                stride: self.stride,
                pad: self.pad,
            },
        )?;
        if unbatched {
            let s = g.shape(y)[1..].to_vec();
            Ok(g.reshape(y, &s)?)
        } else {
            Ok(y)
        }
    }
}

/// Hidden and cell vectors of one direction of one layer (batch×hidden).
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionState {
    pub hidden: Tensor,
    pub cell: Tensor,
}

/// Per-layer, per-direction (`[forward, backward]`) LSTM state.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub layers: Vec<[DirectionState; 2]>,
}

impl RecurrentState {
    pub fn zeros(layers: usize, batch: usize, hidden: usize) -> Self {
        let d = || DirectionState {
            hidden: Tensor::zeros(&[batch, hidden]),
            cell: Tensor::zeros(&[batch, hidden]),
        };
        Self {
            layers: (0..layers).map(|_| [d(), d()]).collect(),
        }
    }
}

/// Graph handles for a final state, in the same layout as [`RecurrentState`].
#[derive(Debug, Clone)]
pub struct StateVars {
    pub layers: Vec<[(Var, Var); 2]>,
}

impl StateVars {
    pub fn to_state(&self, g: &Graph) -> RecurrentState {
        RecurrentState {
            layers: self
                .layers
                .iter()
                .map(|dirs| {
                    dirs.map(|(h, c)| DirectionState {
                        hidden: g.value(h).clone(),
                        cell: g.value(c).clone(),
                    })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BiLstmOutput {
    /// Per step, batch×(2·hidden): forward hidden then backward hidden.
    pub outputs: Vec<Var>,
    /// Forward direction's state after the last step; backward direction's
    /// state after the first step.
    pub final_state: StateVars,
}

/// Stacked bidirectional LSTM without peepholes; gate order i, f, g, o.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiLstm {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl BiLstm {
    pub fn kind(&self) -> LayerKind {
        LayerKind::BiLstm {
            input: self.input,
            hidden: self.hidden,
            layers: self.layers,
        }
    }

    /// `sequence` holds one batch×input tensor per step.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sequence: &[Var],
        h0: Option<&RecurrentState>,
    ) -> Result<BiLstmOutput> {
        let first = *sequence
            .first()
            .ok_or_else(|| SvioError::Contract(format!("{}: empty sequence", self.prefix)))?;
        let batch = g.shape(first)[0];
        for &x in sequence {
            if g.shape(x) != [batch, self.input] {
                return Err(SvioError::Dimension(format!(
                    "{}: step shape {:?}, expected [{batch}, {}]",
                    self.prefix,
                    g.shape(x),
                    self.input
                )));
            }
        }
        if let Some(s) = h0 {
            let ok = s.layers.len() == self.layers
                && s.layers.iter().flatten().all(|d| {
                    d.hidden.shape() == [batch, self.hidden] && d.cell.shape() == [batch, self.hidden]
                });
            if !ok {
                return Err(SvioError::Dimension(format!(
                    "{}: initial state does not match {} layers × [{batch}, {}]",
                    self.prefix, self.layers, self.hidden
                )));
            }
        }

        let steps = sequence.len();
        let h = self.hidden;
        let mut inputs = sequence.to_vec();
        let mut finals = Vec::with_capacity(self.layers);
        for layer in 0..self.layers {
            // One matmul for the input projection of every step.
            let stacked = g.concat(&inputs, 0)?;
            let mut per_dir: Vec<Vec<Var>> = Vec::with_capacity(2);
            let mut dir_finals = Vec::with_capacity(2);
            for (d, dir) in DIRECTIONS.iter().enumerate() {
                let p = format!("{}.l{layer}.{dir}", self.prefix);
                let w_ih = g.param_from(store, &format!("{p}.w_ih"))?;
                let w_hh = g.param_from(store, &format!("{p}.w_hh"))?;
                let b = g.param_from(store, &format!("{p}.b"))?;
                let proj = g.matmul(stacked, w_ih)?;
                let proj = g.add(proj, b)?;
                let (mut hv, mut cv) = match h0 {
                    Some(s) => {
                        let st = &s.layers[layer][d];
                        (g.constant(st.hidden.clone()), g.constant(st.cell.clone()))
                    }
                    None => (
                        g.constant(Tensor::zeros(&[batch, h])),
                        g.constant(Tensor::zeros(&[batch, h])),
                    ),
                };
                let mut outs = vec![None; steps];
                let order: Vec<usize> = if d == 0 {
                    (0..steps).collect()
                } else {
                    (0..steps).rev().collect()
                };
                for t in order {
                    let xp = g.slice(proj, 0, t * batch, batch)?;
                    let hp = g.matmul(hv, w_hh)?;
                    let gates = g.add(xp, hp)?;
                    let i = g.slice(gates, 1, 0, h)?;
                    let i = g.sigmoid(i)?;
                    let f = g.slice(gates, 1, h, h)?;
                    let f = g.sigmoid(f)?;
                    let cand = g.slice(gates, 1, 2 * h, h)?;
                    let cand = g.tanh(cand)?;
                    let o = g.slice(gates, 1, 3 * h, h)?;
                    let o = g.sigmoid(o)?;
                    let keep = g.mul(f, cv)?;
                    let write = g.mul(i, cand)?;
                    cv = g.add(keep, write)?;
                    let squashed = g.tanh(cv)?;
                    hv = g.mul(o, squashed)?;
                    outs[t] = Some(hv);
                }
                per_dir.push(outs.into_iter().map(|o| o.expect("every step visited")).collect());
                dir_finals.push((hv, cv));
            }
            let mut layer_out = Vec::with_capacity(steps);
            for t in 0..steps {
                layer_out.push(g.concat(&[per_dir[0][t], per_dir[1][t]], 1)?);
            }
            finals.push([dir_finals[0], dir_finals[1]]);
            inputs = layer_out;
        }
        Ok(BiLstmOutput {
            outputs: inputs,
            final_state: StateVars { layers: finals },
        })
    }
}
