//! Visual and inertial feature encoders.

use svio_autodiff::{Graph, ParamStore, Tensor, Var};

use crate::error::{Result, SvioError};
use crate::layers::{BiLstm, Conv2d, Linear};
use crate::window::{InertialWindow, VisualWindow};

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Inertial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub modality: Modality,
    pub values: Vec<f64>,
}

/// One convolution of the visual stack: output channels, kernel, stride.
/// Padding is `kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Convolutional stack over the channel-stacked frame pair, flattened and
/// projected to the feature size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisualEncoder {
    pub frame_channels: usize,
    pub frame_size: usize,
    pub convs: Vec<Conv2d>,
    pub proj: Linear,
}

impl VisualEncoder {
    pub fn new(frame_channels: usize, frame_size: usize, stack: &[ConvSpec], feature: usize) -> Result<Self> {
        let mut convs = Vec::with_capacity(stack.len());
        let mut channels = 2 * frame_channels;
        let mut size = frame_size;
        for (i, s) in stack.iter().enumerate() {
            let conv = Conv2d {
                prefix: format!("visual.conv{i}"),
                in_channels: channels,
                out_channels: s.channels,
                kernel: s.kernel,
                stride: s.stride,
                pad: s.kernel / 2,
            };
            size = conv.output_size(size).filter(|&n| n > 0).ok_or_else(|| {
                SvioError::Parameter(format!("conv {i} ({s:?}) does not fit a {size}px input"))
            })?;
            channels = s.channels;
            convs.push(conv);
        }
        Ok(Self {
            frame_channels,
            frame_size,
            convs,
            proj: Linear::new("visual.proj", channels * size * size, feature),
        })
    }

    pub fn feature_size(&self) -> usize {
        self.proj.output
    }

    /// Flattened size after the conv stack.
    pub fn flat_size(&self) -> usize {
        self.proj.input
    }

    /// Stacks each window's frames channel-wise into an N×2C×H×W tensor.
    pub fn batch_input(&self, windows: &[&VisualWindow]) -> Result<Tensor> {
        let (c, s) = (self.frame_channels, self.frame_size);
        let per = 2 * c * s * s;
        let mut data = Vec::with_capacity(windows.len() * per);
        for w in windows {
            if w.frame_shape() != [c, s, s] || w.frames[1].shape() != [c, s, s] {
                return Err(SvioError::Dimension(format!(
                    "visual window {:?}, expected {:?}",
                    w.frame_shape(),
                    [c, s, s]
                )));
            }
            data.extend_from_slice(&w.frames[0].data);
            data.extend_from_slice(&w.frames[1].data);
        }
        Ok(Tensor::new(vec![windows.len(), 2 * c, s, s], data)?)
    }

    /// N×2C×H×W in, N×feature out.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, store, h)?;
            h = g.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let n = g.shape(h)[0];
        let flat = g.reshape(h, &[n, self.flat_size()])?;
        self.proj.forward(g, store, flat)
    }

    pub fn encode(&self, store: &ParamStore, w: &VisualWindow) -> Result<FeatureVector> {
        let mut g = Graph::new();
        let x = g.constant(self.batch_input(&[w])?);
        let a = self.forward(&mut g, store, x)?;
        Ok(FeatureVector {
            modality: Modality::Visual,
            values: g.value(a).data().to_vec(),
        })
    }
}

/// Bidirectional LSTM over the 6-D IMU samples; the final forward and
/// backward hidden states of the top layer are projected to the feature size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InertialEncoder {
    pub samples: usize,
    pub rnn: BiLstm,
    pub proj: Linear,
}

impl InertialEncoder {
    pub fn new(samples: usize, hidden: usize, layers: usize, feature: usize) -> Self {
        Self {
            samples,
            rnn: BiLstm {
                prefix: "inertial.rnn".into(),
                input: 6,
                hidden,
                layers,
            },
            proj: Linear::new("inertial.proj", 2 * hidden, feature),
        }
    }

    pub fn feature_size(&self) -> usize {
        self.proj.output
    }

    /// One N×6 tensor per sample index.
    pub fn batch_input(&self, windows: &[&InertialWindow]) -> Result<Vec<Tensor>> {
        for w in windows {
            if w.samples.len() != self.samples {
                return Err(SvioError::Contract(format!(
                    "inertial window has {} samples, expected {}",
                    w.samples.len(),
                    self.samples
                )));
            }
        }
        (0..self.samples)
            .map(|k| {
                let data = windows
                    .iter()
                    .flat_map(|w| w.samples[k].as_array())
                    .collect();
                Ok(Tensor::new(vec![windows.len(), 6], data)?)
            })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, steps: &[Var]) -> Result<Var> {
        let out = self.rnn.forward(g, store, steps, None)?;
        let top = out.final_state.layers.last().expect("at least one layer");
        let summary = g.concat(&[top[0].0, top[1].0], 1)?;
        self.proj.forward(g, store, summary)
    }

    pub fn encode(&self, store: &ParamStore, w: &InertialWindow) -> Result<FeatureVector> {
        let mut g = Graph::new();
        let steps: Vec<Var> = self
            .batch_input(&[w])?
            .into_iter()
            .map(|t| g.constant(t))
            .collect();
        let a = self.forward(&mut g, store, &steps)?;
        Ok(FeatureVector {
            modality: Modality::Inertial,
            values: g.value(a).data().to_vec(),
        })
    }
}
