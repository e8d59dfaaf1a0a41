//! Sensor windows: one camera frame pair and the IMU samples between them.

use crate::error::{Result, SvioError};
use crate::odometry::PoseDelta;

/// One channels×height×width image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Two consecutive frames. A MISSING window carries all-zero frames.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualWindow {
    pub frames: [Frame; 2],
    pub timestamps: [f64; 2],
    pub missing: bool,
}

impl VisualWindow {
    pub fn new(frames: [Frame; 2], timestamps: [f64; 2]) -> Result<Self> {
        if frames[0].shape() != frames[1].shape() {
            return Err(SvioError::Dimension(format!(
                "frame shapes differ: {:?} vs {:?}",
                frames[0].shape(),
                frames[1].shape()
            )));
        }
        Ok(Self {
            frames,
            timestamps,
            missing: false,
        })
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        self.frames[0].shape()
    }

    pub fn mark_missing(&mut self) {
        for f in &mut self.frames {
            f.data.fill(0.0);
        }
        self.missing = true;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImuSample {
    /// rad/s, body frame.
    pub gyro: [f64; 3],
    /// m/s², body frame, gravity excluded.
    pub accel: [f64; 3],
}

impl ImuSample {
    pub fn as_array(&self) -> [f64; 6] {
        let [a, b, c] = self.gyro;
        let [d, e, f] = self.accel;
        [a, b, c, d, e, f]
    }
}

/// IMU samples spanning one frame interval. A MISSING window carries zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct InertialWindow {
    pub samples: Vec<ImuSample>,
    pub missing: bool,
}

impl InertialWindow {
    pub fn new(samples: Vec<ImuSample>) -> Self {
        Self {
            samples,
            missing: false,
        }
    }

    pub fn mark_missing(&mut self) {
        self.samples.fill(ImuSample::default());
        self.missing = true;
    }
}

/// Degradation modes, in the order used by presets and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DegradationMode {
    Occlusion,
    BlurNoise,
    VisionMissing,
    ImuNoiseBias,
    ImuMissing,
    SpatialMisalign,
    TemporalMisalign,
}

impl DegradationMode {
    pub const ALL: [DegradationMode; 7] = [
        DegradationMode::Occlusion,
        DegradationMode::BlurNoise,
        DegradationMode::VisionMissing,
        DegradationMode::ImuNoiseBias,
        DegradationMode::ImuMissing,
        DegradationMode::SpatialMisalign,
        DegradationMode::TemporalMisalign,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DegradationMode::Occlusion => "occlusion",
            DegradationMode::BlurNoise => "blur_noise",
            DegradationMode::VisionMissing => "vision_missing",
            DegradationMode::ImuNoiseBias => "imu_noise_bias",
            DegradationMode::ImuMissing => "imu_missing",
            DegradationMode::SpatialMisalign => "spatial_misalign",
            DegradationMode::TemporalMisalign => "temporal_misalign",
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

/// One corruption applied to a window, with the parameters actually drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum AppliedDegradation {
    /// Square zero patch with top-left corner (`row`, `col`), shared by both frames.
    Occlusion { row: usize, col: usize, side: usize },
    BlurNoise { sigma: f64, flipped: usize },
    VisionMissing,
    ImuNoiseBias { accel_std: f64, gyro_bias: [f64; 3] },
    ImuMissing,
    SpatialMisalign { axis: [f64; 3], angle_deg: f64 },
    /// Positive shifts delay the IMU stream against the frames.
    TemporalMisalign { shift: i64 },
}

impl AppliedDegradation {
    pub fn mode(&self) -> DegradationMode {
        match self {
            AppliedDegradation::Occlusion { .. } => DegradationMode::Occlusion,
            AppliedDegradation::BlurNoise { .. } => DegradationMode::BlurNoise,
            AppliedDegradation::VisionMissing => DegradationMode::VisionMissing,
            AppliedDegradation::ImuNoiseBias { .. } => DegradationMode::ImuNoiseBias,
            AppliedDegradation::ImuMissing => DegradationMode::ImuMissing,
            AppliedDegradation::SpatialMisalign { .. } => DegradationMode::SpatialMisalign,
            AppliedDegradation::TemporalMisalign { .. } => DegradationMode::TemporalMisalign,
        }
    }

    /// Numeric payload for serialization; inverse of [`AppliedDegradation::from_values`].
    pub fn values(&self) -> Vec<f64> {
        match *self {
            AppliedDegradation::Occlusion { row, col, side } => {
                vec![row as f64, col as f64, side as f64]
            }
            AppliedDegradation::BlurNoise { sigma, flipped } => vec![sigma, flipped as f64],
            AppliedDegradation::VisionMissing | AppliedDegradation::ImuMissing => Vec::new(),
            AppliedDegradation::ImuNoiseBias {
                accel_std,
                gyro_bias,
            } => vec![accel_std, gyro_bias[0], gyro_bias[1], gyro_bias[2]],
            AppliedDegradation::SpatialMisalign { axis, angle_deg } => {
                vec![axis[0], axis[1], axis[2], angle_deg]
            }
            AppliedDegradation::TemporalMisalign { shift } => vec![shift as f64],
        }
    }

    pub fn from_values(mode: DegradationMode, v: &[f64]) -> Option<Self> {
        let need = |n: usize| (v.len() == n).then_some(());
        Some(match mode {
            DegradationMode::Occlusion => {
                need(3)?;
                AppliedDegradation::Occlusion {
                    row: v[0] as usize,
                    col: v[1] as usize,
                    side: v[2] as usize,
                }
            }
            DegradationMode::BlurNoise => {
                need(2)?;
                AppliedDegradation::BlurNoise {
                    sigma: v[0],
                    flipped: v[1] as usize,
                }
            }
            DegradationMode::VisionMissing => {
                need(0)?;
                AppliedDegradation::VisionMissing
            }
            DegradationMode::ImuNoiseBias => {
                need(4)?;
                AppliedDegradation::ImuNoiseBias {
                    accel_std: v[0],
                    gyro_bias: [v[1], v[2], v[3]],
                }
            }
            DegradationMode::ImuMissing => {
                need(0)?;
                AppliedDegradation::ImuMissing
            }
            DegradationMode::SpatialMisalign => {
                need(4)?;
                AppliedDegradation::SpatialMisalign {
                    axis: [v[0], v[1], v[2]],
                    angle_deg: v[3],
                }
            }
            DegradationMode::TemporalMisalign => {
                need(1)?;
                AppliedDegradation::TemporalMisalign { shift: v[0] as i64 }
            }
        })
    }
}

/// One supervised sample: sensors plus clean ground-truth motion.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceWindow {
    pub trajectory: u32,
    pub step: u32,
    pub visual: VisualWindow,
    pub inertial: InertialWindow,
    pub truth: PoseDelta,
    pub manifest: Vec<AppliedDegradation>,
}

impl SequenceWindow {
    pub fn has_mode(&self, mode: DegradationMode) -> bool {
        self.manifest.iter().any(|d| d.mode() == mode)
    }
}
