//! Pseudo-images of a textured ground plane seen by a downward camera.
//!
//! Each channel is a smooth sum of plane waves over ground coordinates, so a
//! frame pair taken from two poses differs by a warp whose displacement
//! field follows directly from the relative motion.

use nalgebra::{Rotation3, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SvioError};
use crate::odometry::GlobalPose;
use crate::seed;
use crate::window::{Frame, VisualWindow};

#[derive(Debug, Clone, PartialEq)]
pub struct CameraConfig {
    pub channels: usize,
    /// Square frame side, pixels.
    pub size: usize,
    /// Half the ground extent covered by the frame at nominal height, meters.
    pub half_width: f64,
    /// Nominal height above ground, meters; sets tilt parallax and zoom.
    pub height: f64,
    pub pixel_noise: f64,
    pub waves: usize,
    pub min_wavelength: f64,
    pub max_wavelength: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            channels: 2,
            size: 16,
            half_width: 4.0,
            height: 10.0,
            pixel_noise: 0.01,
            waves: 8,
            min_wavelength: 3.0,
            max_wavelength: 12.0,
        }
    }
}

impl CameraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.size == 0
            || !(self.half_width > 0.0)
            || !(self.height > 0.0)
            || !(self.pixel_noise >= 0.0)
            || self.waves == 0
            || !(self.min_wavelength > 0.0 && self.max_wavelength >= self.min_wavelength)
        {
            return Err(SvioError::Parameter(format!("invalid camera config: {self:?}")));
        }
        Ok(())
    }

    /// Camera-plane offset (meters at nominal height) of pixel (`row`, `col`),
    /// in continuous pixel coordinates.
    fn pixel_offset(&self, row: f64, col: f64) -> Vector2<f64> {
        let s = self.size as f64;
        Vector2::new(
            ((col + 0.5) / s * 2.0 - 1.0) * self.half_width,
            ((row + 0.5) / s * 2.0 - 1.0) * self.half_width,
        )
    }

    fn offset_to_pixel(&self, o: Vector2<f64>) -> (f64, f64) {
        let s = self.size as f64;
        let col = (o.x / self.half_width + 1.0) * s / 2.0 - 0.5;
        let row = (o.y / self.half_width + 1.0) * s / 2.0 - 0.5;
        (row, col)
    }
}

/// Planar view geometry derived from a 3-D pose.
struct View {
    origin: Vector2<f64>,
    yaw: nalgebra::Matrix2<f64>,
    scale: f64,
}

impl View {
    fn new(pose: &GlobalPose, cfg: &CameraConfig) -> Self {
        let (roll, pitch, yaw) = Rotation3::from_matrix_unchecked(pose.orientation).euler_angles();
        let rot = nalgebra::Rotation2::new(yaw).into_inner();
        let tilt = Vector2::new(pitch, -roll) * cfg.height;
        Self {
            origin: Vector2::new(pose.position.x, pose.position.y) + rot * tilt,
            yaw: rot,
            scale: 1.0 + pose.position.z / cfg.height,
        }
    }

    fn ground(&self, offset: Vector2<f64>) -> Vector2<f64> {
        self.origin + self.yaw * (offset * self.scale)
    }

    fn offset(&self, ground: Vector2<f64>) -> Vector2<f64> {
        self.yaw.transpose() * (ground - self.origin) / self.scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Wave {
    k: Vector2<f64>,
    phase: f64,
    amplitude: f64,
}

/// Seeded ground texture, one wave set per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    cfg: CameraConfig,
    channels: Vec<Vec<Wave>>,
}

impl Scene {
    pub fn new(seed: u64, cfg: &CameraConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(seed, "scene");
        let amplitude = 0.5 / (cfg.waves as f64).sqrt();
        let channels = (0..cfg.channels)
            .map(|_| {
                (0..cfg.waves)
                    .map(|_| {
                        let lambda = rng.random_range(cfg.min_wavelength..=cfg.max_wavelength);
                        let dir = rng.random_range(0.0..std::f64::consts::TAU);
                        let k = Vector2::new(dir.cos(), dir.sin()) * (std::f64::consts::TAU / lambda);
                        Wave {
                            k,
                            phase: rng.random_range(0.0..std::f64::consts::TAU),
                            amplitude,
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            channels,
        })
    }

    pub fn config(&self) -> &CameraConfig {
        &self.cfg
    }

    fn texture(&self, channel: usize, p: Vector2<f64>) -> f64 {
        0.5 + self.channels[channel]
            .iter()
            .map(|w| w.amplitude * (w.k.dot(&p) + w.phase).sin())
            .sum::<f64>()
    }

    /// Noise-free frame seen from `pose`.
    pub fn render(&self, pose: &GlobalPose) -> Frame {
        let view = View::new(pose, &self.cfg);
        let n = self.cfg.size;
        let mut frame = Frame::zeros(self.cfg.channels, n, n);
        for c in 0..self.cfg.channels {
            for row in 0..n {
                for col in 0..n {
                    let g = view.ground(self.cfg.pixel_offset(row as f64, col as f64));
                    let idx = frame.index(c, row, col);
                    frame.data[idx] = self.texture(c, g);
                }
            }
        }
        frame
    }
}

/// For every pixel of the second frame, the `(drow, dcol)` displacement to
/// where the same ground point appears in the first frame.
pub fn warp_field(cfg: &CameraConfig, first: &GlobalPose, second: &GlobalPose) -> Vec<[f64; 2]> {
    let (v1, v2) = (View::new(first, cfg), View::new(second, cfg));
    let n = cfg.size;
    let mut out = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let g = v2.ground(cfg.pixel_offset(row as f64, col as f64));
            let (r1, c1) = cfg.offset_to_pixel(v1.offset(g));
            out.push([r1 - row as f64, c1 - col as f64]);
        }
    }
    out
}

pub fn mean_displacement(field: &[[f64; 2]]) -> f64 {
    field.iter().map(|d| d[0].hypot(d[1])).sum::<f64>() / field.len().max(1) as f64
}

/// Renders the frame pair for two consecutive poses and adds pixel noise.
pub fn synthesize_visual(
    scene: &Scene,
    first: &GlobalPose,
    second: &GlobalPose,
    timestamps: [f64; 2],
    rng: &mut impl Rng,
) -> VisualWindow {
    let noise = Normal::new(0.0, scene.cfg.pixel_noise).expect("validated non-negative");
    let mut frames = [scene.render(first), scene.render(second)];
    for f in &mut frames {
        for v in &mut f.data {
            *v += noise.sample(rng);
        }
    }
    VisualWindow {
        frames,
        timestamps,
        missing: false,
    }
}
