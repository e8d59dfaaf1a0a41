//! Smooth synthetic motion and its integration into frame-rate poses.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;

use crate::error::{Result, SvioError};
use crate::odometry::{orthonormalize, GlobalPose, PoseDelta};
use crate::seed;

/// A band-limited signal: `mean + Σ amplitude/harmonics · sin(2π f t + φ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelSpec {
    pub mean: f64,
    pub amplitude: f64,
}

impl ChannelSpec {
    pub const ZERO: ChannelSpec = ChannelSpec {
        mean: 0.0,
        amplitude: 0.0,
    };

    pub fn new(mean: f64, amplitude: f64) -> Self {
        Self { mean, amplitude }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Forward motion with yaw-dominant turning.
    Driving,
    /// Full 3-D translation and rotation.
    Aerial,
    Stationary,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Driving => "driving",
            Regime::Aerial => "aerial",
            Regime::Stationary => "stationary",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "driving" => Ok(Regime::Driving),
            "aerial" => Ok(Regime::Aerial),
            "stationary" => Ok(Regime::Stationary),
            other => Err(format!("unknown regime `{other}` (driving|aerial|stationary)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsConfig {
    pub frame_rate: f64,
    /// IMU samples per frame interval.
    pub imu_ratio: usize,
    /// Body-frame linear velocity channels, m/s.
    pub velocity: [ChannelSpec; 3],
    /// Body-frame angular velocity channels, rad/s.
    pub angular: [ChannelSpec; 3],
    pub harmonics: usize,
    pub min_freq: f64,
    pub max_freq: f64,
    /// Integration substeps per IMU interval.
    pub substeps: usize,
}

impl DynamicsConfig {
    pub fn preset(regime: Regime) -> Self {
        let base = Self {
            frame_rate: 10.0,
            imu_ratio: 10,
            velocity: [ChannelSpec::ZERO; 3],
            angular: [ChannelSpec::ZERO; 3],
            harmonics: 3,
            min_freq: 0.03,
            max_freq: 0.4,
            substeps: 8,
        };
        match regime {
            Regime::Stationary => base,
            Regime::Driving => Self {
                velocity: [
                    ChannelSpec::new(6.0, 4.0),
                    ChannelSpec::ZERO,
                    ChannelSpec::new(0.0, 0.1),
                ],
                angular: [
                    ChannelSpec::new(0.0, 0.03),
                    ChannelSpec::new(0.0, 0.03),
                    ChannelSpec::new(0.0, 0.45),
                ],
                ..base
            },
            Regime::Aerial => Self {
                velocity: [
                    ChannelSpec::new(1.0, 2.0),
                    ChannelSpec::new(0.0, 2.0),
                    ChannelSpec::new(0.0, 0.6),
                ],
                angular: [
                    ChannelSpec::new(0.0, 0.3),
                    ChannelSpec::new(0.0, 0.3),
                    ChannelSpec::new(0.0, 0.5),
                ],
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .velocity
            .iter()
            .chain(&self.angular)
            .all(|c| c.mean.is_finite() && c.amplitude.is_finite() && c.amplitude >= 0.0);
        if !(self.frame_rate > 0.0)
            || self.imu_ratio == 0
            || self.harmonics == 0
            || self.substeps == 0
            || !(self.min_freq > 0.0 && self.max_freq >= self.min_freq)
            || !finite
        {
            return Err(SvioError::Parameter(format!("invalid dynamics config: {self:?}")));
        }
        Ok(())
    }

    pub fn frame_dt(&self) -> f64 {
        1.0 / self.frame_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Harmonic {
    amplitude: f64,
    omega: f64,
    phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Channel {
    mean: f64,
    harmonics: Vec<Harmonic>,
}

impl Channel {
    fn value(&self, t: f64) -> f64 {
        self.mean
            + self
                .harmonics
                .iter()
                .map(|h| h.amplitude * (h.omega * t + h.phase).sin())
                .sum::<f64>()
    }

    fn rate(&self, t: f64) -> f64 {
        self.harmonics
            .iter()
            .map(|h| h.amplitude * h.omega * (h.omega * t + h.phase).cos())
            .sum()
    }
}

/// Continuous body-frame kinematics with analytic derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Motion {
    velocity: [Channel; 3],
    angular: [Channel; 3],
}

impl Motion {
    pub fn sample(cfg: &DynamicsConfig, rng: &mut impl Rng) -> Self {
        let mut channel = |spec: &ChannelSpec| Channel {
            mean: spec.mean,
            harmonics: (0..cfg.harmonics)
                .map(|_| Harmonic {
                    amplitude: spec.amplitude / cfg.harmonics as f64,
                    omega: 2.0 * std::f64::consts::PI * rng.random_range(cfg.min_freq..=cfg.max_freq),
                    phase: rng.random_range(0.0..2.0 * std::f64::consts::PI),
                })
                .collect(),
        };
        let velocity = [channel(&cfg.velocity[0]), channel(&cfg.velocity[1]), channel(&cfg.velocity[2])];
        let angular = [channel(&cfg.angular[0]), channel(&cfg.angular[1]), channel(&cfg.angular[2])];
        Self { velocity, angular }
    }

    /// Body-frame linear velocity.
    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        Vector3::new(self.velocity[0].value(t), self.velocity[1].value(t), self.velocity[2].value(t))
    }

    /// Body-frame angular velocity.
    pub fn angular_velocity(&self, t: f64) -> Vector3<f64> {
        Vector3::new(self.angular[0].value(t), self.angular[1].value(t), self.angular[2].value(t))
    }

    /// Body-frame proper acceleration without gravity: `v̇ + ω × v`.
    pub fn acceleration(&self, t: f64) -> Vector3<f64> {
        let dv = Vector3::new(self.velocity[0].rate(t), self.velocity[1].rate(t), self.velocity[2].rate(t));
        dv + self.angular_velocity(t).cross(&self.velocity(t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTrajectory {
    pub motion: Motion,
    pub times: Vec<f64>,
    pub poses: Vec<GlobalPose>,
    /// `deltas[k]` carries `poses[k]` onto `poses[k + 1]`.
    pub deltas: Vec<PoseDelta>,
}

fn exp_so3(w: Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(w).into_inner()
}

/// Integrates seeded smooth kinematics from the identity pose and samples
/// `length` frame poses.
pub fn generate_trajectory(seed: u64, length: usize, cfg: &DynamicsConfig) -> Result<GeneratedTrajectory> {
    if length < 2 {
        return Err(SvioError::Parameter(format!("trajectory length {length} < 2")));
    }
    cfg.validate()?;
    let mut rng = seed::rng(seed, "motion");
    let motion = Motion::sample(cfg, &mut rng);
    let fine = cfg.imu_ratio * cfg.substeps;
    let h = cfg.frame_dt() / fine as f64;

    let mut times = Vec::with_capacity(length);
    let mut poses = Vec::with_capacity(length);
    let mut pose = GlobalPose::identity();
    times.push(0.0);
    poses.push(pose);
    for k in 1..length {
        let t0 = (k - 1) as f64 * cfg.frame_dt();
        for s in 0..fine {
            let tm = t0 + (s as f64 + 0.5) * h;
            let w = motion.angular_velocity(tm);
            let r_mid = pose.orientation * exp_so3(w * (0.5 * h));
            pose.position += r_mid * motion.velocity(tm) * h;
            pose.orientation = orthonormalize(&(pose.orientation * exp_so3(w * h)));
        }
        times.push(k as f64 * cfg.frame_dt());
        poses.push(pose);
    }
    let deltas = poses.windows(2).map(|p| PoseDelta::between(&p[0], &p[1])).collect();
    Ok(GeneratedTrajectory {
        motion,
        times,
        poses,
        deltas,
    })
}
