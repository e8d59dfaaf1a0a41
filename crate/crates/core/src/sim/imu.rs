use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::dynamics::Motion;
use crate::odometry::{orthonormalize, PoseDelta};
use crate::window::{ImuSample, InertialWindow};

/// Baseline sensor noise present in every window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuNoise {
    pub gyro_std: f64,
    pub accel_std: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            gyro_std: 0.002,
            accel_std: 0.02,
        }
    }
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("std validated non-negative")
}

/// Samples `ratio` IMU readings over `[t0, t0 + dt)`, one at the midpoint of
/// each IMU interval, from the analytic derivatives of `motion`.
pub fn synthesize_inertial(
    motion: &Motion,
    t0: f64,
    frame_dt: f64,
    ratio: usize,
    noise: &ImuNoise,
    rng: &mut impl Rng,
) -> InertialWindow {
    let ratio = ratio.max(1);
    let h = frame_dt / ratio as f64;
    let (gn, an) = (normal(noise.gyro_std), normal(noise.accel_std));
    let samples = (0..ratio)
        .map(|k| {
            let t = t0 + (k as f64 + 0.5) * h;
            let w = motion.angular_velocity(t);
            let a = motion.acceleration(t);
            ImuSample {
                gyro: [
                    w.x + gn.sample(rng),
                    w.y + gn.sample(rng),
                    w.z + gn.sample(rng),
                ],
                accel: [
                    a.x + an.sample(rng),
                    a.y + an.sample(rng),
                    a.z + an.sample(rng),
                ],
            }
        })
        .collect();
    InertialWindow::new(samples)
}

/// Dead-reckons one window from a known initial body velocity (midpoint rule).
pub fn integrate_window(window: &InertialWindow, frame_dt: f64, initial_velocity: Vector3<f64>) -> PoseDelta {
    let n = window.samples.len();
    let h = frame_dt / n as f64;
    let mut r = nalgebra::Matrix3::identity();
    let mut v = initial_velocity;
    let mut p = Vector3::zeros();
    for s in &window.samples {
        let w = Vector3::from(s.gyro);
        let a = Vector3::from(s.accel);
        let r_mid = r * Rotation3::new(w * (0.5 * h)).into_inner();
        let v_next = v + r_mid * a * h;
        p += (v + v_next) * (0.5 * h);
        v = v_next;
        r = orthonormalize(&(r * Rotation3::new(w * h).into_inner()));
    }
    let (roll, pitch, yaw) = Rotation3::from_matrix_unchecked(r).euler_angles();
    PoseDelta::new([p.x, p.y, p.z], [roll, pitch, yaw])
}
