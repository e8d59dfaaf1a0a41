//! Seven independent sensor corruptions applied per window.

use nalgebra::{Rotation3, Unit, Vector3};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Result, SvioError};
use crate::kv::KvMap;
use crate::window::{AppliedDegradation, DegradationMode, Frame, ImuSample, SequenceWindow};

/// Occlusion patch side relative to the frame side (128 px on 512 px images).
pub const OCCLUSION_SIDE_RATIO: f64 = 128.0 / 512.0;
/// Blur sigma relative to the frame side (15 px on 512 px images).
pub const BLUR_SIGMA_RATIO: f64 = 15.0 / 512.0;

pub const PRESETS: [&str; 3] = ["clean", "vision-degraded", "all-degraded"];

#[derive(Debug, Clone, PartialEq)]
pub struct DegradationSpec {
    pub occlusion_p: f64,
    /// Patch side as a fraction of the frame side.
    pub occlusion_fraction: f64,
    pub blur_p: f64,
    /// Blur sigma as a fraction of the frame side.
    pub blur_sigma_ratio: f64,
    pub salt_pepper_fraction: f64,
    pub vision_missing_p: f64,
    pub imu_noise_p: f64,
    pub accel_noise_std: f64,
    pub gyro_bias: f64,
    pub imu_missing_p: f64,
    pub spatial_p: f64,
    pub spatial_max_deg: f64,
    pub temporal_p: f64,
    pub temporal_max_shift: usize,
    pub seed: u64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            occlusion_p: 0.0,
            occlusion_fraction: OCCLUSION_SIDE_RATIO,
            blur_p: 0.0,
            blur_sigma_ratio: BLUR_SIGMA_RATIO,
            salt_pepper_fraction: 0.05,
            vision_missing_p: 0.0,
            imu_noise_p: 0.0,
            accel_noise_std: 0.5,
            gyro_bias: 0.05,
            imu_missing_p: 0.0,
            spatial_p: 0.0,
            spatial_max_deg: 10.0,
            temporal_p: 0.0,
            temporal_max_shift: 3,
            seed: 0,
        }
    }
}

impl DegradationSpec {
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let base = Self {
            seed,
            ..Self::default()
        };
        match name {
            "clean" => Ok(base),
            "vision-degraded" => Ok(Self {
                occlusion_p: 0.1,
                blur_p: 0.1,
                vision_missing_p: 0.1,
                ..base
            }),
            "all-degraded" => {
                let mut s = base;
                for mode in DegradationMode::ALL {
                    *s.probability_mut(mode) = 0.05;
                }
                Ok(s)
            }
            other => Err(SvioError::Parameter(format!(
                "unknown degradation preset `{other}`; valid presets: {}",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn probability(&self, mode: DegradationMode) -> f64 {
        match mode {
            DegradationMode::Occlusion => self.occlusion_p,
            DegradationMode::BlurNoise => self.blur_p,
            DegradationMode::VisionMissing => self.vision_missing_p,
            DegradationMode::ImuNoiseBias => self.imu_noise_p,
            DegradationMode::ImuMissing => self.imu_missing_p,
            DegradationMode::SpatialMisalign => self.spatial_p,
            DegradationMode::TemporalMisalign => self.temporal_p,
        }
    }

    pub fn probability_mut(&mut self, mode: DegradationMode) -> &mut f64 {
        match mode {
            DegradationMode::Occlusion => &mut self.occlusion_p,
            DegradationMode::BlurNoise => &mut self.blur_p,
            DegradationMode::VisionMissing => &mut self.vision_missing_p,
            DegradationMode::ImuNoiseBias => &mut self.imu_noise_p,
            DegradationMode::ImuMissing => &mut self.imu_missing_p,
            DegradationMode::SpatialMisalign => &mut self.spatial_p,
            DegradationMode::TemporalMisalign => &mut self.temporal_p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for mode in DegradationMode::ALL {
            let p = self.probability(mode);
            if !(0.0..=1.0).contains(&p) {
                return Err(SvioError::Parameter(format!(
                    "{} probability {p} outside [0, 1]",
                    mode.name()
                )));
            }
        }
        let magnitudes = [
            ("occlusion_fraction", self.occlusion_fraction),
            ("blur_sigma_ratio", self.blur_sigma_ratio),
            ("salt_pepper_fraction", self.salt_pepper_fraction),
            ("accel_noise_std", self.accel_noise_std),
            ("gyro_bias", self.gyro_bias),
            ("spatial_max_deg", self.spatial_max_deg),
        ];
        for (name, v) in magnitudes {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(SvioError::Parameter(format!("{name} = {v} must be non-negative")));
            }
        }
        if self.occlusion_fraction > 1.0 || self.salt_pepper_fraction > 1.0 {
            return Err(SvioError::Parameter("fractions must not exceed 1".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, prefix: &str, kv: &mut KvMap) {
        let p = |k: &str| format!("{prefix}.{k}");
        kv.set(p("occlusion_p"), self.occlusion_p);
        kv.set(p("occlusion_fraction"), self.occlusion_fraction);
        kv.set(p("blur_p"), self.blur_p);
        kv.set(p("blur_sigma_ratio"), self.blur_sigma_ratio);
        kv.set(p("salt_pepper_fraction"), self.salt_pepper_fraction);
        kv.set(p("vision_missing_p"), self.vision_missing_p);
        kv.set(p("imu_noise_p"), self.imu_noise_p);
        kv.set(p("accel_noise_std"), self.accel_noise_std);
        kv.set(p("gyro_bias"), self.gyro_bias);
        kv.set(p("imu_missing_p"), self.imu_missing_p);
        kv.set(p("spatial_p"), self.spatial_p);
        kv.set(p("spatial_max_deg"), self.spatial_max_deg);
        kv.set(p("temporal_p"), self.temporal_p);
        kv.set(p("temporal_max_shift"), self.temporal_max_shift);
        kv.set(p("seed"), self.seed);
    }

    pub fn keys(prefix: &str) -> Vec<String> {
        let mut kv = KvMap::new();
        Self::default().write_kv(prefix, &mut kv);
        kv.keys().map(str::to_owned).collect()
    }

    pub fn apply_kv(&mut self, prefix: &str, kv: &KvMap) -> Result<()> {
        let p = |k: &str| format!("{prefix}.{k}");
        kv.apply(&p("occlusion_p"), &mut self.occlusion_p)?;
        kv.apply(&p("occlusion_fraction"), &mut self.occlusion_fraction)?;
        kv.apply(&p("blur_p"), &mut self.blur_p)?;
        kv.apply(&p("blur_sigma_ratio"), &mut self.blur_sigma_ratio)?;
        kv.apply(&p("salt_pepper_fraction"), &mut self.salt_pepper_fraction)?;
        kv.apply(&p("vision_missing_p"), &mut self.vision_missing_p)?;
        kv.apply(&p("imu_noise_p"), &mut self.imu_noise_p)?;
        kv.apply(&p("accel_noise_std"), &mut self.accel_noise_std)?;
        kv.apply(&p("gyro_bias"), &mut self.gyro_bias)?;
        kv.apply(&p("imu_missing_p"), &mut self.imu_missing_p)?;
        kv.apply(&p("spatial_p"), &mut self.spatial_p)?;
        kv.apply(&p("spatial_max_deg"), &mut self.spatial_max_deg)?;
        kv.apply(&p("temporal_p"), &mut self.temporal_p)?;
        kv.apply(&p("temporal_max_shift"), &mut self.temporal_max_shift)?;
        kv.apply(&p("seed"), &mut self.seed)?;
        Ok(())
    }
}

fn occlude(frames: &mut [Frame; 2], row: usize, col: usize, side: usize) {
    for f in frames.iter_mut() {
        for c in 0..f.channels {
            for y in row..row + side {
                for x in col..col + side {
                    let i = f.index(c, y, x);
                    f.data[i] = 0.0;
                }
            }
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with clamped borders.
fn blur(frame: &mut Frame, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (frame.height as isize, frame.width as isize);
    let mut tmp = frame.data.clone();
    for c in 0..frame.channels {
        for y in 0..h {
            for x in 0..w {
                let acc: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| {
                        let xx = (x + i as isize - r).clamp(0, w - 1) as usize;
                        kv * frame.at(c, y as usize, xx)
                    })
                    .sum();
                tmp[frame.index(c, y as usize, x as usize)] = acc;
            }
        }
    }
    for c in 0..frame.channels {
        for y in 0..h {
            for x in 0..w {
                let acc: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| {
                        let yy = (y + i as isize - r).clamp(0, h - 1) as usize;
                        kv * tmp[frame.index(c, yy, x as usize)]
                    })
                    .sum();
                let idx = frame.index(c, y as usize, x as usize);
                frame.data[idx] = acc;
            }
        }
    }
}

/// Sets `count` random pixel positions to the per-channel minimum or maximum.
fn salt_and_pepper(frame: &mut Frame, count: usize, rng: &mut impl Rng) {
    let area = frame.height * frame.width;
    let extremes: Vec<(f64, f64)> = (0..frame.channels)
        .map(|c| {
            let ch = &frame.data[c * area..(c + 1) * area];
            (
                ch.iter().copied().fold(f64::INFINITY, f64::min),
                ch.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )
        })
        .collect();
    for pos in sample(rng, area, count.min(area)) {
        let salt = rng.random_bool(0.5);
        for (c, (lo, hi)) in extremes.iter().enumerate() {
            frame.data[c * area + pos] = if salt { *hi } else { *lo };
        }
    }
}

fn rotate_imu(samples: &mut [ImuSample], rot: &Rotation3<f64>) {
    for s in samples {
        s.gyro = (rot * Vector3::from(s.gyro)).into();
        s.accel = (rot * Vector3::from(s.accel)).into();
    }
}

/// Delays (positive `shift`) or advances the samples, repeating edge samples.
fn shift_samples(samples: &mut [ImuSample], shift: i64) {
    let n = samples.len() as i64;
    let src = samples.to_vec();
    for (k, s) in samples.iter_mut().enumerate() {
        let j = (k as i64 - shift).clamp(0, n - 1);
        *s = src[j as usize];
    }
}

/// Applies every enabled mode independently with its probability.
///
/// One Bernoulli draw is made per mode in a fixed order whether or not the
/// mode is enabled, so streams stay aligned across specs that differ only in
/// probabilities.
pub fn apply_degradation(
    w: &SequenceWindow,
    spec: &DegradationSpec,
    rng: &mut impl Rng,
) -> Result<SequenceWindow> {
    spec.validate()?;
    let mut out = w.clone();
    let fired: Vec<bool> = DegradationMode::ALL
        .iter()
        .map(|m| rng.random::<f64>() < spec.probability(*m))
        .collect();
    let [_, h, wd] = out.visual.frame_shape();
    let side_px = h.min(wd);

    for (mode, on) in DegradationMode::ALL.into_iter().zip(fired) {
        if !on {
            continue;
        }
        let applied = match mode {
            DegradationMode::Occlusion => {
                let side = ((side_px as f64 * spec.occlusion_fraction).round() as usize).clamp(1, side_px);
                let row = rng.random_range(0..=h - side);
                let col = rng.random_range(0..=wd - side);
                occlude(&mut out.visual.frames, row, col, side);
                AppliedDegradation::Occlusion { row, col, side }
            }
            DegradationMode::BlurNoise => {
                let sigma = side_px as f64 * spec.blur_sigma_ratio;
                let count = (spec.salt_pepper_fraction * (h * wd) as f64).round() as usize;
                for f in &mut out.visual.frames {
                    blur(f, sigma);
                    salt_and_pepper(f, count, rng);
                }
                AppliedDegradation::BlurNoise {
                    sigma,
                    flipped: count,
                }
            }
            DegradationMode::VisionMissing => {
                out.visual.mark_missing();
                AppliedDegradation::VisionMissing
            }
            DegradationMode::ImuNoiseBias => {
                let noise = Normal::new(0.0, spec.accel_noise_std).expect("validated");
                let bias: [f64; 3] = std::array::from_fn(|_| {
                    if rng.random_bool(0.5) {
                        spec.gyro_bias
                    } else {
                        -spec.gyro_bias
                    }
                });
                for s in &mut out.inertial.samples {
                    for k in 0..3 {
                        s.accel[k] += noise.sample(rng);
                        s.gyro[k] += bias[k];
                    }
                }
                AppliedDegradation::ImuNoiseBias {
                    accel_std: spec.accel_noise_std,
                    gyro_bias: bias,
                }
            }
            DegradationMode::ImuMissing => {
                out.inertial.mark_missing();
                AppliedDegradation::ImuMissing
            }
            DegradationMode::SpatialMisalign => {
                let v = Vector3::new(
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                );
                let axis = Unit::try_new(v, 1e-12).unwrap_or_else(Vector3::z_axis);
                let angle_deg = rng.random_range(0.0..=spec.spatial_max_deg);
                let rot = Rotation3::from_axis_angle(&axis, angle_deg.to_radians());
                rotate_imu(&mut out.inertial.samples, &rot);
                AppliedDegradation::SpatialMisalign {
                    axis: [axis.x, axis.y, axis.z],
                    angle_deg,
                }
            }
            DegradationMode::TemporalMisalign => {
                let max = spec.temporal_max_shift as i64;
                let shift = if max == 0 {
                    0
                } else {
                    let mag = rng.random_range(1..=max);
                    if rng.random_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                };
                shift_samples(&mut out.inertial.samples, shift);
                AppliedDegradation::TemporalMisalign { shift }
            }
        };
        out.manifest.push(applied);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_constant_frames() {
        let mut f = Frame::zeros(1, 6, 6);
        f.data.fill(0.7);
        blur(&mut f, 1.3);
        assert!(f.data.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn shift_repeats_edges() {
        let mk = |v: f64| ImuSample {
            gyro: [v, 0.0, 0.0],
            accel: [0.0; 3],
        };
        let mut s: Vec<_> = (0..5).map(|i| mk(i as f64)).collect();
        shift_samples(&mut s, 2);
        let g: Vec<f64> = s.iter().map(|x| x.gyro[0]).collect();
        assert_eq!(g, vec![0.0, 0.0, 0.0, 1.0, 2.0]);
        shift_samples(&mut s, -1);
        let g: Vec<f64> = s.iter().map(|x| x.gyro[0]).collect();
        assert_eq!(g, vec![0.0, 0.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn presets_and_unknown_names() {
        let all = DegradationSpec::preset("all-degraded", 1).unwrap();
        for m in DegradationMode::ALL {
            assert_eq!(all.probability(m), 0.05);
        }
        let vis = DegradationSpec::preset("vision-degraded", 1).unwrap();
        assert_eq!(vis.occlusion_p, 0.1);
        assert_eq!(vis.imu_missing_p, 0.0);
        let err = DegradationSpec::preset("foggy", 1).unwrap_err().to_string();
        assert!(err.contains("clean") && err.contains("all-degraded"), "{err}");
    }

    #[test]
    fn invalid_probability_rejected() {
        let s = DegradationSpec {
            blur_p: 1.5,
            ..DegradationSpec::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let s = DegradationSpec::preset("all-degraded", 99).unwrap();
        let mut kv = KvMap::new();
        s.write_kv("deg", &mut kv);
        let mut back = DegradationSpec::default();
        back.apply_kv("deg", &KvMap::parse(&kv.to_text()).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
