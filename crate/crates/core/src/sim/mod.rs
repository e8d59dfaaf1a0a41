//! Synthetic trajectories, sensor windows, degradations and the dataset file.

mod camera;
mod dataset;
mod degrade;
mod dynamics;
mod imu;

pub use camera::{mean_displacement, synthesize_visual, warp_field, CameraConfig, Scene};
pub use dataset::{
    generate_dataset, read_dataset, write_dataset, Dataset, DATASET_MAGIC, DATASET_VERSION,
};
pub use degrade::{
    apply_degradation, DegradationSpec, BLUR_SIGMA_RATIO, OCCLUSION_SIDE_RATIO, PRESETS,
};
pub use dynamics::{
    generate_trajectory, ChannelSpec, DynamicsConfig, GeneratedTrajectory, Motion, Regime,
};
pub use imu::{integrate_window, synthesize_inertial, ImuNoise};

use crate::error::{Result, SvioError};
use crate::kv::KvMap;

/// Everything needed to regenerate a clean dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub regime: Regime,
    pub dynamics: DynamicsConfig,
    pub camera: CameraConfig,
    pub imu_noise: ImuNoise,
    pub windows_per_trajectory: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::for_regime(Regime::Driving)
    }
}

impl SimConfig {
    pub fn for_regime(regime: Regime) -> Self {
        Self {
            regime,
            dynamics: DynamicsConfig::preset(regime),
            camera: CameraConfig::default(),
            imu_noise: ImuNoise::default(),
            windows_per_trajectory: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dynamics.validate()?;
        self.camera.validate()?;
        if self.windows_per_trajectory == 0 {
            return Err(SvioError::Parameter("windows_per_trajectory must be ≥ 1".into()));
        }
        if !(self.imu_noise.gyro_std >= 0.0 && self.imu_noise.accel_std >= 0.0) {
            return Err(SvioError::Parameter("IMU noise must be non-negative".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, prefix: &str, kv: &mut KvMap) {
        let p = |k: &str| format!("{prefix}.{k}");
        let d = &self.dynamics;
        kv.set(p("regime"), self.regime.name());
        kv.set(p("frame_rate"), d.frame_rate);
        kv.set(p("imu_ratio"), d.imu_ratio);
        for (i, axis) in ["x", "y", "z"].iter().enumerate() {
            kv.set(p(&format!("velocity_{axis}_mean")), d.velocity[i].mean);
            kv.set(p(&format!("velocity_{axis}_amp")), d.velocity[i].amplitude);
            kv.set(p(&format!("angular_{axis}_mean")), d.angular[i].mean);
            kv.set(p(&format!("angular_{axis}_amp")), d.angular[i].amplitude);
        }
        kv.set(p("harmonics"), d.harmonics);
        kv.set(p("min_freq"), d.min_freq);
        kv.set(p("max_freq"), d.max_freq);
        kv.set(p("substeps"), d.substeps);
        let c = &self.camera;
        kv.set(p("channels"), c.channels);
        kv.set(p("frame_size"), c.size);
        kv.set(p("half_width"), c.half_width);
        kv.set(p("camera_height"), c.height);
        kv.set(p("pixel_noise"), c.pixel_noise);
        kv.set(p("waves"), c.waves);
        kv.set(p("min_wavelength"), c.min_wavelength);
        kv.set(p("max_wavelength"), c.max_wavelength);
        kv.set(p("gyro_noise_std"), self.imu_noise.gyro_std);
        kv.set(p("accel_noise_std"), self.imu_noise.accel_std);
        kv.set(p("windows_per_trajectory"), self.windows_per_trajectory);
    }

    pub fn keys(prefix: &str) -> Vec<String> {
        let mut kv = KvMap::new();
        Self::default().write_kv(prefix, &mut kv);
        kv.keys().map(str::to_owned).collect()
    }

    /// Reads `prefix.*`. A `regime` key resets the dynamics to that regime's
    /// preset before the individual channel keys are applied.
    pub fn apply_kv(&mut self, prefix: &str, kv: &KvMap) -> Result<()> {
        let p = |k: &str| format!("{prefix}.{k}");
        if let Some(r) = kv.get_str(&p("regime")) {
            let regime: Regime = r.parse().map_err(SvioError::Parameter)?;
            if regime != self.regime {
                self.regime = regime;
                self.dynamics = DynamicsConfig::preset(regime);
            }
        }
        let d = &mut self.dynamics;
        kv.apply(&p("frame_rate"), &mut d.frame_rate)?;
        kv.apply(&p("imu_ratio"), &mut d.imu_ratio)?;
        for (i, axis) in ["x", "y", "z"].iter().enumerate() {
            kv.apply(&p(&format!("velocity_{axis}_mean")), &mut d.velocity[i].mean)?;
            kv.apply(&p(&format!("velocity_{axis}_amp")), &mut d.velocity[i].amplitude)?;
            kv.apply(&p(&format!("angular_{axis}_mean")), &mut d.angular[i].mean)?;
            kv.apply(&p(&format!("angular_{axis}_amp")), &mut d.angular[i].amplitude)?;
        }
        kv.apply(&p("harmonics"), &mut d.harmonics)?;
        kv.apply(&p("min_freq"), &mut d.min_freq)?;
        kv.apply(&p("max_freq"), &mut d.max_freq)?;
        kv.apply(&p("substeps"), &mut d.substeps)?;
        let c = &mut self.camera;
        kv.apply(&p("channels"), &mut c.channels)?;
        kv.apply(&p("frame_size"), &mut c.size)?;
        kv.apply(&p("half_width"), &mut c.half_width)?;
        kv.apply(&p("camera_height"), &mut c.height)?;
        kv.apply(&p("pixel_noise"), &mut c.pixel_noise)?;
        kv.apply(&p("waves"), &mut c.waves)?;
        kv.apply(&p("min_wavelength"), &mut c.min_wavelength)?;
        kv.apply(&p("max_wavelength"), &mut c.max_wavelength)?;
        kv.apply(&p("gyro_noise_std"), &mut self.imu_noise.gyro_std)?;
        kv.apply(&p("accel_noise_std"), &mut self.imu_noise.accel_std)?;
        kv.apply(&p("windows_per_trajectory"), &mut self.windows_per_trajectory)?;
        Ok(())
    }
}
