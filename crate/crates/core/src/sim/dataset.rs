use std::fs;
use std::io::Write;
use std::path::Path;

use super::camera::{synthesize_visual, Scene};
use super::degrade::{apply_degradation, DegradationSpec};
use super::dynamics::generate_trajectory;
use super::imu::synthesize_inertial;
use super::SimConfig;
use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Result, SvioError};
use crate::kv::KvMap;
use crate::odometry::PoseDelta;
use crate::seed;
use crate::window::{
    AppliedDegradation, DegradationMode, Frame, ImuSample, InertialWindow, SequenceWindow,
    VisualWindow,
};

pub const DATASET_MAGIC: &[u8; 8] = b"SVIODATA";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Echo of the generating configuration.
    pub config: KvMap,
    pub windows: Vec<SequenceWindow>,
}

impl Dataset {
    /// Runs of consecutive windows from the same trajectory, as index ranges.
    pub fn trajectories(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.windows.len() {
            let split = i == self.windows.len()
                || self.windows[i].trajectory != self.windows[i - 1].trajectory
                || self.windows[i].step != self.windows[i - 1].step + 1;
            if split {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    /// Consecutive chunks of at most `len` windows that never cross a
    /// trajectory boundary. With `full_only`, short tails are dropped.
    pub fn chunks(&self, len: usize, full_only: bool) -> Vec<std::ops::Range<usize>> {
        let len = len.max(1);
        let mut out = Vec::new();
        for r in self.trajectories() {
            let mut s = r.start;
            while s < r.end {
                let e = (s + len).min(r.end);
                if !full_only || e - s == len {
                    out.push(s..e);
                }
                s = e;
            }
        }
        out
    }

    /// Frame side and channel count of the stored windows.
    pub fn frame_shape(&self) -> Option<[usize; 3]> {
        self.windows.first().map(|w| w.visual.frame_shape())
    }

    pub fn imu_samples(&self) -> Option<usize> {
        self.windows.first().map(|w| w.inertial.samples.len())
    }
}

/// Generates `windows` windows over as many trajectories as needed, then
/// applies `degradation` to each.
pub fn generate_dataset(
    sim: &SimConfig,
    windows: usize,
    seed: u64,
    degradation: &DegradationSpec,
) -> Result<Dataset> {
    sim.validate()?;
    degradation.validate()?;
    let per = sim.windows_per_trajectory;
    let mut out = Vec::with_capacity(windows);
    let mut traj = 0u64;
    while out.len() < windows {
        let count = per.min(windows - out.len());
        let generated = generate_trajectory(seed::derive_indexed(seed, "trajectory", traj), count + 1, &sim.dynamics)?;
        let scene = Scene::new(seed::derive_indexed(seed, "scene", traj), &sim.camera)?;
        let dt = sim.dynamics.frame_dt();
        for step in 0..count {
            let index = traj * per as u64 + step as u64;
            let mut rng = seed::rng_indexed(seed, "sensor-noise", index);
            let (t0, t1) = (generated.times[step], generated.times[step + 1]);
            let visual = synthesize_visual(
                &scene,
                &generated.poses[step],
                &generated.poses[step + 1],
                [t0, t1],
                &mut rng,
            );
            let inertial = synthesize_inertial(
                &generated.motion,
                t0,
                dt,
                sim.dynamics.imu_ratio,
                &sim.imu_noise,
                &mut rng,
            );
            let clean = SequenceWindow {
                trajectory: traj as u32,
                step: step as u32,
                visual,
                inertial,
                truth: generated.deltas[step],
                manifest: Vec::new(),
            };
            let mut drng = seed::rng_indexed(degradation.seed, "degradation", index);
            out.push(apply_degradation(&clean, degradation, &mut drng)?);
        }
        traj += 1;
    }
    let mut config = KvMap::new();
    sim.write_kv("sim", &mut config);
    degradation.write_kv("degrade", &mut config);
    config.set("data.seed", seed);
    config.set("data.windows", windows);
    Ok(Dataset {
        config,
        windows: out,
    })
}

fn encode(ds: &Dataset) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.str(&ds.config.to_text());
    w.u64(ds.windows.len() as u64);
    for win in &ds.windows {
        w.u32(win.trajectory);
        w.u32(win.step);
        let v = &win.visual;
        w.u8(u8::from(v.missing));
        w.f64(v.timestamps[0]);
        w.f64(v.timestamps[1]);
        let [c, h, wd] = v.frame_shape();
        w.u32(c as u32);
        w.u32(h as u32);
        w.u32(wd as u32);
        w.f64s(&v.frames[0].data);
        w.f64s(&v.frames[1].data);
        let imu = &win.inertial;
        w.u8(u8::from(imu.missing));
        w.u32(imu.samples.len() as u32);
        for s in &imu.samples {
            w.f64s(&s.as_array());
        }
        w.f64s(&win.truth.as_array());
        w.u32(win.manifest.len() as u32);
        for d in &win.manifest {
            w.u8(d.mode().tag());
            let vals = d.values();
            w.u32(vals.len() as u32);
            w.f64s(&vals);
        }
    }
    w.into_inner()
}

fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(DATASET_MAGIC)?;
    let version = r.u32("format version")?;
    if version != DATASET_VERSION {
        return Err(SvioError::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let config = KvMap::parse(&r.str("config block")?)?;
    let count = r.u64("window count")? as usize;
    let mut windows = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let trajectory = r.u32("trajectory id")?;
        let step = r.u32("step")?;
        let missing = r.u8("visual flag")? != 0;
        let timestamps = [r.f64("timestamp")?, r.f64("timestamp")?];
        let c = r.u32("channels")? as usize;
        let h = r.u32("height")? as usize;
        let wd = r.u32("width")? as usize;
        let n = c
            .checked_mul(h)
            .and_then(|x| x.checked_mul(wd))
            .ok_or_else(|| r.error("frame shape overflows"))?;
        let mut frame = || -> Result<Frame> {
            Ok(Frame {
                channels: c,
                height: h,
                width: wd,
                data: r.f64s(n, "frame payload")?,
            })
        };
        let frames = [frame()?, frame()?];
        let visual = VisualWindow {
            frames,
            timestamps,
            missing,
        };
        let imu_missing = r.u8("inertial flag")? != 0;
        let ns = r.u32("sample count")? as usize;
        let raw = r.f64s(ns * 6, "imu payload")?;
        let samples = raw
            .chunks_exact(6)
            .map(|s| ImuSample {
                gyro: [s[0], s[1], s[2]],
                accel: [s[3], s[4], s[5]],
            })
            .collect();
        let inertial = InertialWindow {
            samples,
            missing: imu_missing,
        };
        let t = r.f64s(6, "ground truth")?;
        let truth = PoseDelta::from_array([t[0], t[1], t[2], t[3], t[4], t[5]]);
        let nm = r.u32("manifest length")? as usize;
        let mut manifest = Vec::with_capacity(nm.min(16));
        for _ in 0..nm {
            let at = r.offset();
            let tag = r.u8("manifest tag")?;
            let mode = DegradationMode::from_tag(tag).ok_or_else(|| SvioError::Format {
                offset: at,
                detail: format!("unknown degradation tag {tag}"),
            })?;
            let nv = r.u32("manifest value count")? as usize;
            let vals = r.f64s(nv, "manifest values")?;
            manifest.push(AppliedDegradation::from_values(mode, &vals).ok_or_else(|| {
                SvioError::Format {
                    offset: at,
                    detail: format!("{} entry with {nv} values", mode.name()),
                }
            })?);
        }
        windows.push(SequenceWindow {
            trajectory,
            step,
            visual,
            inertial,
            truth,
            manifest,
        });
    }
    if r.remaining() != 0 {
        return Err(r.error(format!("{} trailing bytes", r.remaining())));
    }
    Ok(Dataset { config, windows })
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(ds))?;
    f.sync_all()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode(&fs::read(path)?)
}
