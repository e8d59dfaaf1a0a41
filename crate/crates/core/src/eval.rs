//! Relative pose metrics, mask analytics and the model × preset grid.

use std::io::Write;

use svio_autodiff::{Graph, ParamStore};

use crate::error::{Result, SvioError};
use crate::fusion::HardEvalMode;
use crate::kv::KvMap;
use crate::model::{predictions, Batch, FusionMode, GateNoise, Gating, HardGates, Model};
use crate::odometry::{relative_rotation_angle, PoseDelta};
use crate::seed;
use crate::sim::Dataset;
use crate::train::{check_compatible, Checkpoint};
use crate::window::DegradationMode;

/// Windows per forward pass during evaluation.
const EVAL_BATCH: usize = 32;

/// Per-window output of running a model over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRecord {
    pub index: usize,
    pub trajectory: u32,
    pub step: u32,
    pub prediction: PoseDelta,
    pub truth: PoseDelta,
    /// Fraction of kept features (hard) or mean mask weight (soft).
    pub visual_rate: Option<f64>,
    pub inertial_rate: Option<f64>,
}

impl WindowRecord {
    pub fn translation_error(&self) -> f64 {
        let p = self.prediction.translation;
        let t = self.truth.translation;
        ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2) + (p[2] - t[2]).powi(2)).sqrt()
    }

    pub fn rotation_error_deg(&self) -> f64 {
        relative_rotation_angle(&self.prediction, &self.truth).to_degrees()
    }
}

/// Evaluation knobs that do not belong to the trained model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub seq_len: usize,
    /// Seed of the per-window Gumbel streams used by hard fusion.
    pub seed: u64,
    pub hard_mode: HardEvalMode,
    /// Temperature of sampled relaxed gates.
    pub tau: f64,
    /// Diagnostic hook: every mask is 1.
    pub force_ones: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seq_len: 8,
            seed: 0,
            hard_mode: HardEvalMode::ArgmaxBinary,
            tau: 0.5,
            force_ones: false,
        }
    }
}

impl EvalOptions {
    /// Options matching a checkpoint's training configuration.
    pub fn for_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ckpt.train_config()?;
        Ok(Self {
            seq_len: cfg.seq_len,
            seed: cfg.hard.seed,
            hard_mode: cfg.hard.eval_mode,
            tau: cfg.hard.tau_end,
            force_ones: false,
        })
    }
}

fn mask_rate(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Runs `model` over every window of `ds`. Trajectories are cut into
/// consecutive chunks of `seq_len` windows; the last chunk may be shorter.
pub fn run_model(model: &Model, params: &ParamStore, ds: &Dataset, opts: &EvalOptions) -> Result<Vec<WindowRecord>> {
    check_compatible(model, ds, 1)?;
    let fusion = model.config.fusion;
    let (nv, ni) = (model.config.visual_features, model.config.inertial_features);
    let chunks = ds.chunks(opts.seq_len, false);
    let mut records: Vec<Option<WindowRecord>> = vec![None; ds.windows.len()];
    let mut start = 0;
    while start < chunks.len() {
        let len = chunks[start].len();
        let per = (EVAL_BATCH / len).max(1);
        let mut end = start;
        while end < chunks.len() && end - start < per && chunks[end].len() == len {
            end += 1;
        }
        let group = &chunks[start..end];
        let seqs: Vec<&[_]> = group.iter().map(|r| &ds.windows[r.clone()]).collect();
        let batch = Batch::from_sequences(&seqs)?;
        let b = group.len();
        // Row t·B + b of the batch is window group[b].start + t.
        let index_of = |row: usize| group[row % b].start + row / b;
        let gating = if opts.force_ones {
            Gating::Ones
        } else if fusion == FusionMode::Hard {
            let seeds: Vec<u64> = (0..batch.windows.len())
                .map(|row| seed::derive_indexed(opts.seed, "eval-gates", index_of(row) as u64))
                .collect();
            let noise = GateNoise::per_row(&seeds, nv, ni);
            Gating::Learned(match opts.hard_mode {
                HardEvalMode::ArgmaxBinary => HardGates::Binary { noise },
                HardEvalMode::Sample => HardGates::Relaxed {
                    tau: opts.tau,
                    straight_through: false,
                    noise,
                },
            })
        } else {
            Gating::Learned(HardGates::None)
        };
        let mut g = Graph::new();
        let out = model.forward(&mut g, params, &batch, &gating)?;
        let preds = predictions(&g, &out);
        let masks = out.masks.map(|(mv, mi)| (g.value(mv).data().to_vec(), g.value(mi).data().to_vec()));
        for (row, pred) in preds.into_iter().enumerate() {
            let idx = index_of(row);
            let w = &ds.windows[idx];
            let (visual_rate, inertial_rate) = match &masks {
                Some((mv, mi)) => (
                    Some(mask_rate(&mv[row * nv..(row + 1) * nv])),
                    Some(mask_rate(&mi[row * ni..(row + 1) * ni])),
                ),
                None => (None, None),
            };
            records[idx] = Some(WindowRecord {
                index: idx,
                trajectory: w.trajectory,
                step: w.step,
                prediction: pred,
                truth: w.truth,
                visual_rate,
                inertial_rate,
            });
        }
        start = end;
    }
    Ok(records.into_iter().map(|r| r.expect("every window is in a chunk")).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceError {
    pub trajectory: u32,
    pub steps: usize,
    pub translation: f64,
    pub rotation_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean per-step translation error, meters.
    pub translation: f64,
    /// Mean per-step rotation error, degrees.
    pub rotation_deg: f64,
    pub steps: usize,
    pub per_sequence: Vec<SequenceError>,
    pub config: KvMap,
}

impl EvalReport {
    pub fn from_records(records: &[WindowRecord], config: KvMap) -> Self {
        let mut per_sequence: Vec<SequenceError> = Vec::new();
        let (mut tt, mut rt) = (0.0, 0.0);
        for r in records {
            let (te, re) = (r.translation_error(), r.rotation_error_deg());
            tt += te;
            rt += re;
            match per_sequence.last_mut() {
                Some(s) if s.trajectory == r.trajectory => {
                    s.steps += 1;
                    s.translation += te;
                    s.rotation_deg += re;
                }
                _ => per_sequence.push(SequenceError {
                    trajectory: r.trajectory,
                    steps: 1,
                    translation: te,
                    rotation_deg: re,
                }),
            }
        }
        for s in &mut per_sequence {
            s.translation /= s.steps as f64;
            s.rotation_deg /= s.steps as f64;
        }
        let n = records.len().max(1) as f64;
        Self {
            translation: tt / n,
            rotation_deg: rt / n,
            steps: records.len(),
            per_sequence,
            config,
        }
    }

    /// Summary row `all` followed by one row per trajectory.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sequence", "steps", "translation_m", "rotation_deg"])?;
        w.write_record([
            "all".to_string(),
            self.steps.to_string(),
            self.translation.to_string(),
            self.rotation_deg.to_string(),
        ])?;
        for s in &self.per_sequence {
            w.write_record([
                s.trajectory.to_string(),
                s.steps.to_string(),
                s.translation.to_string(),
                s.rotation_deg.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean relative errors of `pred` against `truth`, step by step.
pub fn evaluate_predictions(pred: &[PoseDelta], truth: &[PoseDelta]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(SvioError::Contract(format!(
            "{} predictions for {} ground-truth steps",
            pred.len(),
            truth.len()
        )));
    }
    let records: Vec<WindowRecord> = pred
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(i, (p, t))| WindowRecord {
            index: i,
            trajectory: 0,
            step: i as u32,
            prediction: *p,
            truth: *t,
            visual_rate: None,
            inertial_rate: None,
        })
        .collect();
    let r = EvalReport::from_records(&records, KvMap::new());
    Ok((r.translation, r.rotation_deg))
}

fn report_config(ckpt: &Checkpoint, ds: &Dataset, opts: &EvalOptions) -> KvMap {
    let mut kv = ckpt.config.clone();
    for (k, v) in ds.config.iter() {
        kv.set(format!("dataset.{k}"), v);
    }
    kv.set("eval.seq_len", opts.seq_len);
    kv.set("eval.seed", opts.seed);
    kv.set("eval.hard_mode", opts.hard_mode.name());
    kv.set("eval.tau", opts.tau);
    kv
}

pub fn evaluate(ckpt: &Checkpoint, ds: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    let model = ckpt.model()?;
    let records = run_model(&model, &ckpt.params, ds, opts)?;
    Ok(EvalReport::from_records(&records, report_config(ckpt, ds, opts)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateSummary {
    pub label: String,
    pub count: usize,
    pub visual_rate: f64,
    pub inertial_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub visual_rate: f64,
    pub inertial_rate: f64,
}

/// One window's row of the mask export.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRecord {
    pub window: usize,
    pub manifest: Vec<DegradationMode>,
    pub rotation_deg: f64,
    pub translation_m: f64,
    pub visual_rate: f64,
    pub inertial_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskReport {
    pub fusion: FusionMode,
    pub overall: RateSummary,
    /// `clean` (no degradation applied) then one entry per mode that fired.
    pub per_mode: Vec<RateSummary>,
    pub rotation_bins: Vec<MotionBin>,
    pub translation_bins: Vec<MotionBin>,
    pub records: Vec<MaskRecord>,
}

fn summarize<'a>(label: &str, it: impl Iterator<Item = &'a MaskRecord>) -> RateSummary {
    let (mut n, mut v, mut i) = (0usize, 0.0, 0.0);
    for r in it {
        n += 1;
        v += r.visual_rate;
        i += r.inertial_rate;
    }
    let d = n.max(1) as f64;
    RateSummary {
        label: label.to_string(),
        count: n,
        visual_rate: v / d,
        inertial_rate: i / d,
    }
}

/// Equal-count bins over `key`; every record lands in exactly one bin.
fn motion_bins(records: &[MaskRecord], bins: usize, key: impl Fn(&MaskRecord) -> f64) -> Vec<MotionBin> {
    let mut sorted: Vec<&MaskRecord> = records.iter().collect();
    sorted.sort_by(|a, b| key(a).total_cmp(&key(b)));
    let bins = bins.clamp(1, sorted.len().max(1));
    let n = sorted.len();
    (0..bins)
        .filter_map(|k| {
            let part = &sorted[k * n / bins..(k + 1) * n / bins];
            let first = part.first()?;
            let s = summarize("", part.iter().copied());
            Some(MotionBin {
                lo: key(first),
                hi: key(part.last().expect("non-empty")),
                count: s.count,
                visual_rate: s.visual_rate,
                inertial_rate: s.inertial_rate,
            })
        })
        .collect()
}

impl MaskReport {
    pub fn from_records(fusion: FusionMode, records: Vec<MaskRecord>, bins: usize) -> Self {
        let overall = summarize("all", records.iter());
        let mut per_mode = vec![summarize("clean", records.iter().filter(|r| r.manifest.is_empty()))];
        for m in DegradationMode::ALL {
            let s = summarize(m.name(), records.iter().filter(|r| r.manifest.contains(&m)));
            if s.count > 0 {
                per_mode.push(s);
            }
        }
        let rotation_bins = motion_bins(&records, bins, |r| r.rotation_deg);
        let translation_bins = motion_bins(&records, bins, |r| r.translation_m);
        Self {
            fusion,
            overall,
            per_mode,
            rotation_bins,
            translation_bins,
            records,
        }
    }

    pub fn mode(&self, label: &str) -> Option<&RateSummary> {
        self.per_mode.iter().find(|s| s.label == label)
    }

    /// Per-window rows: window, manifest, rotation and translation magnitude, rates.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "window",
            "manifest",
            "rotation_deg",
            "translation_m",
            "visual_rate",
            "inertial_rate",
        ])?;
        for r in &self.records {
            let manifest = if r.manifest.is_empty() {
                "clean".to_string()
            } else {
                r.manifest.iter().map(|m| m.name()).collect::<Vec<_>>().join("+")
            };
            w.write_record([
                r.window.to_string(),
                manifest,
                r.rotation_deg.to_string(),
                r.translation_m.to_string(),
                r.visual_rate.to_string(),
                r.inertial_rate.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aggregates: per-mode rates and both motion binnings.
    pub fn write_summary_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["group", "label", "lo", "hi", "count", "visual_rate", "inertial_rate"])?;
        for s in std::iter::once(&self.overall).chain(&self.per_mode) {
            w.write_record([
                "mode".to_string(),
                s.label.clone(),
                String::new(),
                String::new(),
                s.count.to_string(),
                s.visual_rate.to_string(),
                s.inertial_rate.to_string(),
            ])?;
        }
        for (group, bins) in [("rotation_deg", &self.rotation_bins), ("translation_m", &self.translation_bins)] {
            for (k, b) in bins.iter().enumerate() {
                w.write_record([
                    group.to_string(),
                    k.to_string(),
                    b.lo.to_string(),
                    b.hi.to_string(),
                    b.count.to_string(),
                    b.visual_rate.to_string(),
                    b.inertial_rate.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn analyze_masks(ckpt: &Checkpoint, ds: &Dataset, opts: &EvalOptions, bins: usize) -> Result<MaskReport> {
    let model = ckpt.model()?;
    let fusion = model.config.fusion;
    if !fusion.has_masks() && !opts.force_ones {
        return Err(SvioError::UnsupportedMode(format!(
            "mask analysis needs soft or hard fusion, checkpoint uses {fusion}"
        )));
    }
    if !fusion.uses_inertial() {
        return Err(SvioError::UnsupportedMode(
            "vision-only checkpoints have no inertial features".into(),
        ));
    }
    let records = run_model(&model, &ckpt.params, ds, opts)?;
    let rows = records
        .iter()
        .map(|r| {
            let w = &ds.windows[r.index];
            MaskRecord {
                window: r.index,
                manifest: w.manifest.iter().map(|d| d.mode()).collect(),
                rotation_deg: w.truth.rotation_angle().to_degrees(),
                translation_m: w.truth.translation_norm(),
                visual_rate: r.visual_rate.expect("masked mode"),
                inertial_rate: r.inertial_rate.expect("masked mode"),
            }
        })
        .collect();
    Ok(MaskReport::from_records(fusion, rows, bins))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties. NaN if either
/// side is constant or fewer than two points are given.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    if x.len() != y.len() || x.len() < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Rows: models; columns: datasets; cells: (translation m, rotation deg).
#[derive(Debug, Clone, PartialEq)]
pub struct CompareGrid {
    pub models: Vec<String>,
    pub datasets: Vec<String>,
    pub cells: Vec<Vec<(f64, f64)>>,
}

impl CompareGrid {
    /// One header row, then one row per model with `translation,rotation`
    /// cells.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["model".to_string()];
        header.extend(self.datasets.iter().cloned());
        w.write_record(&header)?;
        for (m, row) in self.models.iter().zip(&self.cells) {
            let mut rec = vec![m.clone()];
            rec.extend(row.iter().map(|(t, r)| format!("{t:.6},{r:.6}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn compare(models: &[(String, Checkpoint)], datasets: &[(String, Dataset)], opts: &EvalOptions) -> Result<CompareGrid> {
    let mut cells = Vec::with_capacity(models.len());
    for (_, ckpt) in models {
        let mut row = Vec::with_capacity(datasets.len());
        for (_, ds) in datasets {
            let r = evaluate(ckpt, ds, opts)?;
            row.push((r.translation, r.rotation_deg));
        }
        cells.push(row);
    }
    Ok(CompareGrid {
        models: models.iter().map(|m| m.0.clone()).collect(),
        datasets: datasets.iter().map(|d| d.0.clone()).collect(),
        cells,
    })
}
