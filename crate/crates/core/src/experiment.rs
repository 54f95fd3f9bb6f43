//! End-to-end drivers: input preparation and caching, leave-one-subject-out
//! runs, composite-database runs, parameter sweeps and structure
//! comparisons.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::candidates::build_candidates;
use crate::config::{Config, LabelSpace};
use crate::error::{Error, Result};
use crate::flow::{
    flow_cache_read, flow_cache_write, fuse_candidate_flows, read_import, render_flow, FlowEstimator, PyramidLk,
};
use crate::image::Image;
use crate::ingest::{load_sample, Manifest};
use crate::metrics::{aggregate_loso, FoldRecord, MetricsReport};
use crate::par::Exec;
use crate::protocol::make_loso_splits;
use crate::rng::make_rng;
use crate::sample::MESample;
use crate::train::{predict, train, EpochStats, TrainOptions, TrainSample};

/// Reduced-size clip representation fed to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Structure {
    /// The occurring frame itself.
    OneO,
    /// Flow from onset to occurring frame.
    TwoO,
    /// Fused onset/occurring/offset flow.
    ThreeO,
    /// The apex frame itself.
    Apex,
    OnsetApex,
    OnsetApexOffset,
}

impl Structure {
    pub const ALL: [Structure; 6] = [
        Structure::OneO,
        Structure::TwoO,
        Structure::ThreeO,
        Structure::Apex,
        Structure::OnsetApex,
        Structure::OnsetApexOffset,
    ];

    pub fn needs_apex(self) -> bool {
        matches!(self, Structure::Apex | Structure::OnsetApex | Structure::OnsetApexOffset)
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Structure::OneO => "1o",
            Structure::TwoO => "2o",
            Structure::ThreeO => "3o",
            Structure::Apex => "apex",
            Structure::OnsetApex => "onset-apex",
            Structure::OnsetApexOffset => "onset-apex-offset",
        })
    }
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Structure::ALL
            .iter()
            .copied()
            .find(|m| m.to_string() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown structure `{s}`")))
    }
}

/// Where flow fields come from.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowSource {
    Reference(PyramidLk),
    /// Precomputed fields in the import container under this directory.
    Import(PathBuf),
}

impl Default for FlowSource {
    fn default() -> Self {
        FlowSource::Reference(PyramidLk::default())
    }
}

#[derive(Debug, Clone)]
pub struct PrepareOptions {
    pub structure: Structure,
    /// Candidates per clip; 1 draws a single occurring frame from the span.
    pub candidates: usize,
    /// Seed of the occurring-frame draws.
    pub occ_seed: u64,
    pub flow_scale: f64,
    pub source: FlowSource,
    pub exec: Exec,
}

impl PrepareOptions {
    pub fn from_config(config: &Config) -> Self {
        PrepareOptions {
            structure: Structure::ThreeO,
            candidates: config.k,
            occ_seed: config.seed,
            flow_scale: config.flow_scale,
            source: FlowSource::default(),
            exec: Exec::default(),
        }
    }
}

/// Network inputs of one clip plus its identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub sample_id: String,
    pub subject_id: String,
    pub dataset_id: String,
    pub label: usize,
    pub occurring: Vec<usize>,
    pub inputs: Vec<Image>,
}

impl Prepared {
    pub fn to_train(&self) -> TrainSample {
        TrainSample { sample_id: self.sample_id.clone(), inputs: self.inputs.clone(), label: self.label }
    }
}

/// Occurring-frame indices of one clip; each clip draws from its own stream
/// so the result does not depend on processing order.
pub fn occurring_indices(sample: &MESample, candidates: usize, occ_seed: u64) -> Result<Vec<usize>> {
    let mut rng = make_rng(occ_seed, &format!("occ/{}", sample.sample_id));
    Ok(build_candidates(sample, candidates, &mut rng)?.iter().map(|c| c.occurring_idx).collect())
}

fn frame_input(img: &Image) -> Result<Image> {
    img.to_gray().to_rgb()
}

fn prepare_one(sample: &MESample, opts: &PrepareOptions) -> Result<Prepared> {
    sample.validate()?;
    let s = opts.structure;
    let scale = opts.flow_scale;
    let (occurring, inputs) = if s.needs_apex() {
        let apex = sample.apex_idx.ok_or_else(|| {
            Error::Invalid(format!("structure {s} needs apex annotations; sample {} has none", sample.sample_id))
        })?;
        let est = reference(opts)?;
        let onset = &sample.frames[sample.onset_idx];
        let apex_f = &sample.frames[apex];
        let img = match s {
            Structure::Apex => frame_input(apex_f)?,
            Structure::OnsetApex => render_flow(&est.estimate(onset, apex_f)?, scale),
            _ => {
                let a = est.estimate(onset, apex_f)?;
                let b = est.estimate(apex_f, &sample.frames[sample.offset_idx])?;
                fuse_candidate_flows(&a, &b, scale)?
            }
        };
        (vec![apex], vec![img])
    } else {
        sample.check_span(opts.candidates)?;
        let occ = occurring_indices(sample, opts.candidates, opts.occ_seed)?;
        let onset = &sample.frames[sample.onset_idx];
        let offset = &sample.frames[sample.offset_idx];
        let mut inputs = Vec::with_capacity(occ.len());
        let mut occurring = Vec::with_capacity(occ.len());
        for (j0, &t) in occ.iter().enumerate() {
            let frame = &sample.frames[t];
            let (img, t) = match (s, &opts.source) {
                (Structure::OneO, _) => (frame_input(frame)?, t),
                (_, FlowSource::Import(dir)) => {
                    let (a, b, t_file) = read_import(dir, &sample.sample_id, j0 + 1)?.ok_or_else(|| {
                        Error::Invalid(format!("missing imported flow for ({}, {})", sample.sample_id, j0 + 1))
                    })?;
                    let img = if s == Structure::TwoO {
                        render_flow(&a, scale)
                    } else {
                        fuse_candidate_flows(&a, &b, scale)?
                    };
                    (img, t_file)
                }
                (Structure::TwoO, FlowSource::Reference(est)) => (render_flow(&est.estimate(onset, frame)?, scale), t),
                (_, FlowSource::Reference(est)) => {
                    let a = est.estimate(onset, frame)?;
                    let b = est.estimate(frame, offset)?;
                    (fuse_candidate_flows(&a, &b, scale)?, t)
                }
            };
            inputs.push(img);
            occurring.push(t);
        }
        (occurring, inputs)
    };
    Ok(Prepared {
        sample_id: sample.sample_id.clone(),
        subject_id: sample.subject_id.clone(),
        dataset_id: sample.dataset_id.clone(),
        label: sample.label,
        occurring,
        inputs,
    })
}

fn reference(opts: &PrepareOptions) -> Result<&PyramidLk> {
    match &opts.source {
        FlowSource::Reference(e) => Ok(e),
        FlowSource::Import(_) => Err(Error::Invalid("apex structures need the reference flow estimator".into())),
    }
}

/// Builds network inputs for every sample.
pub fn prepare(samples: &[MESample], opts: &PrepareOptions) -> Result<Vec<Prepared>> {
    if let FlowSource::Import(dir) = &opts.source {
        if !opts.structure.needs_apex() && opts.structure != Structure::OneO {
            let missing: Vec<String> = samples
                .iter()
                .flat_map(|s| (1..=opts.candidates).map(move |j| (s, j)))
                .filter(|(s, j)| !crate::flow::import_entry_path(dir, &s.sample_id, *j).is_file())
                .map(|(s, j)| format!("({}, {j})", s.sample_id))
                .collect();
            if !missing.is_empty() {
                return Err(Error::Invalid(format!("missing imported flow records: {}", missing.join(", "))));
            }
        }
    }
    opts.exec.map(samples, |s| prepare_one(s, opts)).into_iter().collect()
}

/// Loads every manifest row in parallel.
pub fn load_samples(manifest: &Manifest, image_size: usize, exec: Exec) -> Result<Vec<MESample>> {
    exec.map(&manifest.rows, |r| load_sample(r, &manifest.labels, image_size)).into_iter().collect()
}

/// Provenance stored next to a flow cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheInfo {
    pub structure: Structure,
    pub candidates: usize,
    pub occ_seed: u64,
    pub flow_scale: f64,
}

pub const CACHE_INFO: &str = "cache.json";

/// Writes one record per candidate plus [`CACHE_INFO`]; returns the record
/// count.
pub fn write_cache(dir: &Path, prepared: &[Prepared], opts: &PrepareOptions) -> Result<usize> {
    fs::create_dir_all(dir)?;
    let mut n = 0;
    for p in prepared {
        for (j0, (img, &t)) in p.inputs.iter().zip(&p.occurring).enumerate() {
            flow_cache_write(dir, &p.sample_id, j0 + 1, img, t)?;
            n += 1;
        }
    }
    let info = CacheInfo {
        structure: opts.structure,
        candidates: prepared.first().map(|p| p.inputs.len()).unwrap_or(opts.candidates),
        occ_seed: opts.occ_seed,
        flow_scale: opts.flow_scale,
    };
    fs::write(dir.join(CACHE_INFO), serde_json::to_string_pretty(&info)?)?;
    Ok(n)
}

pub fn read_cache_info(dir: &Path) -> Result<CacheInfo> {
    let path = dir.join(CACHE_INFO);
    let text = fs::read_to_string(&path).map_err(|e| Error::cache(&path, format!("cache miss: {e}")))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads cached inputs for the manifest rows. Every absent record is listed
/// in the error.
pub fn read_cache(dir: &Path, manifest: &Manifest) -> Result<Vec<Prepared>> {
    let info = read_cache_info(dir)?;
    let mut out = Vec::with_capacity(manifest.rows.len());
    let mut missing = Vec::new();
    for r in &manifest.rows {
        let mut inputs = Vec::with_capacity(info.candidates);
        let mut occurring = Vec::with_capacity(info.candidates);
        for j in 1..=info.candidates {
            match flow_cache_read(dir, &r.sample_id, j) {
                Ok((img, t)) => {
                    inputs.push(img);
                    occurring.push(t);
                }
                Err(Error::Cache { msg, .. }) if msg.starts_with("cache miss") => {
                    missing.push(format!("({}, {j})", r.sample_id))
                }
                Err(e) => return Err(e),
            }
        }
        out.push(Prepared {
            sample_id: r.sample_id.clone(),
            subject_id: r.subject_id.clone(),
            dataset_id: r.dataset_id.clone(),
            label: manifest.label_index(r),
            occurring,
            inputs,
        });
    }
    if !missing.is_empty() {
        return Err(Error::cache(dir, format!("cache miss for {}", missing.join(", "))));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct LosoOptions {
    pub train: TrainOptions,
    /// Folds run through this executor; training inside a fold uses
    /// `train.exec`.
    pub fold_exec: Exec,
    /// Fold records, checkpoints and reports are written here.
    pub out: Option<PathBuf>,
    /// Reuse fold records already present under `out`.
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct LosoOutcome {
    pub records: Vec<FoldRecord>,
    pub report: MetricsReport,
    pub fold_epochs: Vec<Vec<EpochStats>>,
}

/// Wall-clock aside, a replay of `config` reproduces the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: String,
    pub epochs: Vec<Vec<EpochStats>>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub wall_clock_secs: f64,
}

/// Training seed of one fold.
pub fn fold_seed(seed: u64, fold_id: &str) -> u64 {
    make_rng(seed, &format!("fold/{fold_id}")).next_u64()
}

fn fold_file(fold_id: &str) -> String {
    fold_id.replace(['/', '\\'], "__")
}

/// Leave-one-subject-out: one model per subject, trained on all other
/// subjects and tested on that subject. Predictions are pooled.
pub fn run_loso(data: &[Prepared], labels: &LabelSpace, config: &Config, opts: &LosoOptions) -> Result<LosoOutcome> {
    config.validate()?;
    let start = Instant::now();
    let subjects: Vec<&str> = data.iter().map(|p| p.subject_id.as_str()).collect();
    let plan = make_loso_splits(&subjects)?;
    plan.validate(&subjects)?;
    let folds_dir = opts.out.as_ref().map(|o| o.join("folds"));
    if let Some(d) = &folds_dir {
        fs::create_dir_all(d)?;
    }
    let results = opts.fold_exec.map(&plan.folds, |fold| -> Result<(FoldRecord, Vec<EpochStats>, Option<PathBuf>)> {
        let stem = fold_file(&fold.fold_id);
        if let (Some(d), true) = (&folds_dir, opts.resume) {
            let p = d.join(format!("{stem}.json"));
            if p.is_file() {
                let rec: FoldRecord = serde_json::from_str(&fs::read_to_string(&p)?)?;
                log::info!("fold {}: resumed from {}", fold.fold_id, p.display());
                return Ok((rec, Vec::new(), None));
            }
        }
        let train_set: Vec<TrainSample> = fold.train.iter().map(|&i| data[i].to_train()).collect();
        if fold.train.iter().any(|&i| data[i].subject_id == fold.test_subject) {
            return Err(Error::Training(format!("fold {} would train on its test subject", fold.fold_id)));
        }
        let cfg = Config { seed: fold_seed(config.seed, &fold.fold_id), ..config.clone() };
        let mut topts = opts.train.clone();
        if let (Some(d), Some(_)) = (&folds_dir, &topts.log) {
            topts.log = Some(d.join(format!("{stem}.train.jsonl")));
        }
        let outcome = train(&cfg, labels, &train_set, &topts)?;
        let mut rec = FoldRecord {
            fold_id: fold.fold_id.clone(),
            test_subject: fold.test_subject.clone(),
            sample_ids: Vec::new(),
            predicted: Vec::new(),
            truth: Vec::new(),
        };
        for &i in &fold.test {
            let (pred, _) = predict(&outcome.model, &data[i].inputs)?;
            rec.sample_ids.push(data[i].sample_id.clone());
            rec.predicted.push(pred);
            rec.truth.push(data[i].label);
        }
        log::info!("fold {}: {}/{} correct", fold.fold_id, rec.correct(), rec.truth.len());
        let mut ckpt = None;
        if let Some(d) = &folds_dir {
            fs::write(d.join(format!("{stem}.json")), serde_json::to_string_pretty(&rec)?)?;
            let p = d.join(format!("{stem}.ckpt"));
            outcome.model.save(&p)?;
            ckpt = Some(p);
        }
        Ok((rec, outcome.epochs, ckpt))
    });
    let mut records = Vec::new();
    let mut fold_epochs = Vec::new();
    let mut checkpoints = Vec::new();
    for r in results {
        let (rec, ep, ck) = r?;
        records.push(rec);
        fold_epochs.push(ep);
        checkpoints.extend(ck);
    }
    let report = aggregate_loso(&records, labels)?;
    if let Some(out) = &opts.out {
        let metrics = out.join("metrics.json");
        fs::write(&metrics, report.to_json())?;
        fs::write(out.join("report.txt"), report.table())?;
        let run = RunRecord {
            config: config.to_text(),
            epochs: fold_epochs.clone(),
            checkpoints,
            metrics: Some(metrics),
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        fs::write(out.join("run.json"), serde_json::to_string_pretty(&run)?)?;
    }
    Ok(LosoOutcome { records, report, fold_epochs })
}

/// Sweepable quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    K,
    Delta,
    Gamma,
    Lambda,
    /// Occurring-frame re-draws; the value is the draw number.
    Resample,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "k" => Ok(SweepParam::K),
            "delta" => Ok(SweepParam::Delta),
            "gamma" => Ok(SweepParam::Gamma),
            "lambda" => Ok(SweepParam::Lambda),
            "resample" => Ok(SweepParam::Resample),
            _ => Err(Error::Config(format!("unknown sweep parameter `{s}`"))),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::K => "k",
            SweepParam::Delta => "delta",
            SweepParam::Gamma => "gamma",
            SweepParam::Lambda => "lambda",
            SweepParam::Resample => "resample",
        })
    }
}

/// Parses `a..b:step` (inclusive) or a comma-separated list.
pub fn parse_values(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("cannot parse values `{spec}`"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    if let Some((range, step)) = spec.split_once(':') {
        let (a, b) = range.split_once("..").ok_or_else(bad)?;
        let (a, b, step) = (num(a)?, num(b)?, num(step)?);
        if step.is_nan() || step <= 0.0 || b < a {
            return Err(bad());
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        // Round to the step's decimal precision so 0.4 + 3 * 0.1 prints as 0.7.
        return Ok((0..=n).map(|i| ((a + i as f64 * step) * 1e9).round() / 1e9).collect());
    }
    let v: Vec<f64> = spec.split(',').map(num).collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(bad());
    }
    Ok(v)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: SweepParam,
    pub value: f64,
    pub report: MetricsReport,
}

/// Runs one LOSO evaluation per value. Each point writes its artifacts to
/// `<out>/<param>_<value>/` when an output directory is set.
pub fn sweep(
    samples: &[MESample],
    labels: &LabelSpace,
    config: &Config,
    param: SweepParam,
    values: &[f64],
    prep: &PrepareOptions,
    loso: &LosoOptions,
) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = config.clone();
        let mut p = prep.clone();
        match param {
            SweepParam::K => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("k must be a positive integer, got {value}")));
                }
                cfg.k = value as usize;
                p.candidates = cfg.k;
            }
            SweepParam::Delta => cfg.delta = value,
            SweepParam::Gamma => cfg.gamma = value,
            SweepParam::Lambda => cfg.lambda = value,
            SweepParam::Resample => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("resample index must be a nonnegative integer, got {value}")));
                }
                p.occ_seed = prep.occ_seed.wrapping_add(value as u64);
            }
        }
        cfg.validate()?;
        let data = prepare(samples, &p)?;
        let mut lo = loso.clone();
        lo.out = loso.out.as_ref().map(|o| o.join(format!("{param}_{value}")));
        if let Some(o) = &lo.out {
            fs::create_dir_all(o)?;
        }
        let outcome = run_loso(&data, labels, &cfg, &lo)?;
        log::info!("{param}={value}: accuracy {:.2} uf1 {:.4}", outcome.report.accuracy, outcome.report.uf1);
        points.push(SweepPoint { param, value, report: outcome.report });
    }
    Ok(points)
}

/// Plain-text table of sweep results.
pub fn sweep_table(points: &[SweepPoint]) -> String {
    let mut s = String::from("param     value      accuracy   uf1      uar\n");
    for p in points {
        s.push_str(&format!(
            "{:<9} {:<10} {:>7.2}   {:.4}   {:.4}\n",
            p.param.to_string(),
            p.value,
            p.report.accuracy,
            p.report.uf1,
            p.report.uar
        ));
    }
    s
}
