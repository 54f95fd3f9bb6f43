use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ltr3o::experiment::{
    load_samples, prepare, read_cache, read_cache_info, run_loso, sweep, sweep_table, write_cache, FlowSource,
    LosoOptions, PrepareOptions, Prepared, RunRecord, Structure, SweepParam,
};
use ltr3o::ingest::{generate_synthetic, load_manifest, write_synthetic, Manifest, SynthSpec};
use ltr3o::metrics::MetricsReport;
use ltr3o::par::{set_threads, Exec};
use ltr3o::protocol::{make_cde, CdeMapping};
use ltr3o::train::{gap_stats, train, TrainOptions};
use ltr3o::{Config, Error};

#[derive(Parser, Debug)]
#[command(name = "ltr3o", version, about = "3O candidate ranking for micro-expression recognition")]
struct Cli {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 runs sequentially, 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Extra config overrides, `key=value`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic clip dataset with a manifest.
    Synth(SynthArgs),
    /// Build the candidate flow cache for a manifest.
    Prepare(PrepareArgs),
    /// Train one model on a cache.
    Train(TrainArgs),
    /// Leave-one-subject-out evaluation.
    Loso(LosoArgs),
    /// Composite-database evaluation.
    Cde(CdeArgs),
    /// LOSO over a grid of one parameter.
    Sweep(SweepArgs),
    /// Compare reduced-size input structures.
    Structures(StructuresArgs),
    /// Print metrics documents as tables.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    subjects: usize,
    #[arg(long, default_value_t = 9)]
    clips: usize,
    #[arg(long, default_value_t = 24)]
    frames_per_clip: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 1.5)]
    amplitude: f64,
    #[arg(long, default_value_t = 0.005)]
    noise: f64,
    /// Candidate count the clips must support; defaults to the config's k.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum FlowKind {
    Reference,
    Import,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum, default_value_t = FlowKind::Reference)]
    flow: FlowKind,
    /// Directory holding imported flow records.
    #[arg(long)]
    import_dir: Option<PathBuf>,
    #[arg(long, default_value = "3o")]
    structure: Structure,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    /// File listing training sample ids, one per line; all rows by default.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args, Debug)]
struct LosoArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Precomputed cache; inputs are built in memory otherwise.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Reuse finished fold records under --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct CdeArgs {
    #[arg(long, num_args = 1.., required = true)]
    manifests: Vec<PathBuf>,
    /// Mapping file (`dataset.class=Target|DROP`); the standard composite
    /// mapping when absent.
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Print the merged subjects and folds without loading images.
    #[arg(long)]
    plan_only: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    param: SweepParam,
    /// `a..b:step` or a comma-separated list.
    #[arg(long, required_unless_present = "times")]
    values: Option<String>,
    /// Number of occurring-frame re-draws for `--param resample`.
    #[arg(long)]
    times: Option<usize>,
}

#[derive(Args, Debug)]
struct StructuresArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long = "mode", num_args = 1.., default_values = ["1o", "2o", "3o"])]
    modes: Vec<Structure>,
    /// Candidates for the 1o and 2o modes.
    #[arg(long, default_value_t = 1)]
    baseline_k: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// metrics.json files or run directories.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_validation));
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(cli: &Cli) -> anyhow::Result<PathBuf> {
    let out = cli.out.clone().ok_or_else(|| Error::Config("--out is required".into()))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn exec(cli: &Cli) -> Exec {
    if cli.jobs == 1 {
        return Exec::Sequential;
    }
    if cli.jobs > 1 {
        set_threads(cli.jobs);
    }
    Exec::default()
}

fn loso_options(exec: Exec, out: Option<PathBuf>, resume: bool) -> LosoOptions {
    LosoOptions {
        train: TrainOptions { exec, no_augment: false, log: out.as_ref().map(|o| o.join("train.jsonl")) },
        fold_exec: Exec::Sequential,
        out,
        resume,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = load_config(&cli)?;
    let ex = exec(&cli);
    match &cli.cmd {
        Command::Synth(a) => {
            let spec = SynthSpec {
                n_subjects: a.subjects,
                clips_per_subject: a.clips,
                frames_per_clip: a.frames_per_clip,
                image_size: a.image_size,
                n_classes: a.classes,
                motion_amplitude_px: a.amplitude,
                noise_sigma: a.noise,
            };
            spec.validate(a.k.unwrap_or(config.k))?;
            let out = out_dir(&cli)?;
            let ds = generate_synthetic(&spec, config.seed)?;
            let manifest = write_synthetic(&ds, &out)?;
            println!("{} samples, {} subjects -> {}", ds.samples.len(), spec.n_subjects, manifest.display());
        }
        Command::Prepare(a) => {
            let out = out_dir(&cli)?;
            let manifest = load_manifest(&a.manifest, None)?;
            let samples = load_samples(&manifest, config.image_size, ex)?;
            let source = match a.flow {
                FlowKind::Reference => FlowSource::default(),
                FlowKind::Import => FlowSource::Import(
                    a.import_dir.clone().ok_or_else(|| Error::Config("--flow import needs --import-dir".into()))?,
                ),
            };
            let opts = PrepareOptions {
                structure: a.structure,
                candidates: a.k.unwrap_or(config.k),
                source,
                exec: ex,
                ..PrepareOptions::from_config(&config)
            };
            let prepared = prepare(&samples, &opts)?;
            let n = write_cache(&out, &prepared, &opts)?;
            println!("{} samples, {n} cache records -> {}", prepared.len(), out.display());
        }
        Command::Train(a) => {
            let out = out_dir(&cli)?;
            let start = Instant::now();
            let manifest = load_manifest(&a.manifest, None)?;
            let data = cached_inputs(&a.cache, &manifest, &config)?;
            let data: Vec<_> = match &a.split {
                Some(p) => {
                    let ids: BTreeSet<String> = fs::read_to_string(p)
                        .with_context(|| format!("reading {}", p.display()))?
                        .lines()
                        .map(str::trim)
                        .filter(|l| !l.is_empty() && !l.starts_with('#'))
                        .map(String::from)
                        .collect();
                    let known: BTreeSet<&str> = data.iter().map(|d| d.sample_id.as_str()).collect();
                    let unknown: Vec<&String> = ids.iter().filter(|i| !known.contains(i.as_str())).collect();
                    if !unknown.is_empty() {
                        return Err(Error::Invalid(format!("split lists unknown samples: {unknown:?}")).into());
                    }
                    data.into_iter().filter(|d| ids.contains(&d.sample_id)).collect()
                }
                None => data,
            };
            let data: Vec<_> = data.iter().map(Prepared::to_train).collect();
            let opts = TrainOptions { exec: ex, no_augment: a.no_augment, log: Some(out.join("train.jsonl")) };
            let outcome = train(&config, &manifest.labels, &data, &opts)?;
            let ckpt = out.join("model.ckpt");
            outcome.model.save(&ckpt)?;
            let gap = gap_stats(&outcome.model, &data, &config, ex)?;
            let run = RunRecord {
                config: config.to_text(),
                epochs: vec![outcome.epochs],
                checkpoints: vec![ckpt.clone()],
                metrics: None,
                wall_clock_secs: start.elapsed().as_secs_f64(),
            };
            fs::write(out.join("run.json"), serde_json::to_string_pretty(&run)?)?;
            fs::write(out.join("config.txt"), config.to_text())?;
            println!(
                "trained on {} samples: train accuracy {:.2}, mean gap {:.4}, at margin {:.2} -> {}",
                data.len(),
                gap.accuracy,
                gap.mean_gap,
                gap.frac_at_margin,
                ckpt.display()
            );
        }
        Command::Loso(a) => {
            let out = out_dir(&cli)?;
            let manifest = load_manifest(&a.manifest, None)?;
            let data = match &a.cache {
                Some(c) => cached_inputs(c, &manifest, &config)?,
                None => {
                    let samples = load_samples(&manifest, config.image_size, ex)?;
                    prepare(&samples, &PrepareOptions { exec: ex, ..PrepareOptions::from_config(&config) })?
                }
            };
            fs::write(out.join("config.txt"), config.to_text())?;
            let outcome = run_loso(&data, &manifest.labels, &config, &loso_options(ex, Some(out.clone()), a.resume))?;
            print!("{}", outcome.report.table());
            println!("{} folds -> {}", outcome.records.len(), out.join("metrics.json").display());
        }
        Command::Cde(a) => {
            let manifests = a.manifests.iter().map(|p| load_manifest(p, None)).collect::<ltr3o::Result<Vec<_>>>()?;
            let mapping = match &a.mapping {
                Some(p) => CdeMapping::load(p)?,
                None => CdeMapping::megc(),
            };
            let composite = make_cde(&manifests, &mapping)?;
            let m = &composite.manifest;
            println!(
                "composite: {} samples, {} subjects, {} folds",
                m.rows.len(),
                m.subjects().len(),
                composite.plan.len()
            );
            if a.plan_only {
                for c in m.labels.names() {
                    println!("  {c}: {}", m.rows.iter().filter(|r| &r.label == c).count());
                }
                return Ok(());
            }
            let out = out_dir(&cli)?;
            fs::write(out.join("mapping.txt"), mapping.to_text())?;
            fs::write(out.join("config.txt"), config.to_text())?;
            let samples = load_samples(m, config.image_size, ex)?;
            let data = prepare(&samples, &PrepareOptions { exec: ex, ..PrepareOptions::from_config(&config) })?;
            let outcome = run_loso(&data, &m.labels, &config, &loso_options(ex, Some(out.clone()), false))?;
            print!("{}", outcome.report.table());
        }
        Command::Sweep(a) => {
            let values = match (a.param, &a.values, a.times) {
                (_, Some(v), _) => ltr3o::experiment::parse_values(v)?,
                (SweepParam::Resample, None, Some(n)) if n > 0 => (0..n).map(|i| i as f64).collect(),
                _ => {
                    return Err(
                        Error::Config("--times applies to --param resample only and must be positive".into()).into()
                    )
                }
            };
            let out = out_dir(&cli)?;
            let manifest = load_manifest(&a.manifest, None)?;
            let samples = load_samples(&manifest, config.image_size, ex)?;
            let prep = PrepareOptions { exec: ex, ..PrepareOptions::from_config(&config) };
            let points = sweep(
                &samples,
                &manifest.labels,
                &config,
                a.param,
                &values,
                &prep,
                &loso_options(ex, Some(out.clone()), false),
            )?;
            let table = sweep_table(&points);
            fs::write(out.join("sweep.txt"), &table)?;
            fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&points)?)?;
            print!("{table}");
        }
        Command::Structures(a) => {
            let out = out_dir(&cli)?;
            let manifest = load_manifest(&a.manifest, None)?;
            if a.modes.iter().any(|m| m.needs_apex()) {
                if let Some(r) = manifest.rows.iter().find(|r| r.apex.is_none()) {
                    return Err(Error::Invalid(format!(
                        "apex modes need apex annotations; sample {} has none",
                        r.sample_id
                    ))
                    .into());
                }
            }
            let samples = load_samples(&manifest, config.image_size, ex)?;
            let mut table = String::from("mode                candidates  accuracy   uf1      uar\n");
            let mut reports = Vec::new();
            for &mode in &a.modes {
                let candidates = match mode {
                    Structure::ThreeO => config.k,
                    Structure::OneO | Structure::TwoO => a.baseline_k,
                    _ => 1,
                };
                let prep =
                    PrepareOptions { structure: mode, candidates, exec: ex, ..PrepareOptions::from_config(&config) };
                let data = prepare(&samples, &prep)?;
                let dir = out.join(mode.to_string());
                fs::create_dir_all(&dir)?;
                let outcome = run_loso(&data, &manifest.labels, &config, &loso_options(ex, Some(dir), false))?;
                let r = &outcome.report;
                table.push_str(&format!(
                    "{:<19} {:<11} {:>7.2}   {:.4}   {:.4}\n",
                    mode.to_string(),
                    candidates,
                    r.accuracy,
                    r.uf1,
                    r.uar
                ));
                reports.push((mode.to_string(), outcome.report));
            }
            fs::write(out.join("structures.txt"), &table)?;
            fs::write(out.join("structures.json"), serde_json::to_string_pretty(&reports)?)?;
            print!("{table}");
        }
        Command::Report(a) => {
            for p in &a.inputs {
                let path = if p.is_dir() { p.join("metrics.json") } else { p.clone() };
                let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                let report: MetricsReport = serde_json::from_str(&text).map_err(Error::from)?;
                println!("== {}", path.display());
                print!("{}", report.table());
            }
        }
    }
    Ok(())
}

/// Cache records for every manifest row, checked against the config.
fn cached_inputs(dir: &Path, manifest: &Manifest, config: &Config) -> anyhow::Result<Vec<Prepared>> {
    let info = read_cache_info(dir)?;
    if info.structure == Structure::ThreeO && info.candidates != config.k {
        bail!(Error::Config(format!("cache holds {} candidates but k = {}", info.candidates, config.k)));
    }
    Ok(read_cache(dir, manifest)?)
}
