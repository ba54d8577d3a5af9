//! The `ttac` command line: pipeline stages over a working directory.
//!
//! ```text
//! gen-data      → source.csv, target.csv, manifest.json
//! train-source  → model.ckpt, pretrain.json
//! anchors       → anchors.bin
//! run           → report.json, series.csv, predictions.jsonl, timing.json
//! ```
//!
//! Exit codes: 0 success, 1 other failure, 2 usage error or missing
//! prerequisite, 3 numerical failure (a state dump is written).

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bench;
use crate::config::{AnchorMode, ExperimentConfig};
use crate::datagen::{load_features, write_features, Dataset, DatasetManifest, FeatureFormat, FeatureSet};
use crate::engine::{compute_source_anchors, run_protocol, Engine, SourceAnchors};
use crate::error::Error;
use crate::nn::Model;
use crate::report::{downsample, timing_report, write_series_csv, RunReport, TableRow, SERIES_POINTS};

pub const SOURCE_FILE: &str = "source.csv";
pub const TARGET_FILE: &str = "target.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const PRETRAIN_FILE: &str = "pretrain.json";
pub const ANCHORS_FILE: &str = "anchors.bin";
pub const REPORT_FILE: &str = "report.json";
pub const SERIES_FILE: &str = "series.csv";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const TIMING_FILE: &str = "timing.json";
pub const STATE_DUMP_FILE: &str = "state_dump.json";
pub const SWEEP_INDEX_FILE: &str = "index.json";

#[derive(Parser, Debug)]
#[command(
    name = "ttac",
    version,
    about = "Streaming test-time adaptation by anchored clustering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Directory holding every pipeline artifact.
    #[arg(long, default_value = ".")]
    workdir: PathBuf,
    /// Flat TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for all randomness; overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the source set and the corrupted target stream.
    GenData(Common),
    /// Train the source model on the generated source set.
    TrainSource(Common),
    /// Compute source anchors with the trained model.
    Anchors(Common),
    /// Adapt on the target stream and write the run report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Target feature file to stream instead of the generated one.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Output directory, relative to the workdir.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Summarize one or more run reports as a table.
    Report {
        /// Report files or directories containing report.json.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Run once per value of one configuration key.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Output directory, relative to the workdir.
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Numerical { error: Error, dump: PathBuf },
    Other(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            e => CliError::Other(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Numerical { error, dump }) => {
            eprintln!("numerical failure: {error}");
            eprintln!("state dump written to {}", dump.display());
            3
        }
        Err(CliError::Other(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::GenData(c) => gen_data(&c),
        Command::TrainSource(c) => train_source(&c),
        Command::Anchors(c) => anchors(&c),
        Command::Run { common, target, out } => {
            let cfg = resolve(&common)?;
            run(&common.workdir, &cfg, target.as_deref(), &common.workdir.join(out)).map(|_| ())
        }
        Command::Report { reports } => report(&reports),
        Command::Sweep {
            common,
            param,
            values,
            out,
        } => sweep(&common, &param, &values, &common.workdir.join(out)),
    }
}

fn resolve(c: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for o in &c.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {o:?} is not key=value")))?;
        cfg = cfg.with_override(k.trim(), v.trim())?;
    }
    if let Some(seed) = c.seed {
        cfg.ttac.seed = seed;
    }
    Ok(cfg)
}

fn require(path: &Path, made_by: &str) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "missing prerequisite {} (run `ttac {made_by}` first)",
            path.display()
        )))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(Error::from)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

fn load_dataset(path: &Path, classes: usize) -> CliResult<Dataset> {
    let set = load_features(path, FeatureFormat::from_path(path))?;
    let labels = set
        .labels
        .ok_or_else(|| CliError::Usage(format!("{} has no label column", path.display())))?;
    Ok(Dataset::new(set.features, labels, classes)?)
}

fn gen_data(c: &Common) -> CliResult {
    let cfg = resolve(c)?;
    std::fs::create_dir_all(&c.workdir)?;
    let seed = cfg.ttac.seed;
    let (source, target) = bench::generate_domains(&cfg.bench, seed)?;
    write_features(
        &c.workdir.join(SOURCE_FILE),
        &FeatureSet::from(&source),
        FeatureFormat::Csv,
    )?;
    write_features(
        &c.workdir.join(TARGET_FILE),
        &FeatureSet::from(&target),
        FeatureFormat::Csv,
    )?;
    DatasetManifest {
        source_spec: bench::source_spec(&cfg.bench, seed),
        target_spec: bench::target_spec(&cfg.bench, seed),
        corruption: bench::corruption_spec(&cfg.bench, seed),
        source_file: SOURCE_FILE.into(),
        target_file: TARGET_FILE.into(),
    }
    .save(&c.workdir.join(MANIFEST_FILE))?;
    println!(
        "wrote {} source and {} target samples to {}",
        source.len(),
        target.len(),
        c.workdir.display()
    );
    Ok(())
}

fn train_source(c: &Common) -> CliResult {
    let cfg = resolve(c)?;
    let source_path = c.workdir.join(SOURCE_FILE);
    require(&source_path, "gen-data")?;
    let source = load_dataset(&source_path, cfg.bench.classes)?;
    let (model, report) = bench::train_source_model(&cfg.bench, &source, cfg.ttac.seed)?;
    model.save(&c.workdir.join(MODEL_FILE))?;
    write_json(&c.workdir.join(PRETRAIN_FILE), &report)?;
    println!("source holdout accuracy {:.4}", report.holdout_accuracy);
    Ok(())
}

fn anchors(c: &Common) -> CliResult {
    let cfg = resolve(c)?;
    let source_path = c.workdir.join(SOURCE_FILE);
    let model_path = c.workdir.join(MODEL_FILE);
    require(&source_path, "gen-data")?;
    require(&model_path, "train-source")?;
    let source = load_dataset(&source_path, cfg.bench.classes)?;
    let model = Model::load(&model_path)?;
    let anchors = compute_source_anchors(&model, &source)?;
    anchors.save(&c.workdir.join(ANCHORS_FILE))?;
    println!("wrote anchors for {} classes", anchors.num_classes());
    Ok(())
}

fn run(workdir: &Path, cfg: &ExperimentConfig, target: Option<&Path>, out: &Path) -> CliResult<RunReport> {
    let model_path = workdir.join(MODEL_FILE);
    require(&model_path, "train-source")?;
    let anchors_path = workdir.join(ANCHORS_FILE);
    let anchors = match cfg.ttac.anchor_mode {
        AnchorMode::SourceStats => {
            require(&anchors_path, "anchors")?;
            Some(SourceAnchors::load(&anchors_path)?)
        }
        AnchorMode::ClassifierPrototypes => None,
    };
    let target_path = target.map_or_else(|| workdir.join(TARGET_FILE), Path::to_path_buf);
    require(&target_path, "gen-data")?;
    let stream = load_features(&target_path, FeatureFormat::from_path(&target_path))?;
    let labels = stream
        .labels
        .ok_or_else(|| CliError::Usage(format!("{} has no label column", target_path.display())))?;

    std::fs::create_dir_all(out)?;
    let model = Model::load(&model_path)?;
    let mut engine = Engine::new(model, anchors, cfg.ttac.clone())?;
    let outcome = match run_protocol(&mut engine, &stream.features, Some(&labels)) {
        Ok(o) => o,
        Err(e) if e.is_numerical() => {
            let dump = out.join(STATE_DUMP_FILE);
            write_json(&dump, &engine.state_dump())?;
            return Err(CliError::Numerical { error: e, dump });
        }
        Err(e) => return Err(e.into()),
    };

    let report = RunReport::new(cfg.ttac.seed, cfg.resolved(), &outcome.log, &outcome.steps)?;
    report.save(&out.join(REPORT_FILE))?;
    let series = crate::report::cumulative_error(&outcome.log)?;
    write_series_csv(&out.join(SERIES_FILE), &downsample(&series, SERIES_POINTS))?;
    outcome
        .log
        .write_jsonl(BufWriter::new(File::create(out.join(PREDICTIONS_FILE))?))?;
    write_json(
        &out.join(TIMING_FILE),
        &timing_report(outcome.wall_seconds, outcome.stream_len)?,
    )?;
    println!(
        "final error {:.2}% over {} samples",
        report.final_error, report.stream_len
    );
    Ok(report)
}

fn report_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(REPORT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn report(paths: &[PathBuf]) -> CliResult {
    println!("{:<48} {:>8} {:>10}", "report", "samples", "error %");
    for p in paths {
        let path = report_path(p);
        require(&path, "run")?;
        let r = RunReport::load(&path)?;
        println!("{:<48} {:>8} {:>10.2}", p.display(), r.stream_len, r.final_error);
        for row in &r.rows {
            println!("  {:<46} {:>8} {:>10.2}", row.label, "", row.final_error);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepEntry {
    value: String,
    report: String,
    final_error: f64,
}

#[derive(Serialize)]
struct SweepIndex {
    param: String,
    entries: Vec<SweepEntry>,
}

fn sweep(c: &Common, param: &str, values: &[String], out: &Path) -> CliResult {
    let base = resolve(c)?;
    let mut entries = Vec::with_capacity(values.len());
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let cfg = base.with_override(param, v)?;
        let dir = out.join(format!("{param}={v}"));
        let r = run(&c.workdir, &cfg, None, &dir)?;
        entries.push(SweepEntry {
            value: v.clone(),
            report: format!("{param}={v}/{REPORT_FILE}"),
            final_error: r.final_error,
        });
        rows.push(TableRow {
            label: format!("{param}={v}"),
            final_error: r.final_error,
        });
    }
    write_json(
        &out.join(SWEEP_INDEX_FILE),
        &SweepIndex {
            param: param.to_string(),
            entries,
        },
    )?;
    for row in rows {
        println!("{:<32} {:>8.2}", row.label, row.final_error);
    }
    Ok(())
}
