//! The `featvat` command-line front end.
//!
//! ```text
//! featvat gen-data [--config PATH] [--seed N] [--set KEY=VALUE]... --out DIR [--text]
//! featvat train    [--config PATH] [--seed N] [--set KEY=VALUE]... [--data DIR] [--out DIR] [--source-only]
//! featvat eval     --checkpoint PATH --data PATH [--ema]
//! featvat inspect  PATH
//! ```
//!
//! Exit codes: 0 ok, 2 configuration or contract error, 3 I/O or format
//! error, 4 numerical abort (non-finite loss or gradient).
//!
//! A run configuration is one TOML document with the tables `synthetic`,
//! `train` (with nested `train.adam`, `train.network`, `train.loss`,
//! `train.vat`) and `paths`, plus the top-level `data_seed`. Unknown keys are
//! rejected. `--set` takes a dotted path (`train.vat.lambda_vat=0`) or a leaf
//! key that is unique in the tree (`lambda_vat=0`); values are parsed as TOML
//! and fall back to plain strings.
//!
//! Data directories hold `source_train.fvat`, `source_test.fvat`,
//! `target_train.fvat` and `target_test.fvat`. `train` writes
//! `metrics.jsonl` (see [`crate::trainer`] for the record layout; the header
//! record echoes the resolved configuration) and `checkpoint.fvck` to its
//! output directory. A checkpoint stores the student tensors under
//! `student/`, the shadow tensors under `ema/`, and the rank-0 tensors
//! `config.frames` and `config.zscore`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::featio::{gen_synthetic, load_features, save_features, save_features_text, Dataset, Domain, SyntheticConfig};
use crate::network::{decode_fvck, load_checkpoint, save_checkpoint, Network};
use crate::trainer::{self, Evaluation, MetricRecord, TrainConfig, TrainObserver, TrainState};

pub const SPLIT_FILES: [&str; 4] = ["source_train", "source_test", "target_train", "target_test"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory with the four standard split files.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_test: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_test: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Metrics file; defaults to `metrics.jsonl` in the output directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of the synthetic benchmark.
    pub data_seed: u64,
    pub synthetic: SyntheticConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Applies one `KEY=VALUE` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut tree = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let path: Vec<String> = if key.contains('.') {
            key.split('.').map(str::to_string).collect()
        } else {
            let mut found = Vec::new();
            find_leaf(&tree, key, &mut Vec::new(), &mut found);
            match found.len() {
                1 => found.pop().unwrap(),
                0 => return Err(Error::Config(format!("unknown config key {key:?}"))),
                _ => {
                    let names: Vec<String> = found.iter().map(|p| p.join(".")).collect();
                    return Err(Error::Config(format!("ambiguous key {key:?}: {}", names.join(", "))));
                }
            }
        };
        let mut node = &mut tree;
        for (i, part) in path.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{} is not a table", path[..i].join("."))))?;
            if i + 1 == path.len() {
                table.insert(part.clone(), value.clone());
                break;
            }
            node = table
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *self = tree
            .try_into()
            .map_err(|e| Error::Config(format!("override {assignment:?}: {e}")))?;
        Ok(())
    }
}

fn find_leaf(v: &toml::Value, key: &str, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    if let Some(t) = v.as_table() {
        for (k, child) in t {
            prefix.push(k.clone());
            if child.is_table() {
                find_leaf(child, key, prefix, out);
            } else if k == key {
                out.push(prefix.clone());
            }
            prefix.pop();
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "featvat", version, about = "Feature-space VAT for unsupervised video domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed: data seed for gen-data, training seed for train.
    #[arg(long)]
    seed: Option<u64>,
    /// KEY=VALUE configuration override (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark as four FVAT files.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        /// Write the text format instead of binary.
        #[arg(long)]
        text: bool,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding the four split files.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Train the source-only baseline.
        #[arg(long)]
        source_only: bool,
    },
    /// Evaluate a checkpoint on a labeled feature file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Use the EMA shadow weights.
        #[arg(long)]
        ema: bool,
    },
    /// Summarize an FVAT feature file or an FVCK checkpoint.
    Inspect { path: PathBuf },
}

/// Exit code of an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Shape { .. } | Error::Contract(_) | Error::Config(_) => 2,
        Error::Format(_) | Error::Corrupt { .. } | Error::Validation { .. } | Error::Io { .. } => 3,
        Error::NonFinite(_) => 4,
    }
}

/// Entry point used by the binary.
pub fn main() -> i32 {
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr().lock();
    run(std::env::args_os(), &mut out, &mut err)
}

/// Runs one command, writing normal output to `out` and diagnostics to
/// `err`; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData { common, text } => cmd_gen_data(&common, text, out),
        Command::Train {
            common,
            data,
            source_only,
        } => cmd_train(&common, data, source_only, out),
        Command::Eval { checkpoint, data, ema } => cmd_eval(&checkpoint, &data, ema, out),
        Command::Inspect { path } => cmd_inspect(&path, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &common.set {
        cfg.apply_override(s)?;
    }
    Ok(cfg)
}

fn print(out: &mut dyn Write, line: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn summary_line(name: &str, ds: &Dataset) -> String {
    format!(
        "{name}: N={} T={} D={} K={} labeled={}",
        ds.len(),
        ds.frames,
        ds.dim,
        ds.num_classes,
        ds.samples.iter().filter(|s| s.label.is_some()).count()
    )
}

fn cmd_gen_data(common: &CommonArgs, text: bool, out: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(s) = common.seed {
        cfg.data_seed = s;
    }
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.paths.data_dir.clone())
        .ok_or_else(|| Error::config("gen-data needs --out DIR or paths.data_dir"))?;
    let bench = gen_synthetic(&cfg.synthetic, cfg.data_seed)?;
    let splits = [
        &bench.source.train,
        &bench.source.test,
        &bench.target.train,
        &bench.target.test,
    ];
    for (name, ds) in SPLIT_FILES.iter().zip(splits) {
        let path = dir.join(format!("{name}.fvat"));
        if text {
            save_features_text(ds, &path)?;
        } else {
            save_features(ds, &path)?;
        }
        print(out, summary_line(&path.display().to_string(), ds))?;
    }
    Ok(())
}

struct DataPaths {
    source_train: PathBuf,
    target_train: PathBuf,
    source_test: Option<PathBuf>,
    target_test: Option<PathBuf>,
}

fn resolve_data(paths: &PathsConfig) -> Result<DataPaths> {
    let pick = |explicit: &Option<PathBuf>, name: &str| {
        explicit
            .clone()
            .or_else(|| paths.data_dir.as_ref().map(|d| d.join(format!("{name}.fvat"))))
    };
    let need = |p: Option<PathBuf>, name: &str| {
        p.ok_or_else(|| Error::Config(format!("no path for {name}; set --data DIR or paths.{name}")))
    };
    Ok(DataPaths {
        source_train: need(pick(&paths.source_train, "source_train"), "source_train")?,
        target_train: need(pick(&paths.target_train, "target_train"), "target_train")?,
        source_test: pick(&paths.source_test, "source_test"),
        target_test: pick(&paths.target_test, "target_test"),
    })
}

/// Tensors of a student/shadow checkpoint.
pub fn checkpoint_tensors(state: &TrainState) -> Vec<(String, Tensor)> {
    let mut t: Vec<(String, Tensor)> = Vec::new();
    for (prefix, net) in [("student/", &state.student), ("ema/", &state.ema)] {
        t.extend(net.named().map(|(n, p)| (format!("{prefix}{n}"), p.clone())));
    }
    t.push(("config.frames".into(), Tensor::scalar(state.student.config().frames as f64)));
    t.push(("config.zscore".into(), Tensor::scalar(state.zscore as u8 as f64)));
    t
}

/// Student network, shadow network and z-score flag of a checkpoint.
pub fn networks_from_checkpoint(tensors: Vec<(String, Tensor)>) -> Result<(Network, Network, bool)> {
    let scalar = |name: &str| -> Result<f64> {
        tensors
            .iter()
            .find(|(n, t)| n == name && t.len() == 1)
            .map(|(_, t)| t.data()[0])
            .ok_or_else(|| Error::Format(format!("checkpoint lacks scalar {name}")))
    };
    let frames = scalar("config.frames")?;
    let zscore = scalar("config.zscore")? != 0.0;
    if !(frames >= 1.0 && frames.fract() == 0.0) {
        return Err(Error::Format(format!("invalid config.frames {frames}")));
    }
    let mut nets = Vec::new();
    for prefix in ["student/", "ema/"] {
        let named: Vec<(String, Tensor)> = tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect();
        let cfg = Network::infer_config(&named, frames as usize).map_err(as_format)?;
        nets.push(Network::from_named(cfg, named).map_err(as_format)?);
    }
    let ema = nets.pop().unwrap();
    let student = nets.pop().unwrap();
    if student.config() != ema.config() {
        return Err(Error::Format("student and shadow architectures differ".into()));
    }
    Ok((student, ema, zscore))
}

/// A checkpoint whose tensors do not describe a network is a file problem.
fn as_format(e: Error) -> Error {
    match e {
        Error::Config(m) | Error::Contract(m) => Error::Format(format!("checkpoint: {m}")),
        Error::Shape { op, lhs, rhs } => Error::Format(format!("checkpoint: shape mismatch in {op}: {lhs:?} vs {rhs:?}")),
        other => other,
    }
}

struct FileObserver {
    writer: BufWriter<File>,
    path: PathBuf,
    out_dir: PathBuf,
}

impl FileObserver {
    fn write(&mut self, rec: &MetricRecord) -> Result<()> {
        let io = |e| Error::io(&self.path, e);
        writeln!(self.writer, "{}", rec.to_line()).map_err(io)?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl TrainObserver for FileObserver {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        self.write(rec)
    }

    fn checkpoint(&mut self, state: &TrainState, epoch: usize) -> Result<()> {
        let path = self.out_dir.join(format!("checkpoint_epoch{:04}.fvck", epoch + 1));
        save_checkpoint(&checkpoint_tensors(state), path)
    }
}

fn print_eval(out: &mut dyn Write, split: &str, weights: &str, ev: &Evaluation) -> Result<()> {
    let per_class: Vec<String> = ev.per_class.iter().map(|a| format!("{a:.4}")).collect();
    print(
        out,
        format!(
            "{split} accuracy ({weights}): {:.4}  per-class: [{}]",
            ev.accuracy,
            per_class.join(", ")
        ),
    )
}

fn cmd_train(common: &CommonArgs, data: Option<PathBuf>, source_only: bool, out: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if source_only {
        cfg.train.source_only = true;
    }
    if data.is_some() {
        cfg.paths.data_dir = data;
    }
    if common.out.is_some() {
        cfg.paths.out_dir = common.out.clone();
    }
    cfg.train.validate()?;
    let out_dir = cfg
        .paths
        .out_dir
        .clone()
        .ok_or_else(|| Error::config("train needs --out DIR or paths.out_dir"))?;
    let dp = resolve_data(&cfg.paths)?;
    let source = load_features(&dp.source_train)?;
    let target = load_features(&dp.target_train)?.without_labels();
    let mut evals: Vec<(&str, Dataset)> = Vec::new();
    for (name, p) in [("source_test", &dp.source_test), ("target_test", &dp.target_test)] {
        if let Some(p) = p {
            evals.push((name, load_features(p)?));
        }
    }
    let metrics_path = cfg.paths.metrics.clone().unwrap_or_else(|| out_dir.join("metrics.jsonl"));
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut observer = FileObserver {
        writer: BufWriter::new(file),
        path: metrics_path,
        out_dir: out_dir.clone(),
    };
    let config_json = serde_json::to_value(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    observer.write(&MetricRecord::header(config_json))?;

    let eval_refs: Vec<(&str, &Dataset)> = evals.iter().map(|(n, d)| (*n, d)).collect();
    let outcome = trainer::train_with(&source, &target, &cfg.train, &eval_refs, &mut observer)?;
    let ckpt = out_dir.join("checkpoint.fvck");
    save_checkpoint(&checkpoint_tensors(&outcome.state), &ckpt)?;
    if let Some(e) = outcome.abort {
        print(out, format!("aborted; last good state written to {}", ckpt.display()))?;
        return Err(e);
    }
    print(
        out,
        format!("trained {} steps; checkpoint {}", outcome.state.step, ckpt.display()),
    )?;
    for (name, ds) in &evals {
        for (weights, ema) in [("student", false), ("ema", true)] {
            print_eval(out, name, weights, &trainer::evaluate(&outcome.state, ds, ema)?)?;
        }
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, ema: bool, out: &mut dyn Write) -> Result<()> {
    let (student, shadow, zscore) = networks_from_checkpoint(load_checkpoint(checkpoint)?)?;
    let ds = load_features(data)?;
    let net = if ema { &shadow } else { &student };
    let ev = trainer::evaluate_network(net, &ds, zscore)?;
    let weights = if ema { "ema" } else { "student" };
    print(out, format!("weights: {weights}"))?;
    print(out, format!("accuracy: {:.6}", ev.accuracy))?;
    for (k, (a, n)) in ev.per_class.iter().zip(&ev.class_counts).enumerate() {
        print(out, format!("class {k}: {a:.6} (n={n})"))?;
    }
    Ok(())
}

fn mean_var(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n)
}

/// Summary printed by `inspect` for a feature file.
pub fn dataset_summary(ds: &Dataset) -> String {
    let mut s = String::new();
    let mut line = |l: String| {
        s.push_str(&l);
        s.push('\n');
    };
    line(format!(
        "samples: {}  frames: {}  dim: {}  classes: {}",
        ds.len(),
        ds.frames,
        ds.dim,
        ds.num_classes
    ));
    let source = ds.samples.iter().filter(|x| x.domain == Domain::Source).count();
    line(format!("domains: source {}  target {}", source, ds.len() - source));
    let mut per_class = vec![0usize; ds.num_classes];
    let mut unlabeled = 0;
    for x in &ds.samples {
        match x.label {
            Some(l) => per_class[l] += 1,
            None => unlabeled += 1,
        }
    }
    line(format!("labels per class: {per_class:?}  unlabeled: {unlabeled}"));
    if ds.is_empty() {
        return s;
    }
    let frames = ds.samples.iter().flat_map(|x| x.values.chunks(ds.dim));
    let stats: Vec<(f64, f64)> = frames.map(|f| mean_var(f.iter().copied())).collect();
    let (mean_of_means, _) = mean_var(stats.iter().map(|s| s.0));
    let (mean_of_vars, _) = mean_var(stats.iter().map(|s| s.1));
    let min_var = stats.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let max_var = stats.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    line(format!("per-frame mean: avg {mean_of_means:.6}"));
    line(format!(
        "per-frame variance: avg {mean_of_vars:.6}  min {min_var:.6}  max {max_var:.6}"
    ));
    let (gm, gv) = mean_var(ds.samples.iter().flat_map(|x| x.values.iter().copied()));
    line(format!("all values: mean {gm:.6}  variance {gv:.6}"));
    s
}

fn cmd_inspect(path: &Path, out: &mut dyn Write) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(crate::network::FVCK_MAGIC) {
        let tensors = decode_fvck(&bytes)?;
        print(out, format!("FVCK checkpoint: {} tensors", tensors.len()))?;
        for (name, t) in &tensors {
            let (m, v) = mean_var(t.data().iter().copied());
            print(out, format!("{name} {:?} mean {m:.6} variance {v:.6}", t.shape()))?;
        }
        return Ok(());
    }
    let ds = load_features(path)?;
    write!(out, "{}", dataset_summary(&ds)).map_err(|e| Error::io("<stdout>", e))
}
