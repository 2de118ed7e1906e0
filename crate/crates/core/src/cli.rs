//! Command-line interface.
//!
//! Exit codes: 0 on success, 1 on runtime or check failure, 2 on usage
//! errors. Reports are single JSON documents written to `--report`; human
//! readable summaries go to standard output.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::data::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::manifest::{manifest_base, read_manifest, write_manifest, Manifest, ManifestRecord};
use crate::data::pnm::write_image_pnm;
use crate::data::synthetic::SyntheticSpec;
use crate::data::Rng;
use crate::error::{Error, Result};
use crate::layers::{gradcheck_with, randomize_batch_norm, ArchGraph, GradcheckOptions, GradcheckReport};
use crate::metrics::BBox;
use crate::tensor::Tensor;
use crate::train::{
    evaluate, train_epoch, CompositeLossCfg, Dataset, DetectionTarget, EpochStats, EvalReport, OptimKind, OptimState,
    Targets, TrainOptions,
};
use crate::zoo::{self, ModelKind, ModelSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "convzoo", version, about = "Build, audit, train and evaluate small convolutional networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer parameter and buffer footprint of a model.
    Audit(AuditArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Train a model and write a checkpoint plus per-epoch statistics.
    Train(TrainArgs),
    /// Evaluate a checkpoint and report classification (and box) metrics.
    Eval(EvalArgs),
    /// Write a synthetic dataset as PNM images and manifests.
    Gendata(GendataArgs),
}

fn parse_model(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_synthetic(s: &str) -> std::result::Result<SyntheticSpec, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_width(s: &str) -> std::result::Result<f64, String> {
    let w: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if w > 0.0 && w <= 1.0 {
        Ok(w)
    } else {
        Err(format!("width multiplier must be in (0, 1], got {w}"))
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, value_parser = parse_model)]
    pub model: ModelKind,
    /// Number of classes (defaults to the dataset's class count, or 2).
    #[arg(long)]
    pub classes: Option<usize>,
    /// Channels of the feature map consumed by the transfer head.
    #[arg(long, default_value_t = 1280)]
    pub feature_dim: usize,
    /// Square input resolution.
    #[arg(long)]
    pub input: Option<usize>,
    /// Channel width multiplier in (0, 1].
    #[arg(long, default_value_t = 1.0, value_parser = parse_width)]
    pub width: f64,
    /// Freeze every parameter whose name starts with this prefix (repeatable).
    #[arg(long)]
    pub freeze: Vec<String>,
    /// Freeze every entry outside the `head.` layers.
    #[arg(long)]
    pub freeze_backbone: bool,
}

impl ModelArgs {
    fn spec(&self, classes: usize, default_res: usize) -> ModelSpec {
        let mut spec = ModelSpec::new(self.model, classes).with_width(self.width);
        if self.model == ModelKind::TransferHead {
            spec = spec.with_feature_dim(self.feature_dim);
            if let Some(r) = self.input {
                spec = spec.with_resolution(r);
            }
        } else {
            spec = spec.with_resolution(self.input.unwrap_or(default_res));
        }
        spec
    }

    fn build(&self, classes: usize, default_res: usize, seed: u64) -> Result<ArchGraph> {
        let mut g = zoo::build(&self.spec(classes, default_res), seed)?;
        self.apply_freeze(&mut g)?;
        Ok(g)
    }

    fn apply_freeze(&self, g: &mut ArchGraph) -> Result<()> {
        if self.freeze_backbone {
            zoo::freeze_backbone(g)?;
        }
        for p in &self.freeze {
            g.set_trainable(p, false)?;
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// JSON report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model to check; all architectures when omitted.
    #[arg(long, value_parser = parse_model)]
    pub model: Option<ModelKind>,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub input: usize,
    #[arg(long, default_value_t = 0.0625, value_parser = parse_width)]
    pub width: f64,
    #[arg(long, default_value_t = 64)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    pub threshold: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Give every detection sample a background label (no boxes).
    #[arg(long)]
    pub background_only: bool,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Corrupt one analytic gradient (negative control for the checker).
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Synthetic dataset spec, e.g. `classes=2,train=100,eval=50,res=32,seed=7`.
    #[arg(long, value_parser = parse_synthetic, conflicts_with = "manifest")]
    pub synthetic: Option<SyntheticSpec>,
    /// Manifest of PNM images.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Manifest of held-out images evaluated after every epoch.
    #[arg(long, requires = "manifest")]
    pub eval_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "adam", value_parser = parse_optimizer)]
    pub optimizer: OptimKind,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub checkpoint_in: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long)]
    pub checkpoint_in: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GendataArgs {
    #[arg(long, value_parser = parse_synthetic)]
    pub synthetic: SyntheticSpec,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let mut out = std::io::stdout().lock();
    let result = match cli.command {
        Command::Audit(a) => cmd_audit(&a, &mut out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, &mut out),
        Command::Train(a) => cmd_train(&a, &mut out),
        Command::Eval(a) => cmd_eval(&a, &mut out),
        Command::Gendata(a) => cmd_gendata(&a, &mut out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

/// Prefixes I/O errors with the path they concern.
fn at(path: &Path) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}

fn write_report<S: Serialize>(path: Option<&Path>, doc: &S) -> Result<()> {
    if let Some(path) = path {
        let text = serde_json::to_string_pretty(doc).map_err(|e| Error::Internal(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| at(path)(e.into()))?;
    }
    Ok(())
}

/// Rejects datasets whose sample shape or class count disagrees with the model.
fn check_data(g: &ArchGraph, data: &Dataset, classes: Option<usize>) -> Result<()> {
    let s = data.images.shape();
    let i = g.input_spec();
    if (s.c, s.h, s.w) != (i.channels, i.height, i.width) {
        return Err(Error::shape(
            "input",
            format!(
                "data samples are {}x{}x{} but the model expects {}x{}x{}",
                s.c, s.h, s.w, i.channels, i.height, i.width
            ),
        ));
    }
    match classes {
        Some(c) if c != data.classes() => {
            Err(Error::data(format!("model has {c} classes but the dataset declares {}", data.classes())))
        }
        _ => Ok(()),
    }
}

pub fn cmd_audit(a: &AuditArgs, out: &mut dyn Write) -> Result<i32> {
    let classes = a.model.classes.unwrap_or(2);
    let g = a.model.build(classes, 224, 0)?;
    let report = zoo::audit(&g)?;
    write!(out, "{}", report.to_table())?;
    write_report(a.report.as_deref(), &report)?;
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct GradcheckEntry {
    model: ModelKind,
    passed: bool,
    #[serde(flatten)]
    report: GradcheckReport,
}

/// Batch of random inputs and targets for a gradient check.
pub fn gradcheck_batch(graph: &ArchGraph, batch: usize, seed: u64, background_only: bool) -> (Tensor<f64>, Targets) {
    let mut rng = Rng::with_stream(seed, 7);
    let shape = graph.input_spec().batch_shape(batch);
    let x: Vec<f64> = (0..shape.len()).map(|_| rng.normal()).collect();
    let x = Tensor::from_vec(shape, x).expect("length matches");
    let classes = graph.output_spec().classes().unwrap_or(2);
    let targets = if graph.output_spec().channels() == classes + 4 {
        let targets = (0..batch)
            .map(|i| {
                if background_only || i % 2 == 1 {
                    DetectionTarget { label: 0, bbox: None }
                } else {
                    let (x1, y1) = (rng.uniform_range(0.0, 0.5) as f32, rng.uniform_range(0.0, 0.5) as f32);
                    let bbox = BBox::new(x1, y1, x1 + 0.3, y1 + 0.4);
                    DetectionTarget { label: 1 + rng.below(classes - 1), bbox: Some(bbox) }
                }
            })
            .collect();
        Targets::Detection { targets, cfg: CompositeLossCfg::new(classes) }
    } else {
        Targets::Labels((0..batch).map(|_| rng.below(classes)).collect())
    };
    (x, targets)
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let models: Vec<ModelKind> = match a.model {
        Some(m) => vec![m],
        None => ModelKind::ALL.to_vec(),
    };
    let mut entries = Vec::new();
    let mut failed = None;
    for kind in models {
        let mut spec = ModelSpec::new(kind, a.classes).with_width(a.width);
        spec = if kind == ModelKind::TransferHead {
            spec.with_feature_dim(a.feature_dim).with_resolution(a.input.min(7))
        } else {
            spec.with_resolution(a.input)
        };
        let g = zoo::build(&spec, a.seed)?;
        let (x, targets) = gradcheck_batch(&g, a.batch, a.seed, a.background_only);
        let opts = GradcheckOptions { eps: a.eps, inject_fault: a.inject_fault };
        let mut g = g.cast::<f64>();
        randomize_batch_norm(&mut g, a.seed);
        let report = gradcheck_with(&g, &targets, &x, opts)?;
        let passed = report.max_rel_error < a.threshold;
        writeln!(
            out,
            "{kind}: max relative error {:.3e} over {} parameters ({}) worst at {}[{}]",
            report.max_rel_error,
            report.checked,
            if passed { "ok" } else { "FAILED" },
            report.worst_param,
            report.worst_index
        )?;
        if !passed && failed.is_none() {
            failed = Some(report.worst_param.clone());
        }
        entries.push(GradcheckEntry { model: kind, passed, report });
    }
    write_report(a.report.as_deref(), &json!({ "threshold": a.threshold, "eps": a.eps, "models": entries }))?;
    if let Some(param) = failed {
        eprintln!("gradient check failed at parameter `{param}`");
        return Ok(EXIT_FAILURE);
    }
    Ok(EXIT_OK)
}

/// Training and optional evaluation data for a run.
fn load_data(data: &DataArgs, model: &ModelArgs) -> Result<(Dataset, Option<Dataset>)> {
    let detection = model.model.is_detector();
    if let Some(spec) = &data.synthetic {
        let (train, eval) = spec.generate()?;
        let eval = (!eval.is_empty()).then_some(eval);
        return Ok((train, eval));
    }
    let Some(path) = &data.manifest else {
        return Err(Error::config("one of --synthetic or --manifest is required"));
    };
    let res = model.input.unwrap_or(32);
    let load = |p: &Path| -> Result<Dataset> {
        read_manifest(p).map_err(at(p))?.load_dataset(&manifest_base(p), 3, res, detection)
    };
    let train = load(path)?;
    let eval = data.eval_manifest.as_deref().map(load).transpose()?;
    Ok((train, eval))
}

fn data_resolution(d: &Dataset) -> usize {
    d.images.shape().h
}

#[derive(Debug, Serialize)]
struct EpochRecord {
    #[serde(flatten)]
    stats: EpochStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_mean_iou: Option<f64>,
}

#[derive(Debug, Serialize)]
struct TrainReport {
    model: ModelKind,
    classes: usize,
    width: f64,
    input: usize,
    optimizer: OptimKind,
    lr: f64,
    batch: usize,
    seed: u64,
    train_samples: usize,
    params_trainable: usize,
    params_frozen: usize,
    epochs: Vec<EpochRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval: Option<EvalReport>,
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let (train, eval) = load_data(&a.data, &a.model)?;
    let classes = a.model.classes.unwrap_or(train.classes());
    let res = data_resolution(&train);
    let mut g = a.model.build(classes, res, a.seed)?;
    check_data(&g, &train, a.model.classes)?;
    if let Some(ev) = &eval {
        check_data(&g, ev, a.model.classes)?;
    }
    if let Some(p) = &a.checkpoint_in {
        load_checkpoint(&mut g, p).map_err(at(p))?;
        a.model.apply_freeze(&mut g)?;
    }
    let mut optim = OptimState::new(a.optimizer, a.lr)?;
    let opts = TrainOptions { batch_size: a.batch, seed: a.seed, shuffle: true };
    let mut epochs = Vec::with_capacity(a.epochs);
    let mut last_eval = None;
    for e in 1..=a.epochs {
        let stats = train_epoch(&mut g, &train, &mut optim, &opts, e)?;
        let mut record = EpochRecord { stats, eval_accuracy: None, eval_mean_iou: None };
        let mut line = format!("epoch {e}: loss {:.4}", record.stats.mean_loss);
        if let Some(ev) = &eval {
            let report = evaluate(&mut g, ev, a.batch.max(32))?.report(ev)?;
            record.eval_accuracy = Some(report.accuracy);
            line += &format!(", eval accuracy {:.4}", report.accuracy);
            if let Some(iou) = report.detection.as_ref().and_then(|d| d.mean_iou) {
                record.eval_mean_iou = Some(iou);
                line += &format!(", eval mean IoU {iou:.4}");
            }
            last_eval = Some(report);
        }
        writeln!(out, "{line} ({:.2}s)", record.stats.wall_seconds)?;
        epochs.push(record);
    }
    if let Some(p) = &a.checkpoint_out {
        save_checkpoint(&g, p).map_err(at(p))?;
    }
    let counts = g.params().counts();
    let report = TrainReport {
        model: a.model.model,
        classes,
        width: a.model.width,
        input: res,
        optimizer: a.optimizer,
        lr: a.lr,
        batch: a.batch,
        seed: a.seed,
        train_samples: train.len(),
        params_trainable: counts.trainable,
        params_frozen: counts.frozen,
        epochs,
        eval: last_eval,
    };
    write_report(a.report.as_deref(), &report)?;
    Ok(EXIT_OK)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let (train, eval) = load_data(&a.data, &a.model)?;
    // a manifest alone is evaluated as is; synthetic specs use their eval split
    let data = match (&a.data.synthetic, eval) {
        (Some(_), Some(e)) => e,
        (Some(_), None) => return Err(Error::config("synthetic spec has an empty eval split")),
        (None, Some(e)) => e,
        (None, None) => train,
    };
    let classes = a.model.classes.unwrap_or(data.classes());
    let mut g = a.model.build(classes, data_resolution(&data), 0)?;
    check_data(&g, &data, a.model.classes)?;
    load_checkpoint(&mut g, &a.checkpoint_in).map_err(at(&a.checkpoint_in))?;
    let report = evaluate(&mut g, &data, a.batch)?.report(&data)?;
    writeln!(
        out,
        "accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}  ({} samples)",
        report.accuracy, report.precision, report.recall, report.f1, report.samples
    )?;
    if let Some(d) = &report.detection {
        match d.mean_iou {
            Some(iou) => writeln!(out, "mean IoU {iou:.4} over {} boxed samples", d.boxed_samples)?,
            None => writeln!(out, "no boxed samples; mean IoU not defined")?,
        }
    }
    let doc = json!({ "model": a.model.model, "checkpoint": a.checkpoint_in, "report": report });
    write_report(a.report.as_deref(), &doc)?;
    Ok(EXIT_OK)
}

fn write_split(dir: &Path, split: &str, data: &Dataset) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| at(&images)(e.into()))?;
    let mut manifest = Manifest { class_names: data.class_names.clone(), records: Vec::with_capacity(data.len()) };
    let s = data.images.shape();
    for i in 0..data.len() {
        let rel = format!("images/{split}_{i:05}.ppm");
        let img = Tensor::from_vec([1, s.c, s.h, s.w], data.images.sample(i).to_vec())?;
        let file = dir.join(&rel);
        write_image_pnm(&file, &img).map_err(at(&file))?;
        let (label, bbox) = match &data.targets {
            Targets::Labels(l) => (l[i], None),
            Targets::Detection { targets, .. } => (targets[i].label, targets[i].bbox),
        };
        manifest.records.push(ManifestRecord { path: rel, label, bbox });
    }
    let path = dir.join(format!("{split}.manifest"));
    write_manifest(&path, &manifest).map_err(at(&path))?;
    Ok(path)
}

pub fn cmd_gendata(a: &GendataArgs, out: &mut dyn Write) -> Result<i32> {
    let (train, eval) = a.synthetic.generate()?;
    fs::create_dir_all(&a.out).map_err(|e| at(&a.out)(e.into()))?;
    writeln!(out, "{}", write_split(&a.out, "train", &train)?.display())?;
    if !eval.is_empty() {
        writeln!(out, "{}", write_split(&a.out, "eval", &eval)?.display())?;
    }
    Ok(EXIT_OK)
}
