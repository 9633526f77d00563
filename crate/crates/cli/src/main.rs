//! `stgcn`: synthetic data, gradient checks, training, evaluation and
//! leave-one-user-out cross-validation from the command line.
//!
//! Progress goes to stderr; results go to files under the run's output
//! directory, which always starts with a `run_manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use stgcn::datapipe::{
    build_louo_folds, manifest::manifest_path, synth_dataset, Dataset, Manifest, SynthOptions,
};
use stgcn::evalharness::{self, config_digest, emit_report, CrossvalOptions, CrossvalReport};
use stgcn::model::{check_model_gradients, Model};
use stgcn::numerics::{GradCheckOptions, OpKind};
use stgcn::trainer::{accuracy, ExperimentConfig, TrainOptions, Trainer};

const OUT_ROOT_ENV: &str = "STGCN_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "stgcn",
    version,
    about = "Skeleton-based surgical gesture recognition"
)]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic pose/transcript dataset with a manifest.
    Synth(SynthArgs),
    /// Compare analytic and finite-difference gradients of the full model.
    Gradcheck(GradcheckArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Score a trained parameter file.
    Eval(EvalArgs),
    /// Leave-one-user-out cross-validation.
    Crossval(CrossvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SynthOptions::default().classes)]
    classes: usize,
    #[arg(long, default_value_t = SynthOptions::default().subjects)]
    subjects: usize,
    #[arg(long, default_value_t = SynthOptions::default().trials)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = SynthOptions::default().tools)]
    tools: usize,
    #[arg(long, default_value_t = SynthOptions::default().gestures_per_subject)]
    gestures_per_subject: usize,
    /// Shortest and longest gesture in frames.
    #[arg(long, default_value_t = SynthOptions::default().min_frames)]
    min_frames: usize,
    #[arg(long, default_value_t = SynthOptions::default().max_frames)]
    max_frames: usize,
    /// Shortest and longest untranscribed rest between gestures.
    #[arg(long, default_value_t = SynthOptions::default().gap_frames.0)]
    min_gap: usize,
    #[arg(long, default_value_t = SynthOptions::default().gap_frames.1)]
    max_gap: usize,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

/// Settings shared by every command that reads an experiment configuration.
/// Each flag overrides the corresponding key of the configuration file.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML file with `[data]`, `[model]` and `[train]` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides `train.batch_size`.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Overrides `train.base_lr`.
    #[arg(long)]
    lr: Option<f64>,
    /// Overrides `train.momentum`.
    #[arg(long)]
    momentum: Option<f64>,
    /// Overrides `data.window`.
    #[arg(long)]
    window: Option<usize>,
    /// Overrides `data.step`.
    #[arg(long)]
    step: Option<usize>,
    /// Any other key, e.g. `--set model.widths=[8,8,16]` or
    /// `--set train.augment.fragments="off"`. Values are TOML literals.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct OutArgs {
    /// Output directory; defaults to `$STGCN_OUT_ROOT/<command>-<time>`
    /// (or `runs/` when the variable is unset).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Elements checked, spread over every parameter tensor; 0 checks all.
    #[arg(long, default_value_t = 200)]
    max_elements: usize,
    #[arg(long, default_value_t = 2)]
    samples: usize,
    /// Frames per sample; defaults to the configured window.
    #[arg(long)]
    frames: Option<usize>,
    /// Flip the sign of one operation's adjoint (negative control).
    #[arg(long, hide = true)]
    corrupt_adjoint: Option<String>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory (or its manifest.toml).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
    /// Hold this subject out as the validation split.
    #[arg(long)]
    fold: Option<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Keep a checkpoint for every epoch, not only the last and best.
    #[arg(long)]
    keep_checkpoints: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
    /// Parameter file written by `train`.
    #[arg(long)]
    params: PathBuf,
    /// Score only this subject's videos.
    #[arg(long)]
    fold: Option<String>,
}

#[derive(Args)]
struct CrossvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
    /// Run only the fold holding out this subject (repeatable).
    #[arg(long)]
    fold: Vec<String>,
    /// Folds trained in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Train on shuffled labels as a leakage control.
    #[arg(long)]
    control: bool,
    /// Keep per-fold checkpoints under the output directory.
    #[arg(long)]
    checkpoints: bool,
}

/// Everything needed to repeat a run.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    tool_version: String,
    timestamp: String,
    seed: Option<u64>,
    config_digest: Option<String>,
    config: Option<ExperimentConfig>,
    inputs: BTreeMap<String, String>,
    output_dir: PathBuf,
    argv: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for bad input or configuration, 2 for numerical failure, 3 for I/O.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<stgcn::Error>() {
            return match err {
                stgcn::Error::NonFinite(_) => 2,
                stgcn::Error::Io { .. } => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Crossval(a) => cmd_crossval(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    if a.out.exists() && !a.force {
        let non_empty = std::fs::read_dir(&a.out)
            .with_context(|| format!("reading {}", a.out.display()))?
            .next()
            .is_some();
        if non_empty {
            bail!(
                "{} is not empty; pass --force to write into it",
                a.out.display()
            );
        }
    }
    let opts = SynthOptions {
        classes: a.classes,
        subjects: a.subjects,
        trials: a.trials,
        seed: a.seed,
        tools: a.tools,
        gestures_per_subject: a.gestures_per_subject,
        min_frames: a.min_frames,
        max_frames: a.max_frames,
        gap_frames: (a.min_gap, a.max_gap),
        ..SynthOptions::default()
    };
    let manifest = synth_dataset(&a.out, &opts)?;
    eprintln!(
        "wrote {} videos of {} subjects ({} gestures) to {}",
        manifest.videos.len(),
        manifest.subjects().len(),
        manifest.gestures.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Sets `path` (dotted) in a TOML table, creating tables on the way.
fn set_key(root: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .context("empty configuration key")?;
    let mut table = root;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .with_context(|| format!("configuration key {p} is not a section"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    // Bare words are taken as strings so `--set train.augment.fragments=off` works.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ConfigArgs {
    /// The configuration file with every flag applied. `classes` fills in
    /// `model.classes` when neither the file nor a flag sets it.
    fn resolve(&self, classes: Option<usize>) -> Result<ExperimentConfig> {
        let mut table: toml::Table = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text)
                    .map_err(|e| stgcn::Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let flags: [(&str, Option<toml::Value>); 7] = [
            (
                "train.seed",
                self.seed.map(|v| toml::Value::Integer(v as i64)),
            ),
            (
                "train.epochs",
                self.epochs.map(|v| toml::Value::Integer(v as i64)),
            ),
            (
                "train.batch_size",
                self.batch_size.map(|v| toml::Value::Integer(v as i64)),
            ),
            ("train.base_lr", self.lr.map(toml::Value::Float)),
            ("train.momentum", self.momentum.map(toml::Value::Float)),
            (
                "data.window",
                self.window.map(|v| toml::Value::Integer(v as i64)),
            ),
            (
                "data.step",
                self.step.map(|v| toml::Value::Integer(v as i64)),
            ),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                set_key(&mut table, key, v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set {kv}: expected KEY=VALUE"))?;
            set_key(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        if let Some(c) = classes {
            let has = table
                .get("model")
                .and_then(|m| m.as_table())
                .is_some_and(|m| m.contains_key("classes"));
            if !has {
                set_key(&mut table, "model.classes", toml::Value::Integer(c as i64))?;
            }
        }
        let text = toml::to_string(&table).context("re-serializing configuration")?;
        Ok(ExperimentConfig::from_toml_str(&text)?)
    }
}

fn output_dir(out: &OutArgs, command: &str) -> PathBuf {
    out.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(format!(
            "{command}-{}",
            chrono::Local::now().format("%Y%m%dT%H%M%S")
        ))
    })
}

/// Creates the output directory and writes `run_manifest.json` (and the
/// effective `config.toml`) before any long-running work.
fn start_run(
    command: &str,
    out: &Path,
    cfg: Option<&ExperimentConfig>,
    inputs: BTreeMap<String, String>,
) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = RunManifest {
        command: command.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        timestamp: chrono::Local::now().to_rfc3339(),
        seed: cfg.map(|c| c.train.seed),
        config_digest: cfg.map(config_digest),
        config: cfg.cloned(),
        inputs,
        output_dir: out.to_path_buf(),
        argv: std::env::args().collect(),
    };
    let path = out.join("run_manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", path.display()))?;
    if let Some(c) = cfg {
        let path = out.join("config.toml");
        std::fs::write(&path, c.to_toml_string())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!("output: {}", out.display());
    Ok(())
}

fn inputs(pairs: &[(&str, Option<&Path>)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .filter_map(|(k, v)| v.map(|p| (k.to_string(), p.display().to_string())))
        .collect()
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = a.cfg.resolve(None)?;
    let out = output_dir(&a.out, "gradcheck");
    start_run(
        "gradcheck",
        &out,
        Some(&cfg),
        inputs(&[("config", a.cfg.config.as_deref())]),
    )?;
    let fault = a
        .corrupt_adjoint
        .as_deref()
        .map(|s| {
            s.parse::<OpKind>()
                .map_err(|e| stgcn::Error::Config(e.to_string()))
        })
        .transpose()?;
    let opts = GradCheckOptions {
        step: a.h,
        tol: a.tol,
        max_elements: (a.max_elements > 0).then_some(a.max_elements),
        seed: cfg.train.seed,
        fault,
        ..GradCheckOptions::default()
    };
    let frames = a.frames.unwrap_or(cfg.data.window);
    let t0 = Instant::now();
    let report = check_model_gradients(&cfg.model, a.samples, frames, cfg.train.seed, &opts)?;
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    let text = format!(
        "{verdict}\n{report}\nelapsed {:.1}s\n",
        t0.elapsed().as_secs_f64()
    );
    std::fs::write(out.join("gradcheck.txt"), &text).context("writing gradcheck.txt")?;
    eprint!("{text}");
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn load_dataset(data: &Path, cfg: &ExperimentConfig) -> Result<Dataset> {
    Ok(Dataset::load(
        data,
        cfg.model.joints,
        cfg.model.tools,
        cfg.data.window,
        cfg.data.step,
    )?)
}

fn vocab_size(data: &Path) -> Result<usize> {
    Ok(Manifest::load(&manifest_path(data))?.gestures.len())
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = a.cfg.resolve(Some(vocab_size(&a.data.data)?))?;
    let out = output_dir(&a.out, "train");
    start_run(
        "train",
        &out,
        Some(&cfg),
        inputs(&[
            ("data", Some(&a.data.data)),
            ("config", a.cfg.config.as_deref()),
            ("resume", a.resume.as_deref()),
        ]),
    )?;
    let ds = load_dataset(&a.data.data, &cfg)?;
    let (train_videos, val_videos) = match &a.fold {
        Some(s) => {
            let plan = build_louo_folds(&ds.manifest)?;
            let fold = plan
                .fold(s)
                .with_context(|| format!("no subject {s} in the manifest"))?;
            (fold.train_videos.clone(), Some(fold.test_videos.clone()))
        }
        None => (ds.video_ids(), None),
    };
    let train = ds.samples(&train_videos)?;
    let val = val_videos.map(|v| ds.samples(&v)).transpose()?;
    let opts = TrainOptions {
        out_dir: Some(out.clone()),
        keep_every_epoch: a.keep_checkpoints,
        stop_after: None,
    };
    let mut trainer = Trainer::new(&ds, &train, val.as_deref(), &cfg.model, &cfg.train, opts)?;
    if let Some(ck) = &a.resume {
        trainer = trainer.resume(ck)?;
        eprintln!("resumed after epoch {}", trainer.state.epoch);
    }
    trainer.run()?;
    let model = &trainer.state.model;
    model.save_params(&out.join("model.params"))?;
    let train_acc = accuracy(model, &ds, &train, cfg.train.batch_size)?;
    let summary = serde_json::json!({
        "history": trainer.state.history,
        "best": trainer.state.best,
        "train_accuracy": train_acc,
    });
    std::fs::write(
        out.join("history.json"),
        serde_json::to_string_pretty(&summary)?,
    )
    .context("writing history.json")?;
    eprintln!("training accuracy {:.2}%", 100.0 * train_acc);
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let model = Model::from_params_file(&a.params)?;
    let mut cfg = a.cfg.resolve(Some(model.config.classes))?;
    cfg.model = model.config.clone();
    let out = output_dir(&a.out, "eval");
    start_run(
        "eval",
        &out,
        Some(&cfg),
        inputs(&[
            ("data", Some(&a.data.data)),
            ("params", Some(&a.params)),
            ("config", a.cfg.config.as_deref()),
        ]),
    )?;
    let ds = load_dataset(&a.data.data, &cfg)?;
    if ds.num_classes() != model.config.classes {
        bail!(stgcn::Error::Config(format!(
            "model predicts {} classes, dataset vocabulary has {}",
            model.config.classes,
            ds.num_classes()
        )));
    }
    let (subject, videos) = match &a.fold {
        Some(s) => {
            let plan = build_louo_folds(&ds.manifest)?;
            let fold = plan
                .fold(s)
                .with_context(|| format!("no subject {s} in the manifest"))?;
            (s.clone(), fold.test_videos.clone())
        }
        None => ("all".to_string(), ds.video_ids()),
    };
    let fold = evalharness::evaluate_fold(&model, &ds, &subject, &videos, cfg.train.batch_size)?;
    let mut report = CrossvalReport {
        task: ds.manifest.task.clone(),
        classes: ds.manifest.gestures.labels().to_vec(),
        chance: 1.0 / ds.num_classes() as f64,
        seed: cfg.train.seed,
        config_digest: config_digest(&cfg),
        control: false,
        folds: vec![fold],
        average_accuracy: None,
        pooled_accuracy: None,
        timing: Default::default(),
    };
    report.average_accuracy = Some(report.folds[0].accuracy);
    report.pooled_accuracy = report.average_accuracy;
    emit_report(&report, &out)?;
    println!(
        "accuracy {:.2}% (chance {:.2}%)",
        100.0 * report.folds[0].accuracy,
        100.0 * report.chance
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_crossval(a: CrossvalArgs) -> Result<ExitCode> {
    let cfg = a.cfg.resolve(Some(vocab_size(&a.data.data)?))?;
    let out = output_dir(&a.out, "crossval");
    let mut inp = inputs(&[
        ("data", Some(&a.data.data)),
        ("config", a.cfg.config.as_deref()),
    ]);
    if !a.fold.is_empty() {
        inp.insert("folds".into(), a.fold.join(","));
    }
    if a.control {
        inp.insert("control".into(), "shuffled labels".into());
    }
    start_run("crossval", &out, Some(&cfg), inp)?;
    let ds = load_dataset(&a.data.data, &cfg)?;
    let opts = CrossvalOptions {
        only: a.fold.clone(),
        control: a.control,
        jobs: a.jobs,
        checkpoint_root: a.checkpoints.then(|| out.join("checkpoints")),
    };
    let report = evalharness::crossval(&ds, &cfg, &opts)?;
    emit_report(&report, &out)?;
    for f in &report.folds {
        match &f.failure {
            None => eprintln!("  {:<10} {:6.2}%", f.subject, 100.0 * f.accuracy),
            Some(why) => eprintln!("  {:<10} FAILED: {why}", f.subject),
        }
    }
    println!("{}", report.summary());
    let failures: Vec<&String> = report
        .folds
        .iter()
        .filter_map(|f| f.failure.as_ref())
        .collect();
    Ok(if failures.is_empty() {
        ExitCode::SUCCESS
    } else if failures.iter().all(|f| f.starts_with("non-finite")) {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    })
}
