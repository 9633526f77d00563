//! Leave-one-user-out cross-validation, fold metrics and report files.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::FragmentMode;
use crate::datapipe::{build_louo_folds, Dataset, Fold, SampleRef};
use crate::error::{invalid, Error, Result};
use crate::model::container::{hex, sha256};
use crate::model::Model;
use crate::numerics::rng::derived;
use crate::trainer::{accuracy, predict, run_seed, ExperimentConfig, TrainOptions, Trainer};

const STREAM_CONTROL: u64 = 0xC0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub video_id: String,
    pub end_frame: usize,
    pub label: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    /// Held-out subject.
    pub subject: String,
    pub seed: u64,
    pub predictions: Vec<Prediction>,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Eval-mode accuracy on the fold's own training segments.
    pub train_accuracy: Option<f64>,
    /// Set when the fold could not be trained or evaluated.
    pub failure: Option<String>,
}

impl FoldResult {
    pub fn failed(subject: &str, seed: u64, reason: String) -> Self {
        FoldResult {
            subject: subject.into(),
            seed,
            predictions: Vec::new(),
            accuracy: 0.0,
            confusion: Vec::new(),
            train_accuracy: None,
            failure: Some(reason),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }

    fn from_predictions(subject: &str, classes: usize, predictions: Vec<Prediction>) -> Self {
        let mut confusion = vec![vec![0; classes]; classes];
        for p in &predictions {
            confusion[p.label][p.predicted] += 1;
        }
        let correct = predictions
            .iter()
            .filter(|p| p.label == p.predicted)
            .count();
        FoldResult {
            subject: subject.into(),
            seed: 0,
            accuracy: correct as f64 / predictions.len() as f64,
            predictions,
            confusion,
            train_accuracy: None,
            failure: None,
        }
    }
}

/// Scores `model` on every segment of `test_videos` (eval mode, no
/// augmentation). Argmax ties go to the lowest class index.
pub fn evaluate_fold(
    model: &Model,
    ds: &Dataset,
    subject: &str,
    test_videos: &[String],
    batch_size: usize,
) -> Result<FoldResult> {
    let samples = ds.samples(test_videos)?;
    if samples.is_empty() {
        return Err(invalid(format!("fold {subject}: no test segments")));
    }
    let preds = predict(model, ds, &samples, batch_size)?;
    let predictions = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| Prediction {
            video_id: ds.videos[s.video].id().to_string(),
            end_frame: s.end_frame,
            label: s.label,
            predicted: p,
        })
        .collect();
    Ok(FoldResult::from_predictions(
        subject,
        ds.num_classes(),
        predictions,
    ))
}

#[derive(Clone, Debug, Default)]
pub struct CrossvalOptions {
    /// Only these held-out subjects; all folds when empty.
    pub only: Vec<String>,
    /// Train on per-segment shuffled labels (fragments disabled).
    pub control: bool,
    /// Folds trained concurrently.
    pub jobs: usize,
    /// Per-fold checkpoint directories are created under this root.
    pub checkpoint_root: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub fold_seconds: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub task: String,
    pub classes: Vec<String>,
    /// Accuracy of uniform guessing, `1 / classes`.
    pub chance: f64,
    pub seed: u64,
    /// SHA-256 of the effective configuration.
    pub config_digest: String,
    pub control: bool,
    pub folds: Vec<FoldResult>,
    /// Unweighted mean of fold accuracies; withheld when any fold failed.
    pub average_accuracy: Option<f64>,
    /// Accuracy over all evaluated segments pooled across folds.
    pub pooled_accuracy: Option<f64>,
    /// Wall-clock figures; written to their own file so reruns produce
    /// identical reports.
    #[serde(skip)]
    pub timing: Timing,
}

impl CrossvalReport {
    pub fn failed_folds(&self) -> Vec<&str> {
        self.folds
            .iter()
            .filter(|f| !f.is_ok())
            .map(|f| f.subject.as_str())
            .collect()
    }

    fn aggregate(&mut self) {
        let ok = self.folds.iter().all(FoldResult::is_ok) && !self.folds.is_empty();
        self.average_accuracy = ok
            .then(|| self.folds.iter().map(|f| f.accuracy).sum::<f64>() / self.folds.len() as f64);
        let (mut correct, mut total) = (0usize, 0usize);
        for f in self.folds.iter().filter(|f| f.is_ok()) {
            correct += f
                .predictions
                .iter()
                .filter(|p| p.label == p.predicted)
                .count();
            total += f.predictions.len();
        }
        self.pooled_accuracy = (total > 0).then(|| correct as f64 / total as f64);
    }

    /// One-line summary with the chance reference.
    pub fn summary(&self) -> String {
        let avg = match self.average_accuracy {
            Some(a) => format!("{:.2}%", 100.0 * a),
            None => format!("withheld ({} failed folds)", self.failed_folds().len()),
        };
        format!(
            "average accuracy over {} folds: {avg} (chance {:.2}%)",
            self.folds.len(),
            100.0 * self.chance
        )
    }
}

pub fn config_digest(cfg: &ExperimentConfig) -> String {
    hex(&sha256(cfg.to_toml_string().as_bytes()))
}

/// Refuses a plan where any training segment comes from a held-out video
/// or subject.
fn audit(ds: &Dataset, fold: &Fold, train: &[SampleRef]) -> Result<()> {
    let test: HashSet<&str> = fold.test_videos.iter().map(String::as_str).collect();
    for s in train {
        let v = &ds.videos[s.video];
        if test.contains(v.id()) || v.subject() == fold.subject {
            return Err(invalid(format!(
                "fold {}: training stream contains held-out video {}",
                fold.subject,
                v.id()
            )));
        }
    }
    Ok(())
}

fn run_fold(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    fold: &Fold,
    seed: u64,
    opts: &CrossvalOptions,
) -> Result<FoldResult> {
    let mut train = ds.samples(&fold.train_videos)?;
    audit(ds, fold, &train)?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    if opts.control {
        let mut labels: Vec<usize> = train.iter().map(|s| s.label).collect();
        labels.shuffle(&mut derived(seed, &[STREAM_CONTROL]));
        for (s, l) in train.iter_mut().zip(labels) {
            s.label = l;
        }
        tcfg.augment.fragments = FragmentMode::Off;
    }
    let topts = TrainOptions {
        out_dir: opts.checkpoint_root.as_ref().map(|r| r.join(&fold.subject)),
        ..TrainOptions::default()
    };
    let mut trainer = Trainer::new(ds, &train, None, &cfg.model, &tcfg, topts)?;
    trainer.run()?;
    let model = &trainer.state.model;
    let mut result = evaluate_fold(model, ds, &fold.subject, &fold.test_videos, tcfg.batch_size)?;
    result.seed = seed;
    result.train_accuracy = Some(accuracy(model, ds, &train, tcfg.batch_size)?);
    Ok(result)
}

/// Trains one model per held-out subject from scratch and scores it.
/// Fold seeds depend only on the base seed and the fold's position in the
/// full plan, so a single fold reproduces its share of a full run.
pub fn crossval(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    opts: &CrossvalOptions,
) -> Result<CrossvalReport> {
    cfg.validate()?;
    let plan = build_louo_folds(&ds.manifest)?;
    plan.check(&ds.video_ids())?;
    for s in &opts.only {
        if plan.fold(s).is_none() {
            return Err(invalid(format!("no fold for subject {s}")));
        }
    }
    let selected: Vec<(usize, &Fold)> = plan
        .folds
        .iter()
        .enumerate()
        .filter(|(_, f)| opts.only.is_empty() || opts.only.contains(&f.subject))
        .collect();

    let start = Instant::now();
    let results: Mutex<Vec<Option<(FoldResult, f64)>>> = Mutex::new(vec![None; selected.len()]);
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(index, fold)) = selected.get(i) else {
            break;
        };
        let seed = run_seed(cfg.train.seed, index as u64 + 1);
        let t0 = Instant::now();
        log::info!(
            "fold {}/{}: holding out {}",
            index + 1,
            plan.folds.len(),
            fold.subject
        );
        let r = run_fold(ds, cfg, fold, seed, opts).unwrap_or_else(|e| {
            log::error!("fold {} failed: {e}", fold.subject);
            FoldResult::failed(&fold.subject, seed, e.to_string())
        });
        if r.is_ok() {
            log::info!("fold {}: accuracy {:.4}", fold.subject, r.accuracy);
        }
        results.lock().unwrap()[i] = Some((r, t0.elapsed().as_secs_f64()));
    };
    let jobs = opts.jobs.clamp(1, selected.len().max(1));
    if jobs == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(work);
            }
        });
    }
    let mut folds = Vec::new();
    let mut timing = Timing::default();
    for (r, secs) in results.into_inner().unwrap().into_iter().flatten() {
        timing.fold_seconds.push((r.subject.clone(), secs));
        folds.push(r);
    }
    timing.total_seconds = start.elapsed().as_secs_f64();
    let classes = ds.manifest.gestures.labels().to_vec();
    let mut report = CrossvalReport {
        task: ds.manifest.task.clone(),
        chance: 1.0 / classes.len() as f64,
        classes,
        seed: cfg.train.seed,
        config_digest: config_digest(cfg),
        control: opts.control,
        folds,
        average_accuracy: None,
        pooled_accuracy: None,
        timing,
    };
    report.aggregate();
    Ok(report)
}

pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const TIMING_FILE: &str = "timing.json";

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes `report.json`, `predictions.csv`, `timing.json` and one
/// `confusion_<subject>.svg` per evaluated fold. Returns the paths.
pub fn emit_report(report: &CrossvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut written = Vec::new();
    let path = out_dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write(&path, json.as_bytes())?;
    written.push(path);

    let path = out_dir.join(PREDICTIONS_FILE);
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::format(&out_dir.join(PREDICTIONS_FILE), e.to_string());
    w.write_record([
        "subject",
        "video_id",
        "end_frame",
        "label",
        "predicted",
        "gesture",
        "predicted_gesture",
    ])
    .map_err(io)?;
    for f in &report.folds {
        for p in &f.predictions {
            w.write_record([
                f.subject.as_str(),
                p.video_id.as_str(),
                &p.end_frame.to_string(),
                &p.label.to_string(),
                &p.predicted.to_string(),
                report.classes[p.label].as_str(),
                report.classes[p.predicted].as_str(),
            ])
            .map_err(io)?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format(&path, e.to_string()))?;
    write(&path, &bytes)?;
    written.push(path);

    let path = out_dir.join(TIMING_FILE);
    write(
        &path,
        serde_json::to_string_pretty(&report.timing)
            .expect("timing serializes")
            .as_bytes(),
    )?;
    written.push(path);

    for f in report.folds.iter().filter(|f| f.is_ok()) {
        let path = out_dir.join(format!("confusion_{}.svg", sanitize(&f.subject)));
        write(
            &path,
            confusion_svg(&f.confusion, &report.classes, &f.subject, f.accuracy).as_bytes(),
        )?;
        written.push(path);
    }
    Ok(written)
}

pub fn load_report(path: &Path) -> Result<CrossvalReport> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Heat map of a confusion matrix, rows normalized by true-class counts.
pub fn confusion_svg(
    confusion: &[Vec<usize>],
    labels: &[String],
    subject: &str,
    acc: f64,
) -> String {
    let k = confusion.len();
    let cell = 36;
    let (left, top) = (90, 60);
    let width = left + k * cell + 20;
    let height = top + k * cell + 50;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="24" font-size="14">{} held out, accuracy {:.2}%</text>"#,
        xml_escape(subject),
        100.0 * acc
    );
    for (i, row) in confusion.iter().enumerate() {
        let total: usize = row.iter().sum();
        for (j, &n) in row.iter().enumerate() {
            let frac = if total > 0 {
                n as f64 / total as f64
            } else {
                0.0
            };
            let shade = (255.0 * (1.0 - frac)).round() as u8;
            let (x, y) = (left + j * cell, top + i * cell);
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="gray" stroke-width="0.5"/>"#
            );
            if n > 0 {
                let color = if frac > 0.5 { "white" } else { "black" };
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" font-size="10" text-anchor="middle" fill="{color}">{n}</text>"#,
                    x + cell / 2,
                    y + cell / 2 + 4
                );
            }
        }
    }
    for (i, l) in labels.iter().enumerate().take(k) {
        let l = xml_escape(l);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{l}</text>"#,
            left - 6,
            top + i * cell + cell / 2 + 4
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">{l}</text>"#,
            left + i * cell + cell / 2,
            top + k * cell + 16
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">predicted</text>"#,
        left + k * cell / 2,
        top + k * cell + 36
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" font-size="11" transform="rotate(-90 16 {})" text-anchor="middle">true</text>"#,
        top + k * cell / 2,
        top + k * cell / 2
    );
    s.push_str("</svg>\n");
    s
}
