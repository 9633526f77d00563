//! Mini-batch SGD with a step-decayed learning rate.
//!
//! All randomness is drawn from streams derived from the run seed: one per
//! epoch for the sample order and fragment draws, one per epoch position for
//! augmentation, one per batch for dropout. The state after an epoch
//! therefore fixes the rest of the run, and resuming from a checkpoint
//! replays the uninterrupted trajectory exactly.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{affine_in_place, random_fragment, AugmentConfig, FragmentMode};
use crate::datapipe::{Dataset, SampleRef, DEFAULT_STEP, DEFAULT_WINDOW};
use crate::error::{config, invalid, Error, Result};
use crate::model::container::{Container, ContainerKind};
use crate::model::{ForwardMode, Model, ModelConfig, Param};
use crate::numerics::rng::{derive_seed, derived};
use crate::numerics::{Tape, Tensor};

const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_SAMPLE: u64 = 3;
const STREAM_DROPOUT: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Epochs between learning-rate drops.
    pub lr_step: usize,
    pub lr_factor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            base_lr: 0.01,
            lr_step: 10,
            lr_factor: 0.1,
            weight_decay: 0.0005,
            batch_size: 16,
            momentum: 0.0,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_step == 0 {
            return Err(config("epochs, batch_size and lr_step must be at least 1"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(config(format!(
                "base_lr {} must be non-negative",
                self.base_lr
            )));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return Err(config(format!(
                "lr_factor {} not in (0, 1]",
                self.lr_factor
            )));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(config("weight_decay must be ≥ 0 and momentum in [0, 1)"));
        }
        self.augment.validate()
    }
}

/// Windowing of the input videos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub window: usize,
    pub step: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            window: DEFAULT_WINDOW,
            step: DEFAULT_STEP,
        }
    }
}

/// Everything that defines a run, as read from a configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data.window == 0 || self.data.step == 0 {
            return Err(config("window and step must be positive"));
        }
        self.model.validate()?;
        self.train.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `base_lr · lr_factor^⌊epoch / lr_step⌋`
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.lr_factor.powi((epoch / cfg.lr_step) as i32)
}

/// One SGD update: `g' = g + wd·w` (decayed parameters only),
/// `v ← m·v + g'`, `w ← w − lr·v`. Nothing is updated when any gradient is
/// non-finite.
pub fn sgd_step(
    params: &mut [Param],
    grads: &[Tensor],
    lr: f64,
    weight_decay: f64,
    momentum: f64,
    velocity: &mut [Tensor],
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(invalid("parameter, gradient and velocity counts differ"));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.shape() != p.value.shape() {
            return Err(invalid(format!("gradient shape mismatch for {}", p.name)));
        }
        if let Some(i) = g.first_non_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of {} at element {i}",
                p.name
            )));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let wd = if p.decay { weight_decay } else { 0.0 };
        for ((w, &gi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut())
        {
            let g2 = gi + wd * *w;
            *vi = momentum * *vi + g2;
            *w -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Accuracy of the train-mode predictions made during the epoch.
    pub accuracy: f64,
    pub samples: usize,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub velocity: Vec<Tensor>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestRecord>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    train: TrainConfig,
    epoch: usize,
    step: u64,
    history: Vec<EpochRecord>,
    best: Option<BestRecord>,
}

impl TrainState {
    pub fn fresh(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        let model = Model::new(model_cfg.clone(), &mut derived(cfg.seed, &[STREAM_INIT]))?;
        let velocity = model
            .params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Ok(TrainState {
            model,
            velocity,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            best: None,
        })
    }

    pub fn save_checkpoint(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        let extra = self
            .model
            .params
            .iter()
            .zip(&self.velocity)
            .map(|(p, v)| (format!("velocity.{}", p.name), v.clone()))
            .collect();
        let meta = CheckpointMeta {
            train: cfg.clone(),
            epoch: self.epoch,
            step: self.step,
            history: self.history.clone(),
            best: self.best.clone(),
        };
        let meta = serde_json::to_value(meta).expect("checkpoint metadata serializes");
        self.model
            .to_container(ContainerKind::Checkpoint, extra, meta)
            .save(path)
    }

    /// Restores a checkpoint written by a run with the same model
    /// configuration and training settings (the epoch budget may differ).
    pub fn load_checkpoint(
        path: &Path,
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let c = Container::load(path)?;
        if c.kind != ContainerKind::Checkpoint {
            return Err(Error::format(path, "not a checkpoint"));
        }
        let mut state = TrainState::fresh(model_cfg, cfg)?;
        state
            .model
            .check_container(&c)
            .map_err(|r| Error::format(path, r))?;
        state
            .model
            .load_state(&c.tensors)
            .map_err(|r| Error::format(path, r))?;
        for (p, v) in state.model.params.iter().zip(state.velocity.iter_mut()) {
            let name = format!("velocity.{}", p.name);
            *v = c
                .tensor(&name)
                .filter(|t| t.shape() == p.value.shape())
                .ok_or_else(|| Error::format(path, format!("missing or misshapen {name}")))?
                .clone();
        }
        let outer: serde_json::Value = serde_json::from_str(&c.meta)
            .map_err(|e| Error::format(path, format!("bad metadata: {e}")))?;
        let meta: CheckpointMeta = serde_json::from_value(outer["meta"].clone())
            .map_err(|e| Error::format(path, format!("bad checkpoint metadata: {e}")))?;
        let same = TrainConfig {
            epochs: cfg.epochs,
            ..meta.train.clone()
        };
        if &same != cfg {
            return Err(Error::format(
                path,
                "checkpoint was written with different training settings",
            ));
        }
        state.epoch = meta.epoch;
        state.step = meta.step;
        state.history = meta.history;
        state.best = meta.best;
        Ok(state)
    }
}

/// Where and how often training writes files.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `last.ckpt`, `best.ckpt` and `metrics.csv`.
    pub out_dir: Option<PathBuf>,
    /// Also keep `epoch_NNN.ckpt` for every epoch.
    pub keep_every_epoch: bool,
    /// Stop after this many completed epochs (the schedule still spans
    /// `epochs`); used to interrupt runs.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Item {
    sample: SampleRef,
    fragment: bool,
}

/// Trains on `samples` of `ds`, optionally scoring `val` after every epoch.
pub struct Trainer<'a> {
    pub ds: &'a Dataset,
    pub samples: &'a [SampleRef],
    pub val: Option<&'a [SampleRef]>,
    pub cfg: TrainConfig,
    pub opts: TrainOptions,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        ds: &'a Dataset,
        samples: &'a [SampleRef],
        val: Option<&'a [SampleRef]>,
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
        opts: TrainOptions,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("training set is empty"));
        }
        cfg.validate()?;
        if model_cfg.classes != ds.num_classes() {
            return Err(config(format!(
                "model has {} classes, dataset vocabulary has {}",
                model_cfg.classes,
                ds.num_classes()
            )));
        }
        Ok(Trainer {
            ds,
            samples,
            val,
            cfg: cfg.clone(),
            opts,
            state: TrainState::fresh(model_cfg, cfg)?,
        })
    }

    pub fn resume(mut self, checkpoint: &Path) -> Result<Self> {
        self.state = TrainState::load_checkpoint(checkpoint, &self.state.model.config, &self.cfg)?;
        Ok(self)
    }

    fn epoch_items(&self, epoch: usize) -> Vec<Item> {
        let mut rng = derived(self.cfg.seed, &[STREAM_ORDER, epoch as u64]);
        let aug = &self.cfg.augment;
        let mut items: Vec<Item> = match aug.fragments {
            FragmentMode::Replace => self
                .samples
                .iter()
                .map(|&s| Item {
                    sample: s,
                    fragment: true,
                })
                .collect(),
            _ => self
                .samples
                .iter()
                .map(|&s| Item {
                    sample: s,
                    fragment: false,
                })
                .collect(),
        };
        if aug.fragments == FragmentMode::Supplement {
            let extra = (aug.fragment_ratio * self.samples.len() as f64).round() as usize;
            for _ in 0..extra {
                let s = self.samples[rng.random_range(0..self.samples.len())];
                items.push(Item {
                    sample: s,
                    fragment: true,
                });
            }
        }
        items.shuffle(&mut rng);
        items
    }

    /// Input tensor for the item at `position` of `epoch`.
    fn materialize(&self, item: &Item, epoch: usize, position: usize) -> Tensor {
        let mut rng = derived(
            self.cfg.seed,
            &[STREAM_SAMPLE, epoch as u64, position as u64],
        );
        let s = &item.sample;
        let mut data = if item.fragment {
            let v = &self.ds.videos[s.video];
            random_fragment(&v.seq, &v.transcript, s.label, self.ds.window, &mut rng)
                .map(|f| f.data)
                .unwrap_or_else(|| self.ds.window_of(s))
        } else {
            self.ds.window_of(s)
        };
        if self.cfg.augment.affine {
            let p = self.cfg.augment.sample_affine(&mut rng);
            affine_in_place(&mut data, &p);
        }
        data
    }

    /// Runs one epoch and appends its record.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let epoch = self.state.epoch;
        let lr = lr_at(epoch, &self.cfg);
        let items = self.epoch_items(epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in items.chunks(self.cfg.batch_size).enumerate() {
            let start = b * self.cfg.batch_size;
            let tensors: Vec<Tensor> = chunk
                .iter()
                .enumerate()
                .map(|(i, it)| self.materialize(it, epoch, start + i))
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|it| it.sample.label).collect();
            let model = &self.state.model;
            let batch = model.batch(&tensors.iter().collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let mut stats = model.running_stats();
            let mut drop_rng = derived(self.cfg.seed, &[STREAM_DROPOUT, epoch as u64, b as u64]);
            let logits = model.forward(
                &mut tape,
                &vars,
                &batch,
                &mut stats,
                ForwardMode::TRAIN,
                &mut drop_rng,
            )?;
            let preds = argmax_rows(tape.value(logits));
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {}, batch {b}",
                    epoch + 1
                )));
            }
            loss_sum += lv * chunk.len() as f64;
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = vars
                .iter()
                .zip(&model.params)
                .map(|(v, p)| {
                    grads
                        .take(*v)
                        .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
                })
                .collect();
            let state = &mut self.state;
            sgd_step(
                &mut state.model.params,
                &grads,
                lr,
                self.cfg.weight_decay,
                self.cfg.momentum,
                &mut state.velocity,
            )?;
            state.model.set_running_stats(stats);
            state.step += 1;
        }
        let val_accuracy = match self.val {
            Some(v) if !v.is_empty() => Some(accuracy(
                &self.state.model,
                self.ds,
                v,
                self.cfg.batch_size,
            )?),
            _ => None,
        };
        self.state.epoch += 1;
        self.state.history.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            loss: loss_sum / items.len() as f64,
            accuracy: correct as f64 / items.len() as f64,
            samples: items.len(),
            val_accuracy,
        });
        self.after_epoch()?;
        Ok(self.state.history.last().unwrap())
    }

    fn after_epoch(&mut self) -> Result<()> {
        let rec = self.state.history.last().unwrap().clone();
        let Some(dir) = self.opts.out_dir.clone() else {
            if let Some(v) = rec.val_accuracy {
                if self.state.best.as_ref().is_none_or(|b| v > b.val_accuracy) {
                    self.state.best = Some(BestRecord {
                        epoch: rec.epoch,
                        val_accuracy: v,
                        path: None,
                    });
                }
            }
            return Ok(());
        };
        std::fs::create_dir_all(&dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        if let Some(v) = rec.val_accuracy {
            if self.state.best.as_ref().is_none_or(|b| v > b.val_accuracy) {
                let path = dir.join("best.ckpt");
                self.state.best = Some(BestRecord {
                    epoch: rec.epoch,
                    val_accuracy: v,
                    path: Some(path.clone()),
                });
                self.state.save_checkpoint(&path, &self.cfg)?;
            }
        }
        self.state
            .save_checkpoint(&dir.join("last.ckpt"), &self.cfg)?;
        if self.opts.keep_every_epoch {
            self.state
                .save_checkpoint(&dir.join(format!("epoch_{:03}.ckpt", rec.epoch)), &self.cfg)?;
        }
        write_metrics(&dir.join("metrics.csv"), &self.state.history)
    }

    /// Runs the remaining epochs (or up to `stop_after`).
    pub fn run(&mut self) -> Result<()> {
        let stop = self
            .opts
            .stop_after
            .unwrap_or(self.cfg.epochs)
            .min(self.cfg.epochs);
        let total = self.cfg.epochs;
        while self.state.epoch < stop {
            let rec = self.run_epoch()?;
            log::info!(
                "epoch {:>3}/{} lr {:.0e} loss {:.4} acc {:.3}{}",
                rec.epoch,
                total,
                rec.lr,
                rec.loss,
                rec.accuracy,
                rec.val_accuracy
                    .map(|v| format!(" val {v:.3}"))
                    .unwrap_or_default()
            );
        }
        Ok(())
    }
}

/// Rewrites the whole table so a resumed run carries the earlier epochs.
fn write_metrics(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut text = String::from("epoch,lr,loss,accuracy,samples,val_accuracy\n");
    for rec in history {
        text += &format!(
            "{},{},{},{},{},{}\n",
            rec.epoch,
            rec.lr,
            rec.loss,
            rec.accuracy,
            rec.samples,
            rec.val_accuracy.map(|v| v.to_string()).unwrap_or_default()
        );
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Row-wise argmax of an `N×K` tensor; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Eval-mode predictions for `samples`, in order.
pub fn predict(
    model: &Model,
    ds: &Dataset,
    samples: &[SampleRef],
    batch_size: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let tensors: Vec<Tensor> = chunk.iter().map(|s| ds.window_of(s)).collect();
        let batch = model.batch(&tensors.iter().collect::<Vec<_>>())?;
        out.extend(argmax_rows(&model.predict(&batch)?));
    }
    Ok(out)
}

/// Eval-mode accuracy on `samples`.
pub fn accuracy(
    model: &Model,
    ds: &Dataset,
    samples: &[SampleRef],
    batch_size: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("no samples to score"));
    }
    let preds = predict(model, ds, samples, batch_size)?;
    Ok(preds
        .iter()
        .zip(samples)
        .filter(|(p, s)| **p == s.label)
        .count() as f64
        / samples.len() as f64)
}

/// Seed of the `index`-th independent run derived from `seed`.
pub fn run_seed(seed: u64, index: u64) -> u64 {
    derive_seed(seed, &[index])
}
