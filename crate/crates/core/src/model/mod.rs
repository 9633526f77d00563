//! Spatial-temporal graph convolution classifier.

pub mod container;

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Error, Result};
use crate::graph::{
    build_partition_stack, default_tool_skeleton, GraphConfig, PartitionMode, PartitionStack,
    Point, SkeletonSpec,
};
use crate::numerics::rng::Rng as ChaRng;
use crate::numerics::{conv_output_len, NormMode, RunningStats, Tape, Tensor, Var};
use container::{hex, sha256, Container, ContainerKind};

pub use container::CONTAINER_VERSION;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub joints: usize,
    pub tools: usize,
    pub classes: usize,
    /// Output channels of each unit.
    pub widths: Vec<usize>,
    /// Temporal stride of each unit, 1 or 2.
    pub strides: Vec<usize>,
    pub temporal_kernel: usize,
    /// Residual connections on every unit but the first.
    pub residual: bool,
    pub batch_norm: bool,
    pub input_bn: bool,
    pub unit_dropout: f64,
    pub head_dropout: f64,
    pub graph: GraphConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            joints: 5,
            tools: 2,
            classes: 10,
            widths: vec![64, 64, 64, 128, 128, 128, 256, 256, 256],
            strides: vec![1, 1, 1, 2, 1, 1, 2, 1, 1],
            temporal_kernel: 9,
            residual: true,
            batch_norm: true,
            input_bn: true,
            unit_dropout: 0.0,
            head_dropout: 0.5,
            graph: GraphConfig::default(),
        }
    }
}

/// Shape and options of one unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub temporal_kernel: usize,
    pub stride: usize,
    pub residual: bool,
    pub dropout: f64,
    pub batch_norm: bool,
}

impl UnitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temporal_kernel % 2 == 0 {
            return Err(config(format!(
                "temporal kernel {} must be odd",
                self.temporal_kernel
            )));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(config(format!(
                "temporal stride {} must be 1 or 2",
                self.stride
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(config("unit channel counts must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config(format!(
                "dropout rate {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    fn residual_kind(&self) -> ResidualKind {
        if !self.residual {
            ResidualKind::None
        } else if self.in_channels == self.out_channels && self.stride == 1 {
            ResidualKind::Identity
        } else {
            ResidualKind::Projection
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ResidualKind {
    None,
    Identity,
    /// 1×1 temporal convolution with the unit's stride.
    Projection,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(config("model needs at least one unit"));
        }
        if self.strides.len() != self.widths.len() {
            return Err(config(format!(
                "{} strides given for {} units",
                self.strides.len(),
                self.widths.len()
            )));
        }
        if self.in_channels == 0 || self.joints == 0 || self.tools == 0 || self.classes == 0 {
            return Err(config(
                "channel, joint, tool and class counts must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(config(format!(
                "head dropout {} not in [0, 1)",
                self.head_dropout
            )));
        }
        if !(self.graph.alpha > 0.0) {
            return Err(config("graph alpha must be positive"));
        }
        for u in self.units() {
            u.validate()?;
        }
        Ok(())
    }

    pub fn units(&self) -> Vec<UnitConfig> {
        let mut c_in = self.in_channels;
        self.widths
            .iter()
            .zip(&self.strides)
            .enumerate()
            .map(|(i, (&w, &s))| {
                let u = UnitConfig {
                    in_channels: c_in,
                    out_channels: w,
                    temporal_kernel: self.temporal_kernel,
                    stride: s,
                    residual: self.residual && i > 0,
                    dropout: self.unit_dropout,
                    batch_norm: self.batch_norm,
                };
                c_in = w;
                u
            })
            .collect()
    }

    /// Compact JSON used as the configuration echo and digest input.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// A trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether weight decay applies (weights yes; biases and norm affine no).
    pub decay: bool,
}

#[derive(Clone, Copy, Debug)]
struct NormRef {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Copy, Debug)]
struct UnitLayout {
    cfg: UnitConfig,
    gcn_w: usize,
    gcn_b: usize,
    bn1: Option<NormRef>,
    tcn_w: usize,
    tcn_b: usize,
    bn2: Option<NormRef>,
    res: Option<(usize, usize, Option<NormRef>)>,
}

/// How the forward pass treats normalization and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardMode {
    pub norm: NormMode,
    pub dropout: bool,
}

impl ForwardMode {
    pub const TRAIN: ForwardMode = ForwardMode {
        norm: NormMode::Train,
        dropout: true,
    };
    pub const EVAL: ForwardMode = ForwardMode {
        norm: NormMode::Eval,
        dropout: false,
    };
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub skeleton: SkeletonSpec,
    pub params: Vec<Param>,
    /// Running batch-norm statistics, named.
    pub stats: Vec<(String, RunningStats)>,
    input_bn: Option<NormRef>,
    units: Vec<UnitLayout>,
    head: (usize, usize),
    static_adj: Option<Arc<Tensor>>,
}

struct Builder<'a, R: Rng + ?Sized> {
    params: Vec<Param>,
    stats: Vec<(String, RunningStats)>,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn add(&mut self, name: String, value: Tensor, decay: bool) -> usize {
        self.params.push(Param { name, value, decay });
        self.params.len() - 1
    }

    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let t = Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), self.rng);
        self.add(name, t, true)
    }

    fn zeros(&mut self, name: String, len: usize) -> usize {
        self.add(name, Tensor::zeros(&[len]), false)
    }

    fn norm(&mut self, name: &str, ch: usize) -> NormRef {
        let gamma = self.add(format!("{name}.gamma"), Tensor::full(&[ch], 1.0), false);
        let beta = self.zeros(format!("{name}.beta"), ch);
        self.stats.push((name.to_string(), RunningStats::new(ch)));
        NormRef {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }
}

impl Model {
    /// Freshly initialized model on the default tool skeleton.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        Self::with_skeleton(config, default_tool_skeleton(), rng)
    }

    pub fn with_skeleton<R: Rng + ?Sized>(
        config: ModelConfig,
        skeleton: SkeletonSpec,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if skeleton.num_joints() != config.joints {
            return Err(config_err_joints(&skeleton, &config));
        }
        let mut b = Builder {
            params: Vec::new(),
            stats: Vec::new(),
            rng,
        };
        let vc = config.joints * config.in_channels;
        let input_bn = config.input_bn.then(|| b.norm("input_bn", vc));
        let k = config.graph.num_partitions();
        let mut units = Vec::new();
        for (i, u) in config.units().into_iter().enumerate() {
            let p = format!("unit{}", i + 1);
            let (ci, co, kt) = (u.in_channels, u.out_channels, u.temporal_kernel);
            let gcn_w = b.he(format!("{p}.gcn.weight"), &[k, co, ci], ci);
            let gcn_b = b.zeros(format!("{p}.gcn.bias"), co);
            let bn1 = u.batch_norm.then(|| b.norm(&format!("{p}.bn1"), co));
            let tcn_w = b.he(format!("{p}.tcn.weight"), &[co, co, kt, 1], co * kt);
            let tcn_b = b.zeros(format!("{p}.tcn.bias"), co);
            let bn2 = u.batch_norm.then(|| b.norm(&format!("{p}.bn2"), co));
            let res = match u.residual_kind() {
                ResidualKind::Projection => {
                    let w = b.he(format!("{p}.residual.weight"), &[co, ci, 1, 1], ci);
                    let bias = b.zeros(format!("{p}.residual.bias"), co);
                    let bn = u
                        .batch_norm
                        .then(|| b.norm(&format!("{p}.residual.bn"), co));
                    Some((w, bias, bn))
                }
                _ => None,
            };
            units.push(UnitLayout {
                cfg: u,
                gcn_w,
                gcn_b,
                bn1,
                tcn_w,
                tcn_b,
                bn2,
                res,
            });
        }
        let last = *config.widths.last().unwrap();
        let head_w = {
            let t = Tensor::randn(&[last, config.classes], (1.0 / last as f64).sqrt(), b.rng);
            b.add("head.weight".into(), t, true)
        };
        let head_b = b.zeros("head.bias".into(), config.classes);
        let static_adj = match config.graph.mode {
            PartitionMode::PerFrame => None,
            _ => match build_partition_stack(&skeleton, &config.graph, None)? {
                PartitionStack::Static(p) => Some(Arc::new(p.into_tensor())),
                PartitionStack::PerFrame(_) => unreachable!("static modes yield one stack"),
            },
        };
        Ok(Model {
            config,
            skeleton,
            params: b.params,
            stats: b.stats,
            input_bn,
            units,
            head: (head_w, head_b),
            static_adj,
        })
    }

    /// Moves biases, normalization affines and running statistics off their
    /// initial values. Zero biases put many pre-activations exactly on the
    /// ReLU kink, where finite differences are meaningless.
    pub fn jitter_non_weights<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for p in self.params.iter_mut().filter(|p| !p.decay) {
            let centre = if p.name.ends_with(".gamma") { 1.0 } else { 0.0 };
            for v in p.value.data_mut() {
                *v = centre + rng.random_range(-0.2..0.2);
            }
        }
        for (_, s) in self.stats.iter_mut() {
            for (m, v) in s.mean.iter_mut().zip(s.var.iter_mut()) {
                *m = rng.random_range(-0.2..0.2);
                *v = rng.random_range(0.8..1.25);
            }
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Registers every parameter on `tape`, in declaration order.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.param(p.value.clone()))
            .collect()
    }

    pub fn running_stats(&self) -> Vec<RunningStats> {
        self.stats.iter().map(|(_, s)| s.clone()).collect()
    }

    pub fn set_running_stats(&mut self, stats: Vec<RunningStats>) {
        for ((_, s), new) in self.stats.iter_mut().zip(stats) {
            *s = new;
        }
    }

    /// Stacks `C×T×V×M` segments into an `N×C×T×V×M` batch.
    pub fn batch(&self, segments: &[&Tensor]) -> Result<Tensor> {
        let first = segments.first().ok_or_else(|| invalid("empty batch"))?;
        let shape = first.shape().to_vec();
        let mut data = Vec::with_capacity(first.len() * segments.len());
        for s in segments {
            if s.shape() != shape.as_slice() {
                return Err(invalid(format!(
                    "segment shape {:?} differs from {shape:?}",
                    s.shape()
                )));
            }
            data.extend_from_slice(s.data());
        }
        let mut full = vec![segments.len()];
        full.extend(shape);
        Tensor::new(&full, data)
    }

    /// Logits `N×classes` for an `N×C×T×V×M` batch. `vars` come from
    /// [`Model::register`] on the same tape; `stats` are updated in train
    /// mode.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &Tensor,
        stats: &mut [RunningStats],
        mode: ForwardMode,
        rng: &mut R,
    ) -> Result<Var> {
        let cfg = &self.config;
        let s = batch.shape();
        if s.len() != 5 {
            return Err(invalid(format!("batch must be N×C×T×V×M, got {s:?}")));
        }
        let (n, c, t, v, m) = (s[0], s[1], s[2], s[3], s[4]);
        if v != cfg.joints {
            return Err(invalid(format!(
                "batch has {v} joints but the graph has {}",
                cfg.joints
            )));
        }
        if c != cfg.in_channels || m != cfg.tools {
            return Err(invalid(format!(
                "batch has {c} channels × {m} tools, model expects {} × {}",
                cfg.in_channels, cfg.tools
            )));
        }
        if let Some(i) = batch.first_non_finite() {
            return Err(Error::NonFinite(format!("input batch element {i}")));
        }
        let per_frame = if self.static_adj.is_none() {
            Some(per_frame_adjacency(&self.skeleton, &cfg.graph, batch)?)
        } else {
            None
        };

        let x = tape.constant(batch.clone());
        let mut h = if let Some(bn) = self.input_bn {
            // N,C,T,V,M → (N·M),(V·C),T; tool instances share statistics.
            let p = tape.permute(x, &[0, 4, 3, 1, 2])?;
            let r = tape.reshape(p, &[n * m, v * c, t])?;
            let r = tape.batch_norm(
                r,
                vars[bn.gamma],
                vars[bn.beta],
                &mut stats[bn.stats],
                mode.norm,
            )?;
            let r = tape.reshape(r, &[n * m, v, c, t])?;
            tape.permute(r, &[0, 2, 3, 1])?
        } else {
            let p = tape.permute(x, &[0, 4, 1, 2, 3])?;
            tape.reshape(p, &[n * m, c, t, v])?
        };

        let mut frame_stride = 1;
        for (i, u) in self.units.iter().enumerate() {
            let adj = match (&self.static_adj, &per_frame) {
                (Some(a), _) => a.clone(),
                (None, Some(full)) => {
                    let len = tape.value(h).shape()[2];
                    Arc::new(subsample_frames(full, frame_stride, len))
                }
                (None, None) => unreachable!(),
            };
            h = unit_forward(tape, vars, stats, u, h, adj, mode, rng)?;
            frame_stride *= u.cfg.stride;
            if let Some(bad) = tape.value(h).first_non_finite() {
                return Err(Error::NonFinite(format!(
                    "unit {} output element {bad}",
                    i + 1
                )));
            }
        }

        let hs = tape.value(h).shape().to_vec();
        let pooled = tape.reshape(h, &[hs[0], hs[1], hs[2] * hs[3]])?;
        let pooled = tape.mean_axis(pooled, 2)?;
        let pooled = tape.reshape(pooled, &[n, m, hs[1]])?;
        let pooled = tape.mean_axis(pooled, 1)?;
        let pooled = tape.reshape(pooled, &[n, hs[1]])?;
        let dropped = tape.dropout(pooled, 1.0 - cfg.head_dropout, mode.dropout, rng)?;
        let logits = tape.matmul(dropped, vars[self.head.0])?;
        let logits = tape.add_bias(logits, vars[self.head.1], 1)?;
        if let Some(bad) = tape.value(logits).first_non_finite() {
            return Err(Error::NonFinite(format!("logit element {bad}")));
        }
        Ok(logits)
    }

    /// Eval-mode logits for a batch, `N×classes`.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        let mut stats = self.running_stats();
        let mut rng = crate::numerics::rng::seeded(0);
        let out = self.forward(
            &mut tape,
            &vars,
            batch,
            &mut stats,
            ForwardMode::EVAL,
            &mut rng,
        )?;
        Ok(tape.value(out).clone())
    }

    /// Digest of the configuration echo stored in parameter files.
    pub fn config_echo(&self) -> String {
        serde_json::json!({
            "model": self.config,
            "skeleton": self.skeleton.to_toml_string(),
        })
        .to_string()
    }

    /// Parameters followed by running statistics, in declaration order.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.named_params();
        for (name, s) in &self.stats {
            let ch = s.mean.len();
            out.push((
                format!("{name}.running_mean"),
                Tensor::from_parts(vec![ch], s.mean.clone()),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::from_parts(vec![ch], s.var.clone()),
            ));
        }
        out
    }

    /// Copies parameters and statistics out of `tensors`, which must hold
    /// every state tensor with matching shape.
    pub fn load_state(&mut self, tensors: &[(String, Tensor)]) -> std::result::Result<(), String> {
        let find = |name: &str, shape: &[usize]| -> std::result::Result<Tensor, String> {
            let t = tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| format!("missing tensor {name}"))?;
            if t.shape() != shape {
                return Err(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                ));
            }
            Ok(t.clone())
        };
        for p in &mut self.params {
            p.value = find(&p.name, &p.value.shape().to_vec())?;
        }
        for (name, s) in &mut self.stats {
            let ch = s.mean.len();
            s.mean = find(&format!("{name}.running_mean"), &[ch])?.into_data();
            s.var = find(&format!("{name}.running_var"), &[ch])?.into_data();
        }
        Ok(())
    }

    pub fn to_container(
        &self,
        kind: ContainerKind,
        extra: Vec<(String, Tensor)>,
        meta: serde_json::Value,
    ) -> Container {
        let echo = self.config_echo();
        let mut tensors = self.state_tensors();
        tensors.extend(extra);
        Container {
            kind,
            digest: sha256(echo.as_bytes()),
            meta: serde_json::json!({ "config": echo, "meta": meta }).to_string(),
            tensors,
        }
    }

    /// Fails unless `c` was written for this model's configuration.
    pub fn check_container(&self, c: &Container) -> std::result::Result<(), String> {
        let echo = self.config_echo();
        if c.digest == sha256(echo.as_bytes()) {
            return Ok(());
        }
        let stored: serde_json::Value =
            serde_json::from_str(&c.meta).map_err(|e| format!("bad metadata: {e}"))?;
        let stored_echo: serde_json::Value = stored["config"]
            .as_str()
            .and_then(|s| serde_json::from_str(s).ok())
            .unwrap_or(serde_json::Value::Null);
        let ours: serde_json::Value = serde_json::from_str(&echo).unwrap();
        let mut diffs = Vec::new();
        diff_json("", &stored_echo, &ours, &mut diffs);
        Err(format!(
            "configuration mismatch (file digest {}, expected {}): {}",
            hex(&c.digest[..6]),
            hex(&sha256(echo.as_bytes())[..6]),
            if diffs.is_empty() {
                "digest differs".into()
            } else {
                diffs.join("; ")
            }
        ))
    }

    pub fn save_params(&self, path: &Path) -> Result<()> {
        self.to_container(ContainerKind::Params, Vec::new(), serde_json::Value::Null)
            .save(path)
    }

    /// Loads parameters saved for the same configuration into `self`.
    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let c = Container::load(path)?;
        if c.kind != ContainerKind::Params {
            return Err(Error::format(path, "not a parameter file"));
        }
        self.check_container(&c)
            .map_err(|r| Error::format(path, r))?;
        self.load_state(&c.tensors)
            .map_err(|r| Error::format(path, r))
    }

    /// Rebuilds a model from the configuration echoed in a parameter file.
    pub fn from_params_file(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        let meta: serde_json::Value = serde_json::from_str(&c.meta)
            .map_err(|e| Error::format(path, format!("bad metadata: {e}")))?;
        let echo: serde_json::Value = meta["config"]
            .as_str()
            .and_then(|s| serde_json::from_str(s).ok())
            .ok_or_else(|| Error::format(path, "missing configuration echo"))?;
        let config: ModelConfig = serde_json::from_value(echo["model"].clone())
            .map_err(|e| Error::format(path, format!("model config: {e}")))?;
        let skeleton = SkeletonSpec::from_toml_str(echo["skeleton"].as_str().unwrap_or_default())?;
        let mut model =
            Model::with_skeleton(config, skeleton, &mut crate::numerics::rng::seeded(0))?;
        model
            .check_container(&c)
            .map_err(|r| Error::format(path, r))?;
        model
            .load_state(&c.tensors)
            .map_err(|r| Error::format(path, r))?;
        Ok(model)
    }
}

fn config_err_joints(skeleton: &SkeletonSpec, cfg: &ModelConfig) -> Error {
    config(format!(
        "skeleton has {} joints but the model is configured for {}",
        skeleton.num_joints(),
        cfg.joints
    ))
}

fn diff_json(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let p = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                diff_json(
                    &p,
                    x.get(k).unwrap_or(&Value::Null),
                    y.get(k).unwrap_or(&Value::Null),
                    out,
                );
            }
        }
        (Value::String(x), Value::String(y)) if x != y && x.contains('\n') => {
            out.push(format!("{path} differs"));
        }
        _ if a != b => out.push(format!("{path}: file {a}, expected {b}")),
        _ => {}
    }
}

fn norm(
    tape: &mut Tape,
    vars: &[Var],
    stats: &mut [RunningStats],
    r: Option<NormRef>,
    x: Var,
    mode: ForwardMode,
) -> Result<Var> {
    match r {
        Some(r) => tape.batch_norm(
            x,
            vars[r.gamma],
            vars[r.beta],
            &mut stats[r.stats],
            mode.norm,
        ),
        None => Ok(x),
    }
}

#[allow(clippy::too_many_arguments)]
fn unit_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &[Var],
    stats: &mut [RunningStats],
    u: &UnitLayout,
    x: Var,
    adj: Arc<Tensor>,
    mode: ForwardMode,
    rng: &mut R,
) -> Result<Var> {
    let kt = u.cfg.temporal_kernel;
    let y = tape.graph_conv(x, adj, vars[u.gcn_w], Some(vars[u.gcn_b]))?;
    let y = norm(tape, vars, stats, u.bn1, y, mode)?;
    let y = tape.relu(y);
    let y = tape.temporal_conv(
        y,
        vars[u.tcn_w],
        Some(vars[u.tcn_b]),
        u.cfg.stride,
        (kt - 1) / 2,
    )?;
    let y = norm(tape, vars, stats, u.bn2, y, mode)?;
    let y = tape.dropout(y, 1.0 - u.cfg.dropout, mode.dropout, rng)?;
    let y = match (u.cfg.residual_kind(), u.res) {
        (ResidualKind::None, _) => y,
        (ResidualKind::Identity, _) => tape.add(y, x)?,
        (ResidualKind::Projection, Some((w, b, bn))) => {
            let r = tape.temporal_conv(x, vars[w], Some(vars[b]), u.cfg.stride, 0)?;
            let r = norm(tape, vars, stats, bn, r, mode)?;
            tape.add(y, r)?
        }
        (ResidualKind::Projection, None) => {
            unreachable!("projection parameters are built with the unit")
        }
    };
    Ok(tape.relu(y))
}

/// Runs one unit on its own tape-level inputs; used by tests and tools that
/// exercise a single unit.
pub struct StandaloneUnit {
    pub model: Model,
}

impl StandaloneUnit {
    /// A one-unit model whose trunk is `cfg`; the head is unused.
    pub fn new<R: Rng + ?Sized>(cfg: UnitConfig, graph: GraphConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mc = ModelConfig {
            in_channels: cfg.in_channels,
            widths: vec![cfg.out_channels],
            strides: vec![cfg.stride],
            temporal_kernel: cfg.temporal_kernel,
            residual: false,
            batch_norm: cfg.batch_norm,
            input_bn: false,
            unit_dropout: cfg.dropout,
            graph,
            ..ModelConfig::default()
        };
        let mut model = Model::new(mc, rng)?;
        // First-unit residual is off by default; honour the request here.
        let u = &mut model.units[0];
        u.cfg.residual = cfg.residual;
        if cfg.residual_kind() == ResidualKind::Projection {
            let mut b = Builder {
                params: std::mem::take(&mut model.params),
                stats: std::mem::take(&mut model.stats),
                rng,
            };
            let w = b.he(
                "unit1.residual.weight".into(),
                &[cfg.out_channels, cfg.in_channels, 1, 1],
                cfg.in_channels,
            );
            let bias = b.zeros("unit1.residual.bias".into(), cfg.out_channels);
            let bn = cfg
                .batch_norm
                .then(|| b.norm("unit1.residual.bn", cfg.out_channels));
            model.params = b.params;
            model.stats = b.stats;
            model.units[0].res = Some((w, bias, bn));
        }
        Ok(StandaloneUnit { model })
    }

    /// `N×C×T×V` → `N×C'×T'×V` on `tape`, with a static adjacency.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        stats: &mut [RunningStats],
        mode: ForwardMode,
        rng: &mut R,
    ) -> Result<Var> {
        let v = tape.value(x).shape().get(3).copied().unwrap_or(0);
        let adj = self
            .model
            .static_adj
            .clone()
            .ok_or_else(|| invalid("standalone units need a static adjacency"))?;
        if adj.shape()[1] != v {
            return Err(invalid(format!(
                "input has {v} joints but the adjacency has {}",
                adj.shape()[1]
            )));
        }
        unit_forward(tape, vars, stats, &self.model.units[0], x, adj, mode, rng)
    }

    /// Replaces the adjacency stack used by [`StandaloneUnit::forward`].
    pub fn set_adjacency(&mut self, adj: Tensor) -> Result<()> {
        let k = self.model.params[self.model.units[0].gcn_w].value.shape()[0];
        if adj.rank() != 3 || adj.shape()[0] != k || adj.shape()[1] != adj.shape()[2] {
            return Err(invalid(format!(
                "adjacency must be {k}×V×V, got {:?}",
                adj.shape()
            )));
        }
        self.model.static_adj = Some(Arc::new(adj));
        Ok(())
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.model.params.iter().position(|p| p.name == name)
    }
}

/// `(N·M)×T×K×V×V` per-frame stacks from the x, y channels of an
/// `N×C×T×V×M` batch.
fn per_frame_adjacency(
    skeleton: &SkeletonSpec,
    cfg: &GraphConfig,
    batch: &Tensor,
) -> Result<Tensor> {
    let s = batch.shape();
    let (n, t, v, m) = (s[0], s[2], s[3], s[4]);
    let k = cfg.num_partitions();
    let mut out = Vec::with_capacity(n * m * t * k * v * v);
    for ni in 0..n {
        for mi in 0..m {
            let frames: Vec<Vec<Point>> = (0..t)
                .map(|ti| {
                    (0..v)
                        .map(|j| {
                            [
                                batch.get(&[ni, 0, ti, j, mi]),
                                batch.get(&[ni, 1, ti, j, mi]),
                            ]
                        })
                        .collect()
                })
                .collect();
            match build_partition_stack(skeleton, cfg, Some(&frames))? {
                PartitionStack::PerFrame(stacks) => {
                    for p in stacks {
                        out.extend_from_slice(p.tensor().data());
                    }
                }
                PartitionStack::Static(_) => unreachable!("per-frame mode"),
            }
        }
    }
    Tensor::new(&[n * m, t, k, v, v], out)
}

/// Frames `0, stride, 2·stride, …` of a per-frame stack, `len` of them: the
/// centers of a strided temporal convolution with same padding.
fn subsample_frames(full: &Tensor, stride: usize, len: usize) -> Tensor {
    if stride == 1 && full.shape()[1] == len {
        return full.clone();
    }
    let s = full.shape();
    let (nm, t, block) = (s[0], s[1], s[2] * s[3] * s[4]);
    let mut out = Vec::with_capacity(nm * len * block);
    for i in 0..nm {
        for f in 0..len {
            let src = (f * stride).min(t - 1);
            let o = (i * t + src) * block;
            out.extend_from_slice(&full.data()[o..o + block]);
        }
    }
    Tensor::from_parts(vec![nm, len, s[2], s[3], s[4]], out)
}

/// Temporal length after every unit for an input of `t` frames.
pub fn trunk_lengths(cfg: &ModelConfig, t: usize) -> Vec<usize> {
    let pad = (cfg.temporal_kernel - 1) / 2;
    let mut len = t;
    cfg.strides
        .iter()
        .map(|&s| {
            len = conv_output_len(len, cfg.temporal_kernel, s, pad).unwrap_or(0);
            len
        })
        .collect()
}

/// Draws a seeded random `N×C×T×V×M` batch with coordinates in [−1, 1] and
/// confidences in [0, 1].
pub fn random_batch(cfg: &ModelConfig, n: usize, t: usize, rng: &mut ChaRng) -> Tensor {
    let shape = [n, cfg.in_channels, t, cfg.joints, cfg.tools];
    let per_channel = t * cfg.joints * cfg.tools;
    Tensor::from_fn(&shape, |i| {
        let c = (i / per_channel) % cfg.in_channels;
        if c == 2 {
            rng.random_range(0.0..1.0)
        } else {
            rng.random_range(-1.0..1.0)
        }
    })
}

/// Checks the analytic gradient of the cross-entropy loss of a freshly
/// initialized `cfg` model against finite differences, on a fixed random
/// batch of `samples` × `frames` inputs (eval-mode normalization, dropout
/// off). Non-weight parameters and running statistics are jittered away
/// from their initial values so no ReLU input sits exactly on its kink.
pub fn check_model_gradients(
    cfg: &ModelConfig,
    samples: usize,
    frames: usize,
    seed: u64,
    opts: &crate::numerics::GradCheckOptions,
) -> Result<crate::numerics::GradCheckReport> {
    let mut rng = crate::numerics::rng::seeded(seed);
    let mut model = Model::new(cfg.clone(), &mut rng)?;
    model.jitter_non_weights(&mut rng);
    let batch = random_batch(cfg, samples, frames, &mut rng);
    let labels: Vec<usize> = (0..samples).map(|i| (i * 7 + 3) % cfg.classes).collect();
    let stats = model.running_stats();
    let params = model.named_params();
    crate::numerics::grad_check(
        &params,
        |tape, vars| {
            let mut st = stats.clone();
            let logits = model.forward(
                tape,
                vars,
                &batch,
                &mut st,
                ForwardMode::EVAL,
                &mut crate::numerics::rng::seeded(0),
            )?;
            tape.softmax_cross_entropy(logits, &labels)
        },
        opts,
    )
}
