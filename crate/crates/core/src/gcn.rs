//! Message-passing network over the per-microphone graphs: a shared
//! three-layer MLP applied to every (center, neighbor) pair, mean
//! aggregation, reverse-mode gradients recorded on a tape, Adam with a
//! warmup/decay schedule, training and checkpointing.

use std::path::Path;

use log::info;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::graph::{FeatureBank, QueryAttachment};
use crate::objective::{evaluate, value_and_grad, LossExample, Objective};
use crate::rtf::RtfFeature;
use crate::util::derive_seed;

pub const CHECKPOINT_SCHEMA: u32 = 1;

/// Weights of the edge MLP `2d -> 2d -> 2d -> d`, stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

pub const PARAM_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

impl GcnParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            w1: Array2::zeros((2 * d, 2 * d)),
            b1: Array1::zeros(2 * d),
            w2: Array2::zeros((2 * d, 2 * d)),
            b2: Array1::zeros(2 * d),
            w3: Array2::zeros((d, 2 * d)),
            b3: Array1::zeros(d),
        }
    }

    /// Uniform fan-in initialization `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases.
    pub fn he_uniform(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(d);
        for w in [&mut p.w1, &mut p.w2, &mut p.w3] {
            let bound = (6.0 / w.ncols() as f64).sqrt();
            w.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        }
        p
    }

    pub fn dim(&self) -> usize {
        self.b3.len()
    }

    pub fn check(&self) -> Result<()> {
        let d = self.dim();
        let ok = self.w1.dim() == (2 * d, 2 * d)
            && self.b1.len() == 2 * d
            && self.w2.dim() == (2 * d, 2 * d)
            && self.b2.len() == 2 * d
            && self.w3.dim() == (d, 2 * d)
            && d > 0;
        if !ok {
            return Err(Error::Shape(format!("inconsistent parameter shapes for d = {d}")));
        }
        if self.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn slices(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
        ]
    }

    fn shapes(d: usize) -> [Vec<usize>; 6] {
        [
            vec![2 * d, 2 * d],
            vec![2 * d],
            vec![2 * d, 2 * d],
            vec![2 * d],
            vec![d, 2 * d],
            vec![d],
        ]
    }

    fn add_scaled(&mut self, other: &GcnParams, c: f64) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
        }
    }
}

/// Evaluation is deterministic; training applies inverted dropout after both
/// hidden activations.
pub enum Mode<'a> {
    Eval,
    Train { dropout: f64, rng: &'a mut ChaCha8Rng },
}

/// One aggregation target: a center vector and its keyed neighbors.
pub struct Node<'a> {
    pub center: &'a [f64],
    pub neighbors: Vec<(usize, &'a [f64])>,
}

/// Activations of one forward pass, consumed by a single backward pass.
pub struct Tape {
    groups: Vec<usize>,
    x: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
    z2: Array2<f64>,
    a2: Array2<f64>,
    mask1: Option<Array2<f64>>,
    mask2: Option<Array2<f64>>,
    used: bool,
}

fn relu_masked(z: &Array2<f64>, mask: Option<&Array2<f64>>) -> Array2<f64> {
    let mut a = z.mapv(|v| v.max(0.0));
    if let Some(m) = mask {
        a *= m;
    }
    a
}

fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

/// Runs every message of every node as one batch and averages each node's
/// messages in ascending neighbor-id order.
pub fn forward(params: &GcnParams, nodes: &[Node], mode: Mode) -> Result<(Array2<f64>, Tape)> {
    let d = params.dim();
    let mut groups = Vec::with_capacity(nodes.len());
    let mut rows = Vec::new();
    for node in nodes {
        if node.neighbors.is_empty() {
            return Err(Error::InvalidInput("node without neighbors".into()));
        }
        if node.center.len() != d || node.neighbors.iter().any(|(_, n)| n.len() != d) {
            return Err(Error::Shape(format!("message inputs must have {d} entries")));
        }
        let mut sorted = node.neighbors.clone();
        sorted.sort_by_key(|(id, _)| *id);
        groups.push(sorted.len());
        for (_, n) in sorted {
            rows.extend_from_slice(node.center);
            rows.extend_from_slice(n);
        }
    }
    let count = rows.len() / (2 * d);
    let x = Array2::from_shape_vec((count, 2 * d), rows).expect("row-major batch");
    let (mask1, mask2) = match mode {
        Mode::Eval => (None, None),
        Mode::Train { dropout, rng } => {
            if !(0.0..1.0).contains(&dropout) {
                return Err(Error::InvalidInput(format!("dropout {dropout} outside [0, 1)")));
            }
            if dropout == 0.0 {
                (None, None)
            } else {
                let m1 = dropout_mask((count, 2 * d), dropout, rng);
                let m2 = dropout_mask((count, 2 * d), dropout, rng);
                (Some(m1), Some(m2))
            }
        }
    };
    let z1 = x.dot(&params.w1.t()) + &params.b1;
    let a1 = relu_masked(&z1, mask1.as_ref());
    let z2 = a1.dot(&params.w2.t()) + &params.b2;
    let a2 = relu_masked(&z2, mask2.as_ref());
    let messages = a2.dot(&params.w3.t()) + &params.b3;
    let mut out = Array2::zeros((nodes.len(), d));
    let mut start = 0;
    for (i, &g) in groups.iter().enumerate() {
        let mut acc = out.row_mut(i);
        for r in start..start + g {
            acc += &messages.row(r);
        }
        acc /= g as f64;
        start += g;
    }
    let tape = Tape {
        groups,
        x,
        z1,
        a1,
        z2,
        a2,
        mask1,
        mask2,
        used: false,
    };
    Ok((out, tape))
}

impl Tape {
    /// Parameter gradients for `dL/d(output)`.
    pub fn backward(&mut self, params: &GcnParams, grad_out: ArrayView2<f64>) -> Result<GcnParams> {
        if self.used {
            return Err(Error::DoubleBackward);
        }
        self.used = true;
        let d = params.dim();
        if grad_out.dim() != (self.groups.len(), d) {
            return Err(Error::Shape("output gradient does not match forward pass".into()));
        }
        // each message receives its node's adjoint divided by the node degree
        let mut g_msg = Array2::zeros((self.x.nrows(), d));
        let mut start = 0;
        for (i, &g) in self.groups.iter().enumerate() {
            let share = &grad_out.row(i) / g as f64;
            for r in start..start + g {
                g_msg.row_mut(r).assign(&share);
            }
            start += g;
        }
        let gw3 = g_msg.t().dot(&self.a2);
        let gb3 = g_msg.sum_axis(Axis(0));
        let mut gz2 = g_msg.dot(&params.w3);
        gz2.zip_mut_with(&self.z2, |g, z| {
            if *z <= 0.0 {
                *g = 0.0
            }
        });
        if let Some(m) = &self.mask2 {
            gz2 *= m;
        }
        let gw2 = gz2.t().dot(&self.a1);
        let gb2 = gz2.sum_axis(Axis(0));
        let mut gz1 = gz2.dot(&params.w2);
        gz1.zip_mut_with(&self.z1, |g, z| {
            if *z <= 0.0 {
                *g = 0.0
            }
        });
        if let Some(m) = &self.mask1 {
            gz1 *= m;
        }
        let gw1 = gz1.t().dot(&self.x);
        let gb1 = gz1.sum_axis(Axis(0));
        Ok(GcnParams {
            w1: gw1.as_standard_layout().into_owned(),
            b1: gb1,
            w2: gw2.as_standard_layout().into_owned(),
            b2: gb2,
            w3: gw3.as_standard_layout().into_owned(),
            b3: gb3,
        })
    }
}

/// `W3 relu(W2 relu(W1 [center; neighbor] + b1) + b2) + b3`, evaluation mode.
pub fn message(params: &GcnParams, center: &[f64], neighbor: &[f64]) -> Result<Vec<f64>> {
    gcn_forward(params, center, &[(0, neighbor)])
}

/// Mean of the messages from `neighbors`, evaluation mode.
pub fn gcn_forward(params: &GcnParams, center: &[f64], neighbors: &[(usize, &[f64])]) -> Result<Vec<f64>> {
    let node = Node {
        center,
        neighbors: neighbors.to_vec(),
    };
    let (out, _) = forward(params, &[node], Mode::Eval)?;
    Ok(out.row(0).to_vec())
}

fn attachment_nodes<'a>(bank: &'a FeatureBank, query: &'a QueryAttachment) -> Vec<Node<'a>> {
    (0..query.query.rows())
        .map(|r| Node {
            center: query.query.row(r),
            neighbors: query.neighbor_features(bank, r),
        })
        .collect()
}

fn to_feature(like: &RtfFeature, out: Array2<f64>) -> Result<RtfFeature> {
    RtfFeature::new(
        like.l_uncausal(),
        like.l_causal(),
        like.mics(),
        like.ref_index(),
        out.into_raw_vec_and_offset().0,
    )
}

/// Refined features of an attached query: one aggregation per microphone
/// with the noisy feature as center.
pub fn infer(params: &GcnParams, bank: &FeatureBank, query: &QueryAttachment) -> Result<RtfFeature> {
    params.check()?;
    if params.dim() != query.query.dim() || bank.dim() != params.dim() {
        return Err(Error::Shape(format!(
            "network dimension {} vs feature dimension {}",
            params.dim(),
            query.query.dim()
        )));
    }
    let (out, _) = forward(params, &attachment_nodes(bank, query), Mode::Eval)?;
    to_feature(&query.query, out)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: GcnParams,
    v: GcnParams,
    t: i32,
}

impl Adam {
    pub fn new(d: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: GcnParams::zeros(d),
            v: GcnParams::zeros(d),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut GcnParams, grads: &GcnParams, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let m_all = self.m.slices_mut();
        let v_all = self.v.slices_mut();
        for (((p, g), m), v) in params.slices_mut().into_iter().zip(grads.slices()).zip(m_all).zip(v_all) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Linear warmup to `peak` over the first `warmup` steps, then linear decay
/// to zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, warmup_ratio: f64, total: usize) -> Self {
        Self {
            peak,
            warmup: (warmup_ratio * total as f64).ceil() as usize,
            total,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            self.peak * step as f64 / self.warmup as f64
        } else if self.total > self.warmup {
            self.peak * (self.total.saturating_sub(step)) as f64 / (self.total - self.warmup) as f64
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub dropout_p: f64,
    pub seed: u64,
    pub loss: Objective,
    /// Examples whose gradients are averaged per optimizer step.
    pub batch_size: usize,
    /// Metric tracked on the validation set after every epoch.
    pub validation: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            warmup_ratio: 0.1,
            epochs: 100,
            dropout_p: 0.5,
            seed: 0,
            loss: Objective::Sisdr2,
            batch_size: 1,
            validation: Objective::Sisdr2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidInput(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::InvalidInput(format!("warmup_ratio {} outside [0, 1]", self.warmup_ratio)));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidInput("epochs, batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// A training or validation example: the attached noisy query and the data
/// its objective needs. Loss data may be built on demand to bound memory.
pub trait ExampleSet: Sync {
    fn len(&self) -> usize;
    fn attachment(&self, i: usize) -> &QueryAttachment;
    fn with_loss_example<T>(&self, i: usize, f: &mut dyn FnMut(&LossExample) -> Result<T>) -> Result<T>;
    /// Human-readable identity used in diagnostics.
    fn describe(&self, i: usize) -> String;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Examples held fully in memory.
pub struct InMemoryExamples {
    pub items: Vec<(QueryAttachment, LossExample)>,
}

impl ExampleSet for InMemoryExamples {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn attachment(&self, i: usize) -> &QueryAttachment {
        &self.items[i].0
    }

    fn with_loss_example<T>(&self, i: usize, f: &mut dyn FnMut(&LossExample) -> Result<T>) -> Result<T> {
        f(&self.items[i].1)
    }

    fn describe(&self, i: usize) -> String {
        format!("example {i}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training objective over the epoch, in its natural direction.
    pub train_objective: f64,
    pub validation: Option<f64>,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub steps: usize,
}

/// Mean validation objective of `params` over a set.
pub fn evaluate_set<S: ExampleSet>(params: &GcnParams, bank: &FeatureBank, set: &S, obj: Objective) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..set.len() {
        let refined = infer(params, bank, set.attachment(i))?;
        total += set.with_loss_example(i, &mut |ex| Ok(evaluate(obj, ex, &refined)?.value))?;
    }
    Ok(total / set.len() as f64)
}

/// Leave-one-out training with shared weights across microphones. Returns
/// the parameters of the best validation epoch (the last epoch without a
/// validation set) and the log.
pub fn train<S: ExampleSet, V: ExampleSet>(
    bank: &FeatureBank,
    train_set: &S,
    validation: Option<&V>,
    cfg: &TrainConfig,
) -> Result<(GcnParams, TrainLog)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let d = bank.dim();
    let mut params = GcnParams::he_uniform(d, derive_seed(cfg.seed, &[0x1417]));
    let mut adam = Adam::new(d);
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = LinearSchedule::new(cfg.learning_rate, cfg.warmup_ratio, cfg.epochs * steps_per_epoch);
    let mut step = 0;
    let mut log = TrainLog {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        steps: 0,
    };
    let mut best: Option<(f64, GcnParams)> = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5417, epoch as u64])));
        let mut objective_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = GcnParams::zeros(d);
            for &i in batch {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xd209, epoch as u64, i as u64]));
                let att = train_set.attachment(i);
                if att.query.dim() != d {
                    return Err(Error::Shape(format!("example feature dimension {} vs {d}", att.query.dim())));
                }
                let mode = Mode::Train {
                    dropout: cfg.dropout_p,
                    rng: &mut rng,
                };
                let (out, mut tape) = forward(&params, &attachment_nodes(bank, att), mode)?;
                let refined = to_feature(&att.query, out)?;
                let (value, grad) = train_set.with_loss_example(i, &mut |ex| value_and_grad(cfg.loss, ex, &refined))?;
                if !value.value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFiniteLoss(format!(
                        "{} at epoch {epoch}, step {step}: {} = {}",
                        train_set.describe(i),
                        cfg.loss.name(),
                        value.value
                    )));
                }
                objective_sum += value.value;
                let sign = if value.maximize { -1.0 } else { 1.0 };
                let g = Array2::from_shape_vec((att.query.rows(), d), grad.iter().map(|v| sign * v).collect())
                    .expect("feature layout");
                let grads = tape.backward(&params, g.view())?;
                acc.add_scaled(&grads, 1.0 / batch.len() as f64);
            }
            lr = schedule.lr(step);
            adam.step(&mut params, &acc, lr);
            step += 1;
        }
        let val = match validation {
            Some(v) if !v.is_empty() => Some(evaluate_set(&params, bank, v, cfg.validation)?),
            _ => None,
        };
        let entry = EpochLog {
            epoch,
            train_objective: objective_sum / n as f64,
            validation: val,
            learning_rate: lr,
        };
        info!(
            "epoch {epoch}: train {} {:.4}, validation {:?}",
            cfg.loss.name(),
            entry.train_objective,
            entry.validation
        );
        log.epochs.push(entry);
        let score = val.unwrap_or(f64::INFINITY);
        let better = match &best {
            None => true,
            Some((b, _)) => val.is_none() || score > *b,
        };
        if better {
            best = Some((score, params.clone()));
            log.best_epoch = epoch;
        }
    }
    log.steps = step;
    Ok((best.expect("at least one epoch").1, log))
}

/// Metadata stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub loss: Objective,
    pub seed: u64,
    pub epoch: usize,
}

pub fn checkpoint_container(params: &GcnParams, meta: &CheckpointMeta) -> Result<TensorContainer> {
    params.check()?;
    if meta.d != params.dim() {
        return Err(Error::Shape(format!("metadata d = {} for a d = {} network", meta.d, params.dim())));
    }
    let mut c = TensorContainer::new();
    for ((name, shape), data) in PARAM_NAMES.iter().zip(GcnParams::shapes(meta.d)).zip(params.slices()) {
        c.insert_f64(name, shape, data.to_vec())?;
    }
    let Value::Object(mut map) = serde_json::to_value(meta)? else {
        unreachable!("struct serializes to an object")
    };
    map.insert("schema_version".into(), CHECKPOINT_SCHEMA.into());
    c.metadata = map;
    Ok(c)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &GcnParams, meta: &CheckpointMeta) -> Result<()> {
    checkpoint_container(params, meta)?.save(path)
}

pub fn checkpoint_from_container(c: &TensorContainer) -> Result<(GcnParams, CheckpointMeta)> {
    let mut meta_map = c.metadata.clone();
    let version = meta_map
        .remove("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("checkpoint lacks schema_version".into()))?;
    if version != CHECKPOINT_SCHEMA as u64 {
        return Err(Error::Format(format!("checkpoint schema {version} is not {CHECKPOINT_SCHEMA}")));
    }
    let meta: CheckpointMeta = serde_json::from_value(Value::Object(meta_map))?;
    let d = meta.d;
    let mut params = GcnParams::zeros(d);
    for ((name, shape), dst) in PARAM_NAMES.iter().zip(GcnParams::shapes(d)).zip(params.slices_mut()) {
        dst.copy_from_slice(c.f64_array(name, &shape)?);
    }
    params.check()?;
    Ok((params, meta))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(GcnParams, CheckpointMeta)> {
    checkpoint_from_container(&TensorContainer::load(path)?)
}
