//! Lion with parameter groups, warmup + cosine schedule, and the sharded
//! training step.
//!
//! A step runs in three phases. Each simulated device embeds its slice of
//! the batch on its own tape. A central tape gathers those rows as leaves
//! and evaluates the chunked losses. Its row gradients are then pushed back
//! through every shard tape, and parameter gradients are summed in device
//! order before one optimizer update.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{coalesce_descriptive_text, coalesce_keyword_text, BatchPlan, Corpus, TextSignal};
use crate::encoders::TextBatch;
use crate::error::{Error, Result};
use crate::graph::{Pair, PinId};
use crate::model::{BoundModel, Model};
use crate::objectives::{total_loss, LossConfig, LossTerms, PairInputs};
use crate::params::{Bound, Group, ModelParams};
use crate::provenance::Provenance;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// How a group's parameters move given their gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    /// `θ -= lr·(sign(β1·m + (1-β1)·g) + λ·θ)`.
    #[default]
    Lion,
    /// `θ -= lr·(g + λ·θ)`; the betas are ignored.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerGroupConfig {
    pub rule: UpdateRule,
    pub lr_mult: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl OptimizerGroupConfig {
    pub fn new(lr_mult: f64, weight_decay: f64) -> Self {
        Self {
            rule: UpdateRule::Lion,
            lr_mult,
            weight_decay,
            beta1: 0.9,
            beta2: 0.99,
        }
    }

    pub fn validate(&self, group: Group) -> Result<()> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr_mult > 0.0) || !(self.weight_decay >= 0.0) || !beta_ok(self.beta1) || !beta_ok(self.beta2) {
            return Err(Error::Config(format!(
                "optimizer group {group}: need lr_mult > 0, weight_decay ≥ 0 and betas in [0, 1)"
            )));
        }
        Ok(())
    }
}

/// Per-group optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub image: OptimizerGroupConfig,
    pub text: OptimizerGroupConfig,
    pub fusion: OptimizerGroupConfig,
    pub loss: OptimizerGroupConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            image: OptimizerGroupConfig::new(1.0, 5e-4),
            text: OptimizerGroupConfig::new(0.1, 0.5),
            fusion: OptimizerGroupConfig::new(1.0, 5e-4),
            loss: OptimizerGroupConfig::new(50.0, 0.0),
        }
    }
}

impl OptimizerConfig {
    pub fn group(&self, g: Group) -> &OptimizerGroupConfig {
        match g {
            Group::Image => &self.image,
            Group::Text => &self.text,
            Group::Fusion => &self.fusion,
            Group::Loss => &self.loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        Group::ALL.iter().try_for_each(|&g| self.group(g).validate(g))
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    pub fn lr_at_step(&self, step: u64) -> Result<f64> {
        self.validate()?;
        if step > self.total_steps {
            return Err(Error::Precondition(format!(
                "step {step} is past total_steps {}",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// First moments, one per trainable parameter. Locked parameters hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct LionState {
    pub m: Vec<Option<Tensor>>,
}

impl LionState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params
                .iter()
                .map(|(_, p)| (!p.locked).then(|| Tensor::zeros(p.value.shape())))
                .collect(),
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `u = sign(β1 m + (1 − β1) g)`, `θ ← θ − lr_g (u + λ θ)`, `m ← β2 m + (1 − β2) g`.
pub fn lion_step(
    params: &mut ModelParams,
    grads: &[Option<Tensor>],
    state: &mut LionState,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Precondition(format!(
            "{} params but {} gradients and {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = params.get_mut(id);
        if p.locked {
            continue;
        }
        let g = grads[id.index()]
            .as_ref()
            .ok_or_else(|| Error::Precondition(format!("no gradient for trainable parameter {}", p.name)))?;
        if g.shape() != p.value.shape() {
            return Err(Error::Precondition(format!(
                "gradient shape {:?} does not match {} {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            )));
        }
        let gc = cfg.group(p.group);
        let lr_g = lr * gc.lr_mult;
        let m = state.m[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
        match gc.rule {
            UpdateRule::Lion => {
                for ((theta, m), &g) in p.value.data_mut().iter_mut().zip(m.data_mut()).zip(g.data()) {
                    let u = sign(gc.beta1 * *m + (1.0 - gc.beta1) * g);
                    *theta -= lr_g * (u + gc.weight_decay * *theta);
                    *m = gc.beta2 * *m + (1.0 - gc.beta2) * g;
                }
            }
            UpdateRule::Sgd => {
                for (theta, &g) in p.value.data_mut().iter_mut().zip(g.data()) {
                    *theta -= lr_g * (g + gc.weight_decay * *theta);
                }
            }
        }
    }
    Ok(())
}

/// Learning rate each parameter actually receives at base rate `lr`.
/// Locked parameters get zero.
pub fn effective_lrs(params: &ModelParams, cfg: &OptimizerConfig, lr: f64) -> Vec<(String, f64)> {
    params
        .iter()
        .map(|(_, p)| {
            let r = if p.locked { 0.0 } else { lr * cfg.group(p.group).lr_mult };
            (p.name.clone(), r)
        })
        .collect()
}

/// Both objectives every step, or one at a time on alternating steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    Joint,
    Alternate,
}

impl StepMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "joint" => Some(Self::Joint),
            "alternate" => Some(Self::Alternate),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub i2t_batch: usize,
    pub p2p_batch: usize,
    pub devices: usize,
    pub save_every: u64,
    pub mode: StepMode,
    pub text_signal: TextSignal,
    /// Global gradient-norm clip; `None` leaves gradients untouched.
    pub clip_grad_norm: Option<f64>,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
}

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 {
            self.schedule().validate()?;
        }
        self.optimizer.validate()?;
        if self.devices == 0 {
            return Err(Error::Config("devices must be at least 1".into()));
        }
        if !self.loss.i2t && !self.loss.p2p {
            return Err(Error::Config("enable at least one of loss.i2t and loss.p2p".into()));
        }
        if self.loss.i2t && self.i2t_batch == 0 || self.loss.p2p && self.p2p_batch == 0 {
            return Err(Error::Config("an enabled objective needs a nonzero batch".into()));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_grad_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Batch plan over `data`, with disabled objectives given zero batches.
    pub fn plan(&self, data: &TrainingData, seed: u64) -> Result<BatchPlan> {
        let i2t = if self.loss.i2t { self.i2t_batch } else { 0 };
        let p2p = if self.loss.p2p { self.p2p_batch } else { 0 };
        BatchPlan::new(data.i2t_rows.len(), data.pairs.len(), i2t, p2p, self.devices, seed)
    }

    /// Objectives evaluated at `step`.
    fn active(&self, step: u64) -> (bool, bool) {
        match self.mode {
            StepMode::Alternate if self.loss.i2t && self.loss.p2p => (step % 2 == 0, step % 2 == 1),
            _ => (self.loss.i2t, self.loss.p2p),
        }
    }
}

/// Training corpus flattened into row-indexed arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub images: Vec<Vec<f64>>,
    pub descriptive: Vec<String>,
    pub keyword: Vec<String>,
    /// Rows that take part in the image-text objective.
    pub i2t_rows: Vec<usize>,
    /// (query row, positive row) neighbor pairs.
    pub pairs: Vec<(usize, usize)>,
}

impl TrainingData {
    /// `i2t_ids` restricts the image-text objective to the listed pins
    /// (the alignment-filter survivors); `None` keeps every pin.
    pub fn new(corpus: &Corpus, pairs: &[Pair], i2t_ids: Option<&[PinId]>) -> Result<Self> {
        let row = |id: PinId| {
            corpus
                .position(id)
                .ok_or_else(|| Error::Precondition(format!("pin {id} is not in the corpus")))
        };
        let i2t_rows = match i2t_ids {
            Some(ids) => ids.iter().map(|&id| row(id)).collect::<Result<_>>()?,
            None => (0..corpus.len()).collect(),
        };
        let pairs = pairs
            .iter()
            .map(|p| Ok((row(p.query)?, row(p.positive)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            images: corpus.pins.iter().map(|p| p.image.clone()).collect(),
            descriptive: corpus.pins.iter().map(coalesce_descriptive_text).collect(),
            keyword: corpus.pins.iter().map(coalesce_keyword_text).collect(),
            i2t_rows,
            pairs,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub lion: LionState,
    /// Number of completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let lion = LionState::new(&model.params);
        Self { model, lion, step: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub l_i2t: Option<f64>,
    pub l_p2p: Option<f64>,
    pub t: f64,
    pub c: f64,
    pub grad_norm: f64,
}

/// One device's forward pass and the rows it produced.
struct Shard {
    tape: Tape,
    p: Bound,
    outputs: Vec<(Slot, Var)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    X,
    Y,
    U,
    V,
}

const SLOTS: [Slot; 4] = [Slot::X, Slot::Y, Slot::U, Slot::V];

fn shard_forward(
    model: &Model,
    data: &TrainingData,
    i2t_rows: &[usize],
    pair_rows: &[(usize, usize)],
    keyword: bool,
) -> Result<Shard> {
    let mut tape = Tape::new();
    let bm = model.bind(&mut tape)?;
    let mut outputs = Vec::new();
    if !i2t_rows.is_empty() {
        let grids: Vec<&[f64]> = i2t_rows.iter().map(|&r| data.images[r].as_slice()).collect();
        let source = if keyword { &data.keyword } else { &data.descriptive };
        let texts: Vec<&str> = i2t_rows.iter().map(|&r| source[r].as_str()).collect();
        let batch = TextBatch::from_texts(&texts, &model.config.text);
        let v = bm.image_tokens(&mut tape, &grids)?;
        let x = bm.image_embedding(&mut tape, v)?;
        let s = bm.text_tokens(&mut tape, &batch)?;
        let y = bm.text_embedding(&mut tape, s, &batch)?;
        outputs.push((Slot::X, x));
        outputs.push((Slot::Y, y));
    }
    if !pair_rows.is_empty() {
        for (slot, pick) in [(Slot::U, 0), (Slot::V, 1)] {
            let rows: Vec<usize> = pair_rows.iter().map(|&(q, p)| if pick == 0 { q } else { p }).collect();
            let grids: Vec<&[f64]> = rows.iter().map(|&r| data.images[r].as_slice()).collect();
            let texts: Vec<&str> = rows.iter().map(|&r| data.descriptive[r].as_str()).collect();
            let batch = TextBatch::from_texts(&texts, &model.config.text);
            let f = bm.fused(&mut tape, &grids, &batch)?;
            outputs.push((slot, f));
        }
    }
    Ok(Shard {
        tape,
        p: bm.p,
        outputs,
    })
}

/// Stacks the `slot` rows of every shard, in device order.
fn gather(shards: &[Shard], slot: Slot) -> Result<Option<Tensor>> {
    let mut rows = Vec::new();
    let mut width = 0;
    for s in shards {
        for &(sl, v) in &s.outputs {
            if sl == slot {
                let t = s.tape.value(v);
                width = t.shape()[1];
                rows.extend_from_slice(t.data());
            }
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    Ok(Some(Tensor::new([rows.len() / width, width], rows)?))
}

fn add_into(acc: &mut Option<Tensor>, g: &[f64], shape: &[usize]) {
    let acc = acc.get_or_insert_with(|| Tensor::zeros(shape));
    acc.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

fn diverged(step: u64, model: &Model, grad_norm: f64) -> Error {
    let (t, c) = model.scalar_values(model.i2t_scalars);
    Error::Diverged { step, t, c, grad_norm }
}

/// The step's total loss on one tape, with no sharding of the embedding
/// passes. The sharded step must reproduce its gradients.
pub fn single_tape_loss(
    tape: &mut Tape,
    bm: &BoundModel<'_>,
    data: &TrainingData,
    i2t_rows: &[usize],
    pair_rows: &[(usize, usize)],
    keyword: bool,
    loss: &LossConfig,
    devices: usize,
) -> Result<LossTerms> {
    let model = bm.model;
    let i2t = if i2t_rows.is_empty() {
        None
    } else {
        let grids: Vec<&[f64]> = i2t_rows.iter().map(|&r| data.images[r].as_slice()).collect();
        let source = if keyword { &data.keyword } else { &data.descriptive };
        let texts: Vec<&str> = i2t_rows.iter().map(|&r| source[r].as_str()).collect();
        let batch = TextBatch::from_texts(&texts, &model.config.text);
        let v = bm.image_tokens(tape, &grids)?;
        let x = bm.image_embedding(tape, v)?;
        let s = bm.text_tokens(tape, &batch)?;
        let y = bm.text_embedding(tape, s, &batch)?;
        let (t, c) = bm.scalars(model.i2t_scalars);
        Some(PairInputs { x, y, t, c })
    };
    let p2p = if pair_rows.is_empty() {
        None
    } else {
        let mut fused = Vec::with_capacity(2);
        for pick in [0, 1] {
            let rows: Vec<usize> = pair_rows.iter().map(|&(q, p)| if pick == 0 { q } else { p }).collect();
            let grids: Vec<&[f64]> = rows.iter().map(|&r| data.images[r].as_slice()).collect();
            let texts: Vec<&str> = rows.iter().map(|&r| data.descriptive[r].as_str()).collect();
            let batch = TextBatch::from_texts(&texts, &model.config.text);
            fused.push(bm.fused(tape, &grids, &batch)?);
        }
        let (t, c) = bm.scalars(model.p2p_scalars);
        Some(PairInputs { x: fused[0], y: fused[1], t, c })
    };
    total_loss(tape, loss, i2t, p2p, &bm.mrl_heads(), devices)
}

/// Losses and reduced parameter gradients of one step, before clipping.
#[derive(Debug, Clone)]
pub struct StepGradients {
    /// Indexed like the model parameters; `None` exactly for locked ones.
    pub grads: Vec<Option<Tensor>>,
    pub loss: f64,
    pub l_i2t: Option<f64>,
    pub l_p2p: Option<f64>,
}

impl StepGradients {
    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Sharded forward and backward for the batch of `step`.
pub fn step_gradients(
    model: &Model,
    data: &TrainingData,
    cfg: &TrainConfig,
    plan: &BatchPlan,
    step: u64,
) -> Result<StepGradients> {
    let (use_i2t, use_p2p) = cfg.active(step);
    let (i2t_idx, p2p_idx) = plan.step(step);
    let i2t_rows: Vec<usize> = if use_i2t { i2t_idx.iter().map(|&i| data.i2t_rows[i]).collect() } else { Vec::new() };
    let pair_rows: Vec<(usize, usize)> = if use_p2p { p2p_idx.iter().map(|&i| data.pairs[i]).collect() } else { Vec::new() };
    let d = cfg.devices;
    let keyword = cfg.text_signal.keyword_at(step);

    let mut shards = Vec::with_capacity(d);
    for dev in 0..d {
        let part = |n: usize| (n / d * dev, n / d * (dev + 1));
        let (a, b) = part(i2t_rows.len());
        let (pa, pb) = part(pair_rows.len());
        shards.push(shard_forward(model, data, &i2t_rows[a..b], &pair_rows[pa..pb], keyword)?);
    }

    // central tape: gathered rows plus the loss-side parameters
    let mut ct = Tape::new();
    let mut rows: [Option<Var>; 4] = [None; 4];
    for (i, &slot) in SLOTS.iter().enumerate() {
        if let Some(t) = gather(&shards, slot)? {
            rows[i] = Some(ct.leaf(t, true)?);
        }
    }
    let mut central: Vec<(usize, Var)> = Vec::new();
    let mut leaf = |ct: &mut Tape, id: crate::params::ParamId| -> Result<Var> {
        if let Some(&(_, v)) = central.iter().find(|(i, _)| *i == id.index()) {
            return Ok(v);
        }
        let p = model.params.get(id);
        let v = ct.leaf(p.value.clone(), !p.locked)?;
        central.push((id.index(), v));
        Ok(v)
    };
    let (t1, c1) = (leaf(&mut ct, model.i2t_scalars.t)?, leaf(&mut ct, model.i2t_scalars.c)?);
    let (t2, c2) = (leaf(&mut ct, model.p2p_scalars.t)?, leaf(&mut ct, model.p2p_scalars.c)?);
    let heads = model
        .mrl_heads
        .iter()
        .map(|&(k, id)| Ok((k, leaf(&mut ct, id)?)))
        .collect::<Result<Vec<_>>>()?;
    let pair = |x: Option<Var>, y: Option<Var>, t, c| Some(PairInputs { x: x?, y: y?, t, c });
    let terms = total_loss(
        &mut ct,
        &cfg.loss,
        pair(rows[0], rows[1], t1, c1),
        pair(rows[2], rows[3], t2, c2),
        &heads,
        d,
    )?;
    let loss = ct.value(terms.total).item();
    if !loss.is_finite() {
        return Err(diverged(step, model, f64::NAN));
    }
    ct.backward(terms.total)?;

    // reduce parameter gradients in device order, then the central ones
    let mut grads: Vec<Option<Tensor>> = vec![None; model.params.len()];
    let mut offsets = [0usize; 4];
    for shard in &mut shards {
        let mut seeds = Vec::with_capacity(shard.outputs.len());
        for &(slot, v) in &shard.outputs {
            let i = SLOTS.iter().position(|&s| s == slot).expect("known slot");
            let g = ct.grad(rows[i].expect("gathered")).expect("row leaves require grad");
            let shape = shard.tape.shape(v).to_vec();
            let n = shape.iter().product::<usize>();
            seeds.push((v, Tensor::new(shape, g[offsets[i]..offsets[i] + n].to_vec())?));
            offsets[i] += n;
        }
        if seeds.is_empty() {
            continue;
        }
        shard.tape.backward_from(&seeds)?;
        for (id, p) in model.params.iter() {
            if p.locked {
                continue;
            }
            if let Some(g) = shard.tape.grad(shard.p.var(id)) {
                add_into(&mut grads[id.index()], g, p.value.shape());
            }
        }
    }
    for &(idx, v) in &central {
        if let Some(g) = ct.grad(v) {
            let shape = ct.shape(v).to_vec();
            add_into(&mut grads[idx], g, &shape);
        }
    }
    // trainable parameters outside this step's graph get zero gradient
    for (id, p) in model.params.iter() {
        if !p.locked && grads[id.index()].is_none() {
            grads[id.index()] = Some(Tensor::zeros(p.value.shape()));
        }
    }

    Ok(StepGradients {
        grads,
        loss,
        l_i2t: terms.i2t.map(|v| ct.value(v).item()),
        l_p2p: terms.p2p.map(|v| ct.value(v).item()),
    })
}

/// Forward, backward and one optimizer update at `state.step`.
pub fn train_step(
    state: &mut TrainState,
    data: &TrainingData,
    cfg: &TrainConfig,
    plan: &BatchPlan,
) -> Result<StepMetrics> {
    let step = state.step;
    let lr = cfg.schedule().lr_at_step(step)?;
    let sg = match step_gradients(&state.model, data, cfg, plan, step) {
        Err(Error::Tensor(TensorError::NonFinite { .. })) => return Err(diverged(step, &state.model, f64::NAN)),
        r => r?,
    };
    let grad_norm = sg.norm();
    let StepGradients {
        mut grads,
        loss,
        l_i2t,
        l_p2p,
    } = sg;
    if !grad_norm.is_finite() {
        return Err(diverged(step, &state.model, grad_norm));
    }
    if let Some(clip) = cfg.clip_grad_norm {
        if grad_norm > clip {
            let s = clip / grad_norm;
            grads.iter_mut().flatten().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
        }
    }
    lion_step(&mut state.model.params, &grads, &mut state.lion, &cfg.optimizer, lr)?;
    state.step += 1;
    let (t, c) = state.model.scalar_values(state.model.i2t_scalars);
    Ok(StepMetrics {
        step,
        lr,
        loss,
        l_i2t,
        l_p2p,
        t,
        c,
        grad_norm,
    })
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub metrics: Option<&'a Path>,
    pub provenance: Provenance,
}

/// Continues `state` up to `cfg.steps`, saving a checkpoint every
/// `save_every` steps and at the end. Metrics lines are appended when the
/// run resumes past step 0.
pub fn run_training(
    state: &mut TrainState,
    data: &TrainingData,
    cfg: &TrainConfig,
    seed: u64,
    out: &RunOutputs<'_>,
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    if state.step > cfg.steps {
        return Err(Error::Precondition(format!(
            "checkpoint is at step {} but the run has only {} steps",
            state.step, cfg.steps
        )));
    }
    let plan = if state.step < cfg.steps { Some(cfg.plan(data, seed)?) } else { None };
    let mut log = match out.metrics {
        Some(path) => {
            let file = if state.step == 0 {
                File::create(path)
            } else {
                fs::OpenOptions::new().append(true).create(true).open(path)
            }
            .map_err(Error::io(path))?;
            let mut w = BufWriter::new(file);
            if state.step == 0 {
                writeln!(w, "{}", out.provenance.header_line()).map_err(Error::io(path))?;
            }
            Some((path, w))
        }
        None => None,
    };
    let save = |state: &TrainState| -> Result<()> {
        match out.checkpoint {
            Some(path) => Checkpoint::capture(state, &out.provenance).write(path),
            None => Ok(()),
        }
    };
    let mut history = Vec::new();
    while state.step < cfg.steps {
        let m = train_step(state, data, cfg, plan.as_ref().expect("steps remain"))?;
        if let Some((path, w)) = log.as_mut() {
            let line = serde_json::to_string(&m).map_err(|e| Error::format(*path, e.to_string()))?;
            writeln!(w, "{line}").map_err(Error::io(*path))?;
        }
        history.push(m);
        if cfg.save_every > 0 && state.step % cfg.save_every == 0 && state.step < cfg.steps {
            save(state)?;
        }
    }
    if let Some((path, mut w)) = log {
        w.flush().map_err(Error::io(path))?;
    }
    save(state)?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, LatentTopicSpec};
    use crate::graph::{build_neighbor_cache, sample_pairs, SampleMode, WalkParams};
    use crate::model::{Component, ModelConfig};
    use crate::objectives::MrlConfig;
    use proptest::prelude::*;

    fn fixture(seed: u64) -> (Model, TrainingData, TrainConfig) {
        let mc = ModelConfig::tiny();
        let spec = LatentTopicSpec {
            topics: 2,
            pins_per_topic: 8,
            boards_per_topic: 2,
            heldout_pins: 0,
            patches: mc.image.patches,
            d_in: mc.image.d_in,
            ..LatentTopicSpec::default()
        };
        let corpus = generate_synthetic_corpus(&spec, seed).unwrap().train;
        let walks = WalkParams { walk_count: 50, ..WalkParams::default() };
        let cache = build_neighbor_cache(&corpus.graph(), 5, &walks, seed).unwrap();
        let pairs = sample_pairs(&cache, 2, SampleMode::Weighted, seed).unwrap();
        let data = TrainingData::new(&corpus, &pairs, None).unwrap();
        let cfg = TrainConfig {
            steps: 10,
            warmup_steps: 2,
            base_lr: 1e-3,
            i2t_batch: 8,
            p2p_batch: 8,
            devices: 4,
            save_every: 0,
            mode: StepMode::Joint,
            text_signal: TextSignal::AlternatePerStep,
            clip_grad_norm: None,
            loss: LossConfig {
                i2t: true,
                p2p: true,
                mrl: Some(MrlConfig::default_for(mc.d_model)),
            },
            optimizer: OptimizerConfig::default(),
        };
        (Model::new(&mc, seed).unwrap(), data, cfg)
    }

    fn run(model: Model, data: &TrainingData, cfg: &TrainConfig, steps: u64) -> (TrainState, Vec<StepMetrics>) {
        let mut state = TrainState::new(model);
        let plan = cfg.plan(data, 11).unwrap();
        let metrics = (0..steps).map(|_| train_step(&mut state, data, cfg, &plan).unwrap()).collect();
        (state, metrics)
    }

    fn one_param(value: f64, group: Group) -> ModelParams {
        let mut p = ModelParams::new();
        p.register("w", group, None, Tensor::scalar(value));
        p
    }

    fn cfg_with(group: OptimizerGroupConfig) -> OptimizerConfig {
        OptimizerConfig {
            image: group,
            text: group,
            fusion: group,
            loss: group,
        }
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule { base_lr: 2e-4, warmup_steps: 100, total_steps: 300 };
        assert_eq!(s.lr_at_step(0).unwrap(), 0.0);
        assert_eq!(s.lr_at_step(100).unwrap(), 2e-4);
        assert!((s.lr_at_step(200).unwrap() - 1e-4).abs() < 1e-18);
        assert!(s.lr_at_step(300).unwrap().abs() < 1e-15);
        assert!(s.lr_at_step(301).is_err());
        assert!(Schedule { warmup_steps: 300, ..s }.lr_at_step(0).is_err());
    }

    proptest! {
        #[test]
        fn schedule_shape(warmup in 0u64..50, extra in 1u64..200, base in 1e-5f64..1e-1) {
            let s = Schedule { base_lr: base, warmup_steps: warmup, total_steps: warmup + extra };
            let lrs: Vec<f64> = (0..=s.total_steps).map(|k| s.lr_at_step(k).unwrap()).collect();
            prop_assert_eq!(lrs[warmup as usize], base);
            prop_assert!(lrs.iter().all(|&l| (0.0..=base).contains(&l)));
            prop_assert!(lrs[s.total_steps as usize] <= 1e-15);
            let slope = base * (1.0 / warmup.max(1) as f64).max(std::f64::consts::PI / 2.0 / extra as f64);
            prop_assert!(lrs.windows(2).all(|w| (w[1] - w[0]).abs() <= slope * (1.0 + 1e-12)));
            prop_assert!(lrs[..=warmup as usize].windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(lrs[warmup as usize..].windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn lion_hand_examples() {
        let cfg = cfg_with(OptimizerGroupConfig::new(1.0, 0.0));
        let mut p = one_param(0.0, Group::Fusion);
        let mut st = LionState::new(&p);
        lion_step(&mut p, &[Some(Tensor::scalar(1.0))], &mut st, &cfg, 0.1).unwrap();
        assert_eq!(p.value(crate::params::ParamId(0)).item(), -0.1);
        assert!((st.m[0].as_ref().unwrap().item() - 0.01).abs() < 1e-17);

        // zero gradient and zero moment: only the decay term acts
        let cfg = cfg_with(OptimizerGroupConfig::new(1.0, 0.5));
        let mut p = one_param(1.0, Group::Image);
        let mut st = LionState::new(&p);
        lion_step(&mut p, &[Some(Tensor::scalar(0.0))], &mut st, &cfg, 0.1).unwrap();
        assert_eq!(p.value(crate::params::ParamId(0)).item(), 0.95);
        assert_eq!(st.m[0].as_ref().unwrap().item(), 0.0);
    }

    #[test]
    fn sgd_rule_steps_along_the_gradient() {
        let group = OptimizerGroupConfig { rule: UpdateRule::Sgd, ..OptimizerGroupConfig::new(100.0, 0.5) };
        let mut p = one_param(2.0, Group::Loss);
        let mut st = LionState::new(&p);
        lion_step(&mut p, &[Some(Tensor::scalar(-3.0))], &mut st, &cfg_with(group), 0.01).unwrap();
        assert_eq!(p.value(crate::params::ParamId(0)).item(), 2.0 - 1.0 * (-3.0 + 0.5 * 2.0));
        assert_eq!(st.m[0].as_ref().unwrap().item(), 0.0);
    }

    #[test]
    fn lion_uses_group_settings_and_skips_locked() {
        let mut p = ModelParams::new();
        let a = p.register("a", Group::Image, None, Tensor::scalar(1.0));
        let b = p.register("b", Group::Text, None, Tensor::scalar(1.0));
        let c = p.register("c", Group::Fusion, None, Tensor::scalar(1.0));
        p.get_mut(c).locked = true;
        let cfg = OptimizerConfig::default();
        let mut st = LionState::new(&p);
        assert!(st.m[c.index()].is_none());
        let g = vec![Some(Tensor::scalar(-2.0)), Some(Tensor::scalar(-2.0)), None];
        lion_step(&mut p, &g, &mut st, &cfg, 0.01).unwrap();
        assert_eq!(p.value(a).item(), 1.0 - 0.01 * (-1.0 + 5e-4));
        assert_eq!(p.value(b).item(), 1.0 - 0.001 * (-1.0 + 0.5));
        assert_eq!(p.value(c).item(), 1.0);
        assert!(st.m[c.index()].is_none());

        let missing = vec![Some(Tensor::scalar(1.0)), None, None];
        assert!(matches!(lion_step(&mut p, &missing, &mut st, &cfg, 0.01), Err(Error::Precondition(_))));
    }

    #[test]
    fn decay_is_decoupled_across_groups() {
        let cfg = OptimizerConfig {
            image: OptimizerGroupConfig::new(1.0, 0.0),
            ..OptimizerConfig::default()
        };
        let update = |other: f64| {
            let mut p = ModelParams::new();
            let a = p.register("a", Group::Image, None, Tensor::new([2], vec![0.3, -0.7]).unwrap());
            p.register("b", Group::Text, None, Tensor::full([2], other));
            let mut st = LionState::new(&p);
            let g = vec![Some(Tensor::new([2], vec![0.5, 0.0]).unwrap()), Some(Tensor::full([2], 1.0))];
            lion_step(&mut p, &g, &mut st, &cfg, 0.05).unwrap();
            p.value(a).data().to_vec()
        };
        assert_eq!(update(1.0), update(1000.0));
        assert_eq!(update(1.0), vec![0.3 - 0.05, -0.7]);
    }

    #[test]
    fn text_params_get_a_tenth_of_the_rate() {
        let model = Model::new(&ModelConfig::tiny(), 1).unwrap();
        let cfg = OptimizerConfig::default();
        let lrs = effective_lrs(&model.params, &cfg, 2e-4);
        for ((_, p), (name, lr)) in model.params.iter().zip(&lrs) {
            assert_eq!(&p.name, name);
            if p.group == Group::Text {
                assert_eq!(*lr, 2e-4 * 0.1, "{name}");
            }
        }
        assert!(lrs.iter().any(|(n, _)| n.starts_with("text.")));
    }

    #[test]
    fn sharded_gradients_match_single_tape() {
        let (model, data, cfg) = fixture(2);
        let plan = cfg.plan(&data, 5).unwrap();
        let sg = step_gradients(&model, &data, &cfg, &plan, 1).unwrap();

        let (i2t_idx, p2p_idx) = plan.step(1);
        let i2t: Vec<usize> = i2t_idx.iter().map(|&i| data.i2t_rows[i]).collect();
        let pairs: Vec<(usize, usize)> = p2p_idx.iter().map(|&i| data.pairs[i]).collect();
        let mut tape = Tape::new();
        let bm = model.bind(&mut tape).unwrap();
        let terms = single_tape_loss(&mut tape, &bm, &data, &i2t, &pairs, true, &cfg.loss, 1).unwrap();
        let loss = tape.value(terms.total).item();
        assert!((loss - sg.loss).abs() <= 1e-12 * loss.abs());
        tape.backward(terms.total).unwrap();
        for (id, p) in model.params.iter() {
            let want = tape.grad(bm.p.var(id)).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.value.numel()]);
            let got = sg.grads[id.index()].as_ref().unwrap();
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{}: {a} vs {b}", p.name);
            }
        }
    }

    #[test]
    fn device_count_does_not_change_the_trajectory() {
        let (model, data, cfg) = fixture(3);
        let runs: Vec<_> = [1, 2, 4]
            .iter()
            .map(|&d| run(model.clone(), &data, &TrainConfig { devices: d, ..cfg.clone() }, 5))
            .collect();
        let (base, base_m) = &runs[0];
        for (state, metrics) in &runs[1..] {
            for (a, b) in metrics.iter().zip(base_m) {
                assert!((a.loss - b.loss).abs() <= 1e-12 * b.loss.abs());
            }
            for ((_, p), (_, q)) in state.model.params.iter().zip(base.model.params.iter()) {
                for (x, y) in p.value.data().iter().zip(q.value.data()) {
                    assert!((x - y).abs() <= 1e-9, "{}", p.name);
                }
            }
        }
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let (model, data, cfg) = fixture(4);
        let (a, ma) = run(model.clone(), &data, &cfg, 10);
        let (b, mb) = run(model, &data, &cfg, 10);
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(ma, mb);
    }

    #[test]
    fn locked_image_encoder_is_bitwise_constant() {
        let (mut model, data, cfg) = fixture(5);
        let total = model.config.image.total_layers();
        model.set_locked_layers(Component::Image, total).unwrap();
        let before = model.params.clone();
        let (state, _) = run(model, &data, &cfg, 10);
        let mut changed_other = false;
        for ((id, p), (_, q)) in state.model.params.iter().zip(before.iter()) {
            if p.group == Group::Image {
                assert!(p.locked);
                assert_eq!(p.value, q.value, "{}", p.name);
                assert!(state.lion.m[id.index()].is_none());
            } else {
                changed_other |= p.value != q.value;
            }
        }
        assert!(changed_other);
    }

    #[test]
    fn locked_params_get_no_gradient_buffer() {
        let (mut model, data, cfg) = fixture(5);
        model.set_locked_layers(Component::Text, 1).unwrap();
        let plan = cfg.plan(&data, 1).unwrap();
        let sg = step_gradients(&model, &data, &cfg, &plan, 0).unwrap();
        for (id, p) in model.params.iter() {
            assert_eq!(sg.grads[id.index()].is_none(), p.locked, "{}", p.name);
        }
    }

    #[test]
    fn alternate_mode_switches_objectives() {
        let (model, data, cfg) = fixture(6);
        let cfg = TrainConfig { mode: StepMode::Alternate, ..cfg };
        let (_, m) = run(model, &data, &cfg, 2);
        assert!(m[0].l_i2t.is_some() && m[0].l_p2p.is_none());
        assert!(m[1].l_i2t.is_none() && m[1].l_p2p.is_some());
    }

    #[test]
    fn non_finite_loss_reports_the_step() {
        let (mut model, data, cfg) = fixture(7);
        let t = model.i2t_scalars.t;
        model.params.get_mut(t).value = Tensor::scalar(f64::MAX);
        let mut state = TrainState::new(model);
        let plan = cfg.plan(&data, 1).unwrap();
        let err = train_step(&mut state, &data, &cfg, &plan).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
    }

    #[test]
    fn zero_steps_checkpoint_is_the_initialization() {
        let (model, data, cfg) = fixture(8);
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("model.pckpt");
        let cfg = TrainConfig { steps: 0, warmup_steps: 0, ..cfg };
        let mut state = TrainState::new(model.clone());
        let out = RunOutputs { checkpoint: Some(&ck), ..RunOutputs::default() };
        assert!(run_training(&mut state, &data, &cfg, 1, &out).unwrap().is_empty());
        assert_eq!(Checkpoint::read(&ck).unwrap().restore().unwrap().model.params, model.params);
    }

    #[test]
    fn resume_matches_an_uninterrupted_run() {
        let (model, data, cfg) = fixture(9);
        let dir = tempfile::tempdir().unwrap();
        let (ck, log) = (dir.path().join("a.pckpt"), dir.path().join("a.jsonl"));
        let out = RunOutputs { checkpoint: Some(&ck), metrics: Some(&log), provenance: Provenance::new("h", 9) };
        let mut full = TrainState::new(model.clone());
        let all = run_training(&mut full, &data, &cfg, 9, &out).unwrap();
        assert_eq!(all.len(), 10);
        let text = fs::read_to_string(&log).unwrap();
        let mut lines = text.lines();
        assert_eq!(Provenance::parse_header(lines.next().unwrap()), Some(out.provenance.clone()));
        let parsed: Vec<StepMetrics> = lines.map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed, all);

        let mut half = TrainState::new(model);
        let plan = cfg.plan(&data, 9).unwrap();
        for _ in 0..4 {
            train_step(&mut half, &data, &cfg, &plan).unwrap();
        }
        let bytes = Checkpoint::capture(&half, &out.provenance).to_bytes();
        let mut resumed = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap().restore().unwrap();
        let (ck2, log2) = (dir.path().join("b.pckpt"), dir.path().join("b.jsonl"));
        let out2 = RunOutputs { checkpoint: Some(&ck2), metrics: Some(&log2), ..out.clone() };
        let rest = run_training(&mut resumed, &data, &cfg, 9, &out2).unwrap();
        assert_eq!(rest, all[4..]);
        assert_eq!(resumed.model.params, full.model.params);
        assert_eq!(resumed.lion, full.lion);
        assert_eq!(fs::read(&ck).unwrap(), fs::read(&ck2).unwrap());
    }

    #[test]
    fn config_checks() {
        let (_, data, cfg) = fixture(1);
        assert!(TrainConfig { devices: 3, ..cfg.clone() }.plan(&data, 1).is_err());
        let off = LossConfig { i2t: false, p2p: false, mrl: None };
        assert!(TrainConfig { loss: off, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { warmup_steps: 10, ..cfg.clone() }.validate().is_err());
        let mut bad = cfg.clone();
        bad.optimizer.text.lr_mult = 0.0;
        assert!(bad.validate().is_err());
        assert!(TrainConfig { clip_grad_norm: Some(0.0), ..cfg }.validate().is_err());
    }
}
