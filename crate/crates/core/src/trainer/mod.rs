//! Training: the VIB objective, the two-stage freeze schedule run as
//! alternating cycles, and the β sweep.

mod optim;
mod schedule;

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::{clip_global_norm, global_norm, AdamW, AdamWConfig};
pub use schedule::{make_schedule, Schedule};

use crate::datagen::Utterance;
use crate::decoder::Task;
use crate::diffcore::{DiffError, Grads, Graph, ParamStore, Trainable, Var};
use crate::metrics::{evaluate_corpus, MetricError, Response};
use crate::model::{ModelConfig, ModelError, ParamGroup, SerModel, Slots};
use crate::seeding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ContentAsr,
    DescriptorJoint,
}

impl Stage {
    pub const ORDER: [Stage; 2] = [Stage::ContentAsr, Stage::DescriptorJoint];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::ContentAsr => "content_asr",
            Stage::DescriptorJoint => "descriptor_joint",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMixing {
    /// Stage-2 batches alternate SER-SED, ASR, SER-SED, ...
    #[default]
    RoundRobin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub beta: f64,
    /// Epochs per stage over the whole run, spread evenly over the cycles.
    pub epochs_per_stage: usize,
    pub cycles: usize,
    pub batch_size: usize,
    pub stage1_lr: f64,
    pub stage2_peak_lr: f64,
    pub warmup_fraction: f64,
    pub mixing: TaskMixing,
    pub optimizer: AdamWConfig,
    /// `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub lora_in_stage1: bool,
    /// Also train the decoder base weights in both stages.
    pub train_decoder_base: bool,
    /// Text-only epochs that fit the decoder base before the first cycle,
    /// with each slot holding the token embeddings of its words (see
    /// `SerModel::text_loss`). The base is frozen afterwards unless
    /// `train_decoder_base` is set.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1e-2,
            epochs_per_stage: 4,
            cycles: 4,
            batch_size: 8,
            stage1_lr: 2e-4,
            stage2_peak_lr: 2e-5,
            warmup_fraction: 0.03,
            mixing: TaskMixing::RoundRobin,
            optimizer: AdamWConfig::default(),
            grad_clip: Some(1.0),
            lora_in_stage1: true,
            train_decoder_base: false,
            pretrain_epochs: 4,
            pretrain_lr: 1e-3,
            seed: 0,
        }
    }
}

fn positive_finite(name: &str, v: f64) -> Result<(), String> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(format!("train.{name} must be positive, got {v}"))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(format!("train.beta must be non-negative, got {}", self.beta));
        }
        if self.batch_size == 0 {
            return Err("train.batch_size must be at least 1".into());
        }
        if self.cycles == 0 {
            return Err("train.cycles must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(format!("train.warmup_fraction must be in [0, 1), got {}", self.warmup_fraction));
        }
        positive_finite("stage1_lr", self.stage1_lr)?;
        positive_finite("stage2_peak_lr", self.stage2_peak_lr)?;
        positive_finite("pretrain_lr", self.pretrain_lr)?;
        if let Some(c) = self.grad_clip {
            positive_finite("grad_clip", c)?;
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err("train.optimizer moments must be in [0, 1)".into());
        }
        positive_finite("optimizer.eps", o.eps)?;
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return Err("train.optimizer.weight_decay must be non-negative".into());
        }
        Ok(())
    }

    /// Epochs of each stage in `cycle` (0-based): the total split evenly,
    /// earlier cycles taking the remainder.
    pub fn epochs_in_cycle(&self, cycle: usize) -> usize {
        let (q, r) = (self.epochs_per_stage / self.cycles, self.epochs_per_stage % self.cycles);
        q + usize::from(cycle < r)
    }

    pub fn schedule(&self, stage: Stage, total_steps: usize) -> Schedule {
        let peak = match stage {
            Stage::ContentAsr => self.stage1_lr,
            Stage::DescriptorJoint => self.stage2_peak_lr,
        };
        make_schedule(stage, total_steps, peak, self.warmup_fraction)
    }
}

/// `task + β·(kl_con + kl_des)`; the descriptor term is dropped in the
/// content stage, where that branch does not run.
pub fn vib_loss(task: f64, kl_con: f64, kl_des: f64, beta: f64, stage: Stage) -> f64 {
    match stage {
        Stage::ContentAsr => task + beta * kl_con,
        Stage::DescriptorJoint => task + beta * (kl_con + kl_des),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageMask {
    pub stage: Stage,
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
    pub zero_descriptor_slot: bool,
}

impl StageMask {
    pub fn slots(&self) -> Slots {
        if self.zero_descriptor_slot {
            Slots::CONTENT_ONLY
        } else {
            Slots::BOTH
        }
    }
}

pub fn set_stage(model: &SerModel, stage: Stage, config: &TrainConfig) -> StageMask {
    let mut groups = match stage {
        Stage::ContentAsr => vec![ParamGroup::ContentBranch, ParamGroup::ContentAdapter],
        Stage::DescriptorJoint => vec![ParamGroup::DescriptorBranch, ParamGroup::DescriptorAdapter],
    };
    if stage == Stage::DescriptorJoint || config.lora_in_stage1 {
        groups.push(ParamGroup::DecoderLowRank);
    }
    if config.train_decoder_base {
        groups.push(ParamGroup::DecoderBase);
    }
    let trainable: BTreeSet<String> = model.names_in(&groups).into_iter().collect();
    let frozen = model
        .params
        .names()
        .filter(|n| !trainable.contains(*n))
        .map(str::to_string)
        .collect();
    StageMask {
        stage,
        trainable,
        frozen,
        zero_descriptor_slot: stage == Stage::ContentAsr,
    }
}

/// Phase of the run a step belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    DecoderPretrain,
    ContentAsr,
    DescriptorJoint,
}

impl From<Stage> for Phase {
    fn from(s: Stage) -> Self {
        match s {
            Stage::ContentAsr => Phase::ContentAsr,
            Stage::DescriptorJoint => Phase::DescriptorJoint,
        }
    }
}

/// One line of the training log. `cycle` is 0 for decoder pretraining and
/// counts from 1 otherwise; `step` is global and 1-based. `kl_des` is null
/// while the descriptor branch is inactive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub cycle: usize,
    pub stage: Phase,
    pub step: usize,
    pub task: Task,
    pub loss: f64,
    pub kl_con: Option<f64>,
    pub kl_des: Option<f64>,
    pub lr: f64,
}

pub fn log_jsonl(log: &[LogRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl From<DiffError> for TrainError {
    fn from(e: DiffError) -> Self {
        TrainError::Model(ModelError::Diff(e))
    }
}

/// What an observer sees after every optimizer step.
pub struct StepView<'a> {
    pub record: &'a LogRecord,
    /// `None` during decoder pretraining.
    pub mask: Option<&'a StageMask>,
    pub params: &'a ParamStore,
}

pub struct TrainOutcome {
    pub model: SerModel,
    pub log: Vec<LogRecord>,
}

struct UttResult {
    loss: f64,
    kl_con: Option<f64>,
    kl_des: Option<f64>,
    grads: Grads,
}

/// Where the prompt slots come from.
#[derive(Clone, Copy)]
enum Source {
    Branches(Slots),
    Text,
}

struct Batch<'a> {
    items: &'a [usize],
    task: Task,
    source: Source,
    trainable: &'a BTreeSet<String>,
    beta: f64,
}

fn utterance_step(
    model: &SerModel,
    utt: &Utterance,
    batch: &Batch<'_>,
    noise_seed: u64,
) -> Result<UttResult, ModelError> {
    let mut g = Graph::with_params(&model.params, Trainable::Only(batch.trainable));
    let slots = match batch.source {
        Source::Branches(s) => s,
        Source::Text => {
            let loss = model.text_loss(&mut g, utt, batch.task)?;
            let value = g.value(loss).item();
            let grads = g.backward(loss)?.into_params();
            return Ok(UttResult {
                loss: value,
                kl_con: None,
                kl_des: None,
                grads,
            });
        }
    };
    let t = model.terms(&mut g, utt, batch.task, slots, Some(noise_seed))?;
    let kls: Vec<Var> = [t.kl_con, t.kl_des].into_iter().flatten().collect();
    let loss = if kls.is_empty() || batch.beta == 0.0 {
        t.task
    } else {
        let mut kl = kls[0];
        for &k in &kls[1..] {
            kl = g.add(kl, k)?;
        }
        let kl = g.scale(kl, batch.beta)?;
        g.add(t.task, kl)?
    };
    let read = |v: Option<Var>| v.map(|v| g.value(v).item());
    let (kl_con, kl_des) = (read(t.kl_con), read(t.kl_des));
    let value = g.value(loss).item();
    let grads = g.backward(loss)?.into_params();
    Ok(UttResult {
        loss: value,
        kl_con,
        kl_des,
        grads,
    })
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>, n: usize) -> Option<f64> {
    let mut total = 0.0;
    for x in xs {
        total += x?;
    }
    Some(total / n as f64)
}

struct Run<'a, F> {
    config: &'a TrainConfig,
    corpus: &'a [Utterance],
    model: SerModel,
    opt: AdamW,
    log: Vec<LogRecord>,
    step: usize,
    observer: F,
}

impl<F: FnMut(StepView<'_>)> Run<'_, F> {
    /// One optimizer step on the mean per-utterance loss of `batch`.
    fn batch_step(
        &mut self,
        batch: Batch<'_>,
        lr: f64,
        cycle: usize,
        phase: Phase,
        mask: Option<&StageMask>,
    ) -> Result<(), TrainError> {
        self.step += 1;
        let step = self.step;
        let seed = self.config.seed;
        let model = &self.model;
        let corpus = self.corpus;
        let results: Vec<Result<UttResult, ModelError>> = batch
            .items
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let noise = seeding::derive_path(seed, &[0x4E01, step as u64, j as u64]);
                utterance_step(model, &corpus[i], &batch, noise)
            })
            .collect();
        let results = results
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| match e {
                ModelError::Diff(DiffError::NonFinite { .. }) => {
                    TrainError::Divergence { step, loss: f64::NAN }
                }
                e => e.into(),
            })?;
        let n = results.len();
        let loss = results.iter().map(|r| r.loss).sum::<f64>() / n as f64;
        if !loss.is_finite() {
            return Err(TrainError::Divergence { step, loss });
        }
        let mut grads = Grads::new();
        for r in &results {
            for (name, g) in &r.grads {
                match grads.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        grads.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        for t in grads.values_mut() {
            for x in t.data_mut() {
                *x /= n as f64;
            }
        }
        let norm = global_norm(&grads);
        if !norm.is_finite() {
            return Err(TrainError::Divergence { step, loss: norm });
        }
        if let Some(c) = self.config.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        self.opt.step(&mut self.model.params, &grads, lr);
        let record = LogRecord {
            cycle,
            stage: phase,
            step,
            task: batch.task,
            loss,
            kl_con: mean_opt(results.iter().map(|r| r.kl_con), n),
            kl_des: mean_opt(results.iter().map(|r| r.kl_des), n),
            lr,
        };
        (self.observer)(StepView {
            record: &record,
            mask,
            params: &self.model.params,
        });
        self.log.push(record);
        Ok(())
    }

    fn order(&self, tag: &[u64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.corpus.len()).collect();
        let mut rng = seeding::rng(seeding::derive_path(self.config.seed, tag));
        idx.shuffle(&mut rng);
        idx
    }

    fn batches_per_epoch(&self) -> usize {
        self.corpus.len().div_ceil(self.config.batch_size)
    }

    fn pretrain(&mut self) -> Result<(), TrainError> {
        let epochs = self.config.pretrain_epochs;
        if epochs == 0 {
            return Ok(());
        }
        let trainable: BTreeSet<String> = self.model.names_in(&[ParamGroup::DecoderBase]).into_iter().collect();
        let sched = make_schedule(
            Stage::ContentAsr,
            epochs * self.batches_per_epoch(),
            self.config.pretrain_lr,
            self.config.warmup_fraction,
        );
        let mut local = 0;
        for epoch in 0..epochs {
            let order = self.order(&[0x9E7, epoch as u64]);
            for chunk in order.chunks(self.config.batch_size) {
                let task = if local % 2 == 0 { Task::SerSed } else { Task::Asr };
                local += 1;
                let batch = Batch {
                    items: chunk,
                    task,
                    source: Source::Text,
                    trainable: &trainable,
                    beta: 0.0,
                };
                self.batch_step(batch, sched.lr(local), 0, Phase::DecoderPretrain, None)?;
            }
        }
        Ok(())
    }

    fn stage(&mut self, cycle: usize, stage: Stage) -> Result<(), TrainError> {
        let epochs = self.config.epochs_in_cycle(cycle);
        if epochs == 0 {
            return Ok(());
        }
        let mask = set_stage(&self.model, stage, self.config);
        let sched = self.config.schedule(stage, epochs * self.batches_per_epoch());
        let mut local = 0;
        for epoch in 0..epochs {
            let order = self.order(&[0x57A, cycle as u64, stage as u64, epoch as u64]);
            for chunk in order.chunks(self.config.batch_size) {
                let task = match (stage, self.config.mixing) {
                    (Stage::ContentAsr, _) => Task::Asr,
                    (Stage::DescriptorJoint, TaskMixing::RoundRobin) => {
                        if local % 2 == 0 {
                            Task::SerSed
                        } else {
                            Task::Asr
                        }
                    }
                };
                local += 1;
                let batch = Batch {
                    items: chunk,
                    task,
                    source: Source::Branches(mask.slots()),
                    trainable: &mask.trainable,
                    beta: self.config.beta,
                };
                self.batch_step(batch, sched.lr(local), cycle + 1, stage.into(), Some(&mask))?;
            }
        }
        Ok(())
    }
}

/// Trains `model` on `corpus`: optional decoder pretraining, then
/// `cycles` rounds of the content stage followed by the descriptor stage.
/// `observer` runs after every optimizer step.
pub fn train_observed(
    config: &TrainConfig,
    model: SerModel,
    corpus: &[Utterance],
    observer: impl FnMut(StepView<'_>),
) -> Result<TrainOutcome, TrainError> {
    config.validate().map_err(TrainError::Config)?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut run = Run {
        config,
        corpus,
        model,
        opt: AdamW::new(config.optimizer),
        log: Vec::new(),
        step: 0,
        observer,
    };
    run.pretrain()?;
    for cycle in 0..config.cycles {
        for stage in Stage::ORDER {
            run.stage(cycle, stage)?;
        }
    }
    Ok(TrainOutcome {
        model: run.model,
        log: run.log,
    })
}

pub fn train(config: &TrainConfig, model: SerModel, corpus: &[Utterance]) -> Result<TrainOutcome, TrainError> {
    train_observed(config, model, corpus, |_| {})
}

/// Greedy ASR and SER-SED responses for every utterance, in corpus order.
pub fn predict(model: &SerModel, corpus: &[Utterance], ablate_descriptor: bool) -> Result<Vec<Response>, ModelError> {
    let weights = model.inference_weights()?;
    corpus
        .par_iter()
        .map(|u| {
            Ok(Response {
                id: u.id.clone(),
                asr: model.respond(&weights, u, Task::Asr, ablate_descriptor)?,
                ser_sed: model.respond(&weights, u, Task::SerSed, ablate_descriptor)?,
            })
        })
        .collect()
}

/// Mean posterior KL of each branch over `corpus`.
pub fn mean_kl(model: &SerModel, corpus: &[Utterance]) -> Result<(f64, f64), ModelError> {
    let kls = corpus.par_iter().map(|u| model.kl(u)).collect::<Result<Vec<_>, _>>()?;
    let n = kls.len().max(1) as f64;
    Ok((
        kls.iter().map(|k| k.0).sum::<f64>() / n,
        kls.iter().map(|k| k.1).sum::<f64>() / n,
    ))
}

pub const DEFAULT_BETAS: [f64; 5] = [1.0, 1e-1, 1e-2, 1e-3, 1e-4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub ua: f64,
    pub wer: f64,
    pub b4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub kl_con: f64,
    pub kl_des: f64,
    /// Mean of the two branch KLs.
    pub mean_kl: f64,
}

/// Trains one model per β from the same initialization and seed, then
/// scores each on `eval`.
pub fn sweep_beta(
    model_config: &ModelConfig,
    config: &TrainConfig,
    betas: &[f64],
    train_set: &[Utterance],
    eval: &[Utterance],
) -> Result<Vec<SweepRow>, TrainError> {
    if betas.is_empty() {
        return Err(TrainError::Config("sweep needs at least one beta".into()));
    }
    if train_set.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let init = SerModel::for_corpus(model_config.clone(), train_set, config.seed)?;
    betas
        .iter()
        .map(|&beta| {
            let cfg = TrainConfig { beta, ..config.clone() };
            let out = train(&cfg, init.clone(), train_set)?;
            let report = evaluate_corpus(&predict(&out.model, eval, false)?, eval)?;
            let (kl_con, kl_des) = mean_kl(&out.model, eval)?;
            Ok(SweepRow {
                beta,
                ua: report.ua,
                wer: report.wer,
                b4: report.b4,
                meteor: report.meteor,
                rouge_l: report.rouge_l,
                cider: report.cider,
                kl_con,
                kl_des,
                mean_kl: (kl_con + kl_des) / 2.0,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
