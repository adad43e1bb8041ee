//! Three-phase training with AdamW, gradient clipping, cosine annealing with
//! warm restarts, loss warm-ups, SWAG snapshot collection and checkpoints.
//!
//! Phase 1 fits the frequency and damping heads, phase 2 adds the MAC loss
//! with emphasis on higher modes, phase 3 optimizes the full objective.
//! Micro-batches of one optimizer step may run on different workers; their
//! gradients are reduced in a fixed order so results do not depend on
//! scheduling.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{hex, GraphSample};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossWeights, OutputView, Targets, TermScales};
use crate::model::{Batch, ForwardMode, HeadInit, Model, ModelConfig};
use crate::nn::{Group, ParamSpec, ParamStore, Tape};
use crate::rng::{self, tag};
use crate::uq::{SwagAccumulator, SwagPosterior};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    /// First window length, epochs.
    pub t0: f64,
    pub t_mult: f64,
    /// Floor as a fraction of each group's peak rate.
    pub lr_min_ratio: f64,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        Self { t0: 10.0, t_mult: 1.0, lr_min_ratio: 0.01 }
    }
}

/// Validation quantity that picks the retained checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Full-weight validation loss.
    Loss,
    /// `(1 − MAC) + RMSE(log f) + RMSE(log ζ)` of the point predictions.
    Accuracy,
}

impl Selection {
    pub fn metric(self, val: &LossBreakdown) -> f64 {
        match self {
            Self::Loss => val.total,
            Self::Accuracy => val.mac + val.mse_freq.sqrt() + val.mse_zeta.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase_epochs: [usize; 3],
    pub batch_size: usize,
    pub accumulation: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Epochs over which the KL weight ramps up from the start of phase 3.
    pub kl_warmup: usize,
    /// Epochs over which the evidential regularizer ramps up from the start of training.
    pub evi_warmup: usize,
    /// Epochs into phase 3 after which CRPS is switched on.
    pub crps_start: usize,
    pub cosine: CosineSchedule,
    /// Snapshots are taken over this many final epochs.
    pub swag_epochs: usize,
    pub swag_interval: usize,
    pub selection: Selection,
    pub seed: u64,
    /// Recorded with the run. Micro-batch results are reduced in a fixed
    /// order, so equal seeds reproduce a run whether or not this is set.
    pub deterministic: bool,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase_epochs: [30, 30, 40],
            batch_size: 8,
            accumulation: 4,
            lr_backbone: 1e-3,
            lr_head: 2e-3,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            kl_warmup: 20,
            evi_warmup: 10,
            crps_start: 10,
            cosine: CosineSchedule::default(),
            swag_epochs: 15,
            swag_interval: 1,
            selection: Selection::Loss,
            seed: 7,
            deterministic: true,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_modes: usize) -> Result<()> {
        if self.phase_epochs.contains(&0) {
            return Err(Error::Config("every phase needs at least one epoch".into()));
        }
        self.validate_common(n_modes)
    }

    fn validate_common(&self, n_modes: usize) -> Result<()> {
        if self.batch_size == 0 || self.accumulation == 0 || self.swag_interval == 0 {
            return Err(Error::Config("batch size, accumulation and SWAG interval must be >= 1".into()));
        }
        if !(self.lr_backbone > 0.0) || !(self.lr_head > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if !(self.cosine.t0 > 0.0) || !(self.cosine.t_mult >= 1.0) || !(0.0..=1.0).contains(&self.cosine.lr_min_ratio) {
            return Err(Error::Config("invalid cosine schedule".into()));
        }
        self.weights.validate(n_modes)
    }

    pub fn total_epochs(&self) -> usize {
        self.phase_epochs.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Heads,
    Shapes,
    Full,
}

impl Phase {
    pub fn number(&self) -> usize {
        match self {
            Self::Heads => 1,
            Self::Shapes => 2,
            Self::Full => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub epoch: usize,
    pub phase: Phase,
    /// Epoch index within the current phase.
    pub phase_epoch: usize,
    pub step: usize,
    pub scales: TermScales,
    pub lr_backbone: f64,
    pub lr_head: f64,
}

/// 0 before `start`, a linear ramp over `length` epochs, then 1.
pub fn warmup_multiplier(epoch: f64, start: f64, length: f64) -> f64 {
    if epoch < start {
        0.0
    } else if length <= 0.0 {
        1.0
    } else {
        ((epoch - start) / length).min(1.0)
    }
}

/// Cosine annealing with warm restarts at fractional time `t` (epochs).
pub fn cosine_warm_restart_lr(t: f64, lr_max: f64, lr_min: f64, schedule: &CosineSchedule) -> f64 {
    let mut start = 0.0;
    let mut len = schedule.t0;
    while t >= start + len {
        start += len;
        len *= schedule.t_mult;
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * (t - start) / len).cos())
}

/// Phase and term multipliers for a given epoch.
pub fn schedule_at(cfg: &TrainConfig, epoch: usize) -> ScheduleState {
    let [p1, p2, _] = cfg.phase_epochs;
    let (phase, phase_epoch) = if epoch < p1 {
        (Phase::Heads, epoch)
    } else if epoch < p1 + p2 {
        (Phase::Shapes, epoch - p1)
    } else {
        (Phase::Full, epoch - p1 - p2)
    };
    let e = epoch as f64;
    let full_start = (p1 + p2) as f64;
    let evi = warmup_multiplier(e, 0.0, cfg.evi_warmup as f64);
    let scales = match phase {
        Phase::Heads => TermScales { crps: 0.0, mac: 0.0, ortho: 0.0, kl: 0.0, evi, ..TermScales::FULL },
        Phase::Shapes => TermScales { crps: 0.0, ortho: 0.0, kl: 0.0, evi, ..TermScales::FULL },
        Phase::Full => TermScales {
            crps: warmup_multiplier(e, full_start + cfg.crps_start as f64, 0.0),
            kl: warmup_multiplier(e, full_start, cfg.kl_warmup as f64),
            evi,
            ..TermScales::FULL
        },
    };
    ScheduleState { epoch, phase, phase_epoch, step: 0, scales, lr_backbone: cfg.lr_backbone, lr_head: cfg.lr_head }
}

/// Rescales gradients in place so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    /// One decoupled-weight-decay update with a learning rate per group.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Array2<f64>], lr: impl Fn(Group) -> f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape("gradient count differs from parameter count".into()));
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { term: "gradient".into(), context: format!("optimizer step {}", self.step + 1) });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for (i, p) in params.values.iter_mut().enumerate() {
            let rate = lr(params.specs[i].group);
            ndarray::Zip::from(p).and(&mut self.m[i]).and(&mut self.v[i]).and(&grads[i]).for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= rate * (mhat / (vhat.sqrt() + eps) + wd * *w);
            });
        }
        Ok(())
    }
}

/// Loss and parameter gradients of one batch.
pub fn batch_gradients(
    model: &Model,
    samples: &[&GraphSample],
    weights: &LossWeights,
    scales: TermScales,
    mode: ForwardMode,
    seed: u64,
) -> Result<(LossBreakdown, Vec<Array2<f64>>)> {
    let batch = Batch::new(samples)?;
    let targets = Targets::new(samples)?;
    let mut tape = Tape::new(&model.params);
    let mut r = rng::stream(seed, 0, tag::STEP);
    let vars = model.forward(&mut tape, &batch, mode, &mut r)?;
    let view = OutputView {
        shapes: tape.value(vars.shapes),
        freq: tape.value(vars.freq),
        zeta: tape.value(vars.zeta),
        latent: vars.latent.map(|l| (tape.value(l.mu), tape.value(l.logvar))),
        graph: &batch.graph,
    };
    let (breakdown, g) = match &model.config {
        ModelConfig::Uresvgae(c) => losses::evidential_objective(view, &targets, weights, scales, c.eps)?,
        ModelConfig::Baseline(_) => losses::baseline_objective(view, &targets, weights, scales)?,
    };
    let mut seeds = vec![(vars.shapes, g.shapes), (vars.freq, g.freq), (vars.zeta, g.zeta)];
    if let (Some(l), Some((gmu, glv))) = (vars.latent, g.latent) {
        seeds.push((l.mu, gmu));
        seeds.push((l.logvar, glv));
    }
    let grads = tape.backward(seeds);
    Ok((breakdown, grads))
}

/// Full-weight loss in evaluation mode (dropout off, mean latent).
pub fn evaluate_loss(model: &Model, samples: &[&GraphSample], weights: &LossWeights) -> Result<LossBreakdown> {
    let parts = samples
        .chunks(32)
        .map(|chunk| {
            let (b, _) = batch_gradients(model, chunk, weights, TermScales::FULL, ForwardMode::EVAL, 0)?;
            Ok((b, chunk.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::weighted_mean(&parts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub grad_norm: f64,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    /// Validation quantity of the configured selection rule.
    pub val_metric: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,phase,lr_backbone,lr_head,grad_norm,train_total,train_nll_freq,train_nll_zeta,train_mse_freq,train_mse_zeta,train_crps,train_mac,train_ortho,train_kl,val_total,val_nll_freq,val_nll_zeta,val_mse_freq,val_mse_zeta,val_crps,val_mac,val_ortho,val_kl";

    pub fn csv_row(&self) -> String {
        let t = &self.train;
        let v = &self.val;
        let nums = [
            self.lr_backbone, self.lr_head, self.grad_norm, t.total, t.nll_freq, t.nll_zeta, t.mse_freq, t.mse_zeta, t.crps,
            t.mac, t.ortho, t.kl, v.total, v.nll_freq, v.nll_zeta, v.mse_freq, v.mse_zeta, v.crps, v.mac, v.ortho, v.kl,
        ];
        let mut row = format!("{},{}", self.epoch, self.phase);
        for n in nums {
            row.push_str(&format!(",{n:e}"));
        }
        row
    }
}

pub fn metrics_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(EpochLog::CSV_HEADER);
    s.push('\n');
    for e in log {
        s.push_str(&e.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub best_epoch: Option<usize>,
    pub best_val_metric: Option<f64>,
    pub last_val_metric: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub schedule: ScheduleState,
    pub metrics: CheckpointMetrics,
    pub norm_digest: String,
    pub swag: Option<SwagPosterior>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub swag: Option<SwagPosterior>,
    pub log: Vec<EpochLog>,
}

/// Builds a model initialized from the training targets and trains it.
pub fn train(
    train_set: &[GraphSample],
    val_set: &[GraphSample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    norm_digest: &str,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutput> {
    cfg.validate(model_cfg.n_modes())?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Validation("training and validation splits must be non-empty".into()));
    }
    let refs: Vec<&GraphSample> = train_set.iter().collect();
    let init = HeadInit::from_samples(&refs)?;
    let model = Model::new(model_cfg.clone(), &init, cfg.seed)?;
    run(model, train_set, val_set, cfg, norm_digest, progress)
}

/// Continues training an existing model with every term active from the
/// first epoch; used for masked-input fine-tuning.
pub fn fine_tune(
    model: Model,
    train_set: &[GraphSample],
    val_set: &[GraphSample],
    epochs: usize,
    cfg: &TrainConfig,
    norm_digest: &str,
) -> Result<TrainOutput> {
    if epochs == 0 {
        return Err(Error::Config("fine-tuning needs at least one epoch".into()));
    }
    let cfg = TrainConfig {
        phase_epochs: [0, 0, epochs],
        kl_warmup: 0,
        evi_warmup: 0,
        crps_start: 0,
        swag_epochs: 0,
        ..cfg.clone()
    };
    cfg.validate_common(model.n_modes())?;
    run(model, train_set, val_set, &cfg, norm_digest, &mut |_| {})
}

fn run(
    mut model: Model,
    train_set: &[GraphSample],
    val_set: &[GraphSample],
    cfg: &TrainConfig,
    norm_digest: &str,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutput> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Validation("training and validation splits must be non-empty".into()));
    }
    let val_refs: Vec<&GraphSample> = val_set.iter().collect();
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let total_epochs = cfg.total_epochs();
    let full_start = cfg.phase_epochs[0] + cfg.phase_epochs[1];
    let swag_start = total_epochs.saturating_sub(cfg.swag_epochs).max(full_start);
    let per_step = cfg.batch_size * cfg.accumulation;
    let steps_per_epoch = train_set.len().div_ceil(per_step);
    let mut swag = SwagAccumulator::new();
    let mut log = Vec::with_capacity(total_epochs);
    let mut best: Option<(usize, f64, ParamStore, ScheduleState)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut state = schedule_at(cfg, 0);
    let mut micro_index: u64 = 0;

    for epoch in 0..total_epochs {
        state = ScheduleState { step: state.step, ..schedule_at(cfg, epoch) };
        let mut shuffle = rng::stream(cfg.seed, epoch as u64, tag::SHUFFLE);
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        let mut parts = Vec::new();
        let mut grad_norm = 0.0;
        for (s, step_ids) in order.chunks(per_step).enumerate() {
            let t = epoch as f64 + s as f64 / steps_per_epoch as f64;
            let lr_b = cosine_warm_restart_lr(t, cfg.lr_backbone, cfg.lr_backbone * cfg.cosine.lr_min_ratio, &cfg.cosine);
            let lr_h = cosine_warm_restart_lr(t, cfg.lr_head, cfg.lr_head * cfg.cosine.lr_min_ratio, &cfg.cosine);
            let micro: Vec<(u64, Vec<&GraphSample>)> = step_ids
                .chunks(cfg.batch_size)
                .map(|c| {
                    micro_index += 1;
                    (rng::derive_seed(cfg.seed, micro_index, tag::STEP), c.iter().map(|&i| &train_set[i]).collect())
                })
                .collect();
            let results: Vec<(LossBreakdown, Vec<Array2<f64>>, usize)> = micro
                .par_iter()
                .map(|(seed, samples)| {
                    let (b, g) = batch_gradients(&model, samples, &cfg.weights, state.scales, ForwardMode::TRAIN, *seed)?;
                    b.check_finite(&format!("epoch {epoch} step {s}"))?;
                    Ok((b, g, samples.len()))
                })
                .collect::<Result<_>>()?;
            let n_step: usize = results.iter().map(|r| r.2).sum();
            let mut grads = model.params.zeros_like();
            for (b, g, n) in &results {
                let w = *n as f64 / n_step as f64;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.scaled_add(w, gi);
                }
                parts.push((*b, *n));
            }
            grad_norm = clip_gradients(&mut grads, cfg.clip_norm);
            opt.update(&mut model.params, &grads, |g| match g {
                Group::Backbone => lr_b,
                Group::Head => lr_h,
            })?;
            state.step += 1;
            state.lr_backbone = lr_b;
            state.lr_head = lr_h;
        }
        let train_loss = LossBreakdown::weighted_mean(&parts);
        let val = evaluate_loss(&model, &val_refs, &cfg.weights)?;
        val.check_finite(&format!("validation after epoch {epoch}"))?;
        let entry = EpochLog {
            epoch,
            phase: state.phase.number(),
            lr_backbone: state.lr_backbone,
            lr_head: state.lr_head,
            grad_norm,
            train: train_loss,
            val,
            val_metric: cfg.selection.metric(&val),
        };
        let metric = entry.val_metric;
        progress(&entry);
        log.push(entry);
        if epoch >= full_start && best.as_ref().is_none_or(|b| metric < b.1) {
            best = Some((epoch, metric, model.params.clone(), state));
        }
        if epoch >= swag_start && (epoch - swag_start) % cfg.swag_interval == 0 {
            swag.add(&model.params.flatten())?;
        }
    }

    let posterior = if swag.count() >= 2 { Some(swag.finish()?) } else { None };
    let last_metric = log.last().map(|e| e.val_metric).unwrap_or(f64::NAN);
    let (best_epoch, best_metric, best_params, best_state) = best.expect("phase 3 has at least one epoch");
    let metrics = CheckpointMetrics { best_epoch: Some(best_epoch), best_val_metric: Some(best_metric), last_val_metric: last_metric };
    let best = Checkpoint {
        model: Model::from_params(model.config.clone(), best_params)?,
        schedule: best_state,
        metrics: metrics.clone(),
        norm_digest: norm_digest.to_string(),
        swag: posterior.clone(),
    };
    let last = Checkpoint { model, schedule: state, metrics, norm_digest: norm_digest.to_string(), swag: posterior.clone() };
    Ok(TrainOutput { best, last, swag: posterior, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PayloadInfo {
    bytes: u64,
    crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SwagInfo {
    count: usize,
    arrays: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    model: ModelConfig,
    config_digest: String,
    params: Vec<ParamSpec>,
    schedule: ScheduleState,
    metrics: CheckpointMetrics,
    norm_digest: String,
    dtype: String,
    payload: PayloadInfo,
    swag: Option<SwagInfo>,
}

pub fn config_digest(cfg: &ModelConfig) -> String {
    let v = serde_json::to_value(cfg).expect("config serializes");
    hex(&Sha256::digest(v.to_string().as_bytes()))
}

fn flatten_json(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, x) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_json(&key, x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Human-readable list of differing fields between two model configs.
pub fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    flatten_json("", &serde_json::to_value(a).unwrap(), &mut fa);
    flatten_json("", &serde_json::to_value(b).unwrap(), &mut fb);
    let keys: std::collections::BTreeSet<&String> = fa.keys().chain(fb.keys()).collect();
    keys.into_iter()
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| {
            format!(
                "{k}: checkpoint {} vs requested {}",
                fa.get(k).map(String::as_str).unwrap_or("<absent>"),
                fb.get(k).map(String::as_str).unwrap_or("<absent>")
            )
        })
        .collect()
}

/// Writes `ckpt.json` and `ckpt.bin` (little-endian f64 parameters in
/// manifest order, then SWAG mean and variance when present).
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut payload = Vec::with_capacity(8 * ckpt.model.n_parameters() * 3);
    for v in ckpt.model.params.values.iter().flat_map(|a| a.iter()) {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let swag = ckpt.swag.as_ref().map(|s| {
        for v in s.mean.iter().chain(&s.var) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        SwagInfo { count: s.count, arrays: vec!["swag.mean".into(), "swag.var".into()] }
    });
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        model: ckpt.model.config.clone(),
        config_digest: config_digest(&ckpt.model.config),
        params: ckpt.model.params.specs.clone(),
        schedule: ckpt.schedule,
        metrics: ckpt.metrics.clone(),
        norm_digest: ckpt.norm_digest.clone(),
        dtype: "f64le".into(),
        payload: PayloadInfo { bytes: payload.len() as u64, crc32: crc32fast::hash(&payload) },
        swag,
    };
    fs::write(dir.join("ckpt.bin"), &payload)?;
    fs::write(dir.join("ckpt.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Loads a checkpoint; with `expected` set, refuses a differing model config.
pub fn load_checkpoint(dir: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("ckpt.json"))?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    if let Some(cfg) = expected {
        if config_digest(cfg) != manifest.config_digest {
            return Err(Error::Checkpoint(format!(
                "model config differs from the checkpoint:\n  {}",
                config_diff(&manifest.model, cfg).join("\n  ")
            )));
        }
    }
    if config_digest(&manifest.model) != manifest.config_digest {
        return Err(Error::Checkpoint("stored config digest does not match the stored config".into()));
    }
    let payload = fs::read(dir.join("ckpt.bin"))?;
    if payload.len() as u64 != manifest.payload.bytes {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, manifest records {} (truncated?)",
            payload.len(),
            manifest.payload.bytes
        )));
    }
    if crc32fast::hash(&payload) != manifest.payload.crc32 {
        return Err(Error::Checkpoint("payload checksum mismatch".into()));
    }
    let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let n: usize = manifest.params.iter().map(|s| s.shape[0] * s.shape[1]).sum();
    let expected_len = if manifest.swag.is_some() { 3 * n } else { n };
    if values.len() != expected_len {
        return Err(Error::Checkpoint(format!("payload holds {} values, layout needs {expected_len}", values.len())));
    }
    let mut store = ParamStore::new();
    let mut pos = 0;
    for spec in &manifest.params {
        let len = spec.shape[0] * spec.shape[1];
        let arr = Array2::from_shape_vec((spec.shape[0], spec.shape[1]), values[pos..pos + len].to_vec())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        store.add(spec.name.clone(), arr, spec.group);
        pos += len;
    }
    let swag = manifest.swag.as_ref().map(|info| SwagPosterior {
        mean: values[n..2 * n].to_vec(),
        var: values[2 * n..].to_vec(),
        count: info.count,
    });
    Ok(Checkpoint {
        model: Model::from_params(manifest.model, store)?,
        schedule: manifest.schedule,
        metrics: manifest.metrics,
        norm_digest: manifest.norm_digest,
        swag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_examples() {
        assert_eq!(warmup_multiplier(2.0, 5.0, 10.0), 0.0);
        assert_eq!(warmup_multiplier(10.0, 5.0, 10.0), 0.5);
        assert_eq!(warmup_multiplier(30.0, 5.0, 10.0), 1.0);
        assert_eq!(warmup_multiplier(4.0, 5.0, 0.0), 0.0);
        assert_eq!(warmup_multiplier(5.0, 5.0, 0.0), 1.0);
    }

    #[test]
    fn cosine_examples() {
        let c = CosineSchedule { t0: 10.0, t_mult: 2.0, lr_min_ratio: 0.0 };
        assert_eq!(cosine_warm_restart_lr(0.0, 1.0, 0.1, &c), 1.0);
        assert!((cosine_warm_restart_lr(5.0, 1.0, 0.1, &c) - 0.55).abs() < 1e-12);
        assert_eq!(cosine_warm_restart_lr(10.0, 1.0, 0.1, &c), 1.0);
        assert!((cosine_warm_restart_lr(20.0, 1.0, 0.1, &c) - 0.55).abs() < 1e-12);
        assert_eq!(cosine_warm_restart_lr(30.0, 1.0, 0.1, &c), 1.0);
    }

    #[test]
    fn clipping_examples() {
        let mut small = vec![ndarray::array![[0.3, 0.4]]];
        clip_gradients(&mut small, 1.0);
        assert_eq!(small[0], ndarray::array![[0.3, 0.4]]);
        let mut big = vec![ndarray::array![[6.0, 8.0]]];
        assert_eq!(clip_gradients(&mut big, 1.0), 10.0);
        let n = big[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        let mut zero = vec![Array2::<f64>::zeros((2, 2))];
        clip_gradients(&mut zero, 1.0);
        assert!(zero[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adamw_examples() {
        let mut store = ParamStore::new();
        store.add("w", ndarray::array![[1.0, -2.0]], Group::Backbone);
        let before = store.clone();
        let mut opt = AdamW::new(&store, 0.0);
        opt.update(&mut store, &[Array2::zeros((1, 2))], |_| 1e-2).unwrap();
        assert_eq!(store, before);

        let mut opt = AdamW::new(&store, 0.1);
        opt.update(&mut store, &[Array2::zeros((1, 2))], |_| 1e-2).unwrap();
        assert!((store.values[0][(0, 0)] - (1.0 - 1e-3)).abs() < 1e-15);

        let mut opt = AdamW::new(&store, 0.0);
        let mut last = store.values[0][(0, 0)];
        let mut step = 0.0;
        for _ in 0..1000 {
            opt.update(&mut store, &[ndarray::array![[0.5, 0.5]]], |_| 1e-3).unwrap();
            let now = store.values[0][(0, 0)];
            step = last - now;
            last = now;
        }
        assert!((step - 1e-3).abs() < 1e-5);
        assert!(opt.update(&mut store, &[ndarray::array![[f64::NAN, 0.0]]], |_| 1e-3).is_err());
    }

    #[test]
    fn phase_gating_scales() {
        let cfg = TrainConfig { phase_epochs: [2, 2, 30], ..Default::default() };
        let s1 = schedule_at(&cfg, 0);
        assert_eq!((s1.phase, s1.scales.mac, s1.scales.kl, s1.scales.crps), (Phase::Heads, 0.0, 0.0, 0.0));
        let s2 = schedule_at(&cfg, 2);
        assert_eq!((s2.phase, s2.scales.mac, s2.scales.ortho), (Phase::Shapes, 1.0, 0.0));
        let s3 = schedule_at(&cfg, 4 + 10);
        assert_eq!((s3.phase, s3.scales.crps, s3.scales.kl), (Phase::Full, 1.0, 0.5));
        assert_eq!(schedule_at(&cfg, 4 + 9).scales.crps, 0.0);
    }
}
