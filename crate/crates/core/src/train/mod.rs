//! Optimizer, learning-rate schedule, next-token pretraining and the DPO
//! training loop with per-step metrics.

mod optim;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::autodiff::Tape;
use crate::data::PreferenceRecord;
use crate::dpo::{dpo_loss, reference_logprobs, DpoBatchStats, EncodedPair, PolicyPair};
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, ModelConfig};
use crate::{Mode, Rng};

pub use optim::{lr_at, AdamW, AdamWConfig};

/// Post-warmup learning-rate shape.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Schedule {
    #[default]
    Constant,
}

/// DPO stage hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub grad_accumulation: usize,
    pub micro_batch: usize,
    pub seed: u64,
    pub beta: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            epochs: 1,
            warmup_steps: 10,
            grad_accumulation: 8,
            micro_batch: 2,
            seed: 0,
            beta: 0.1,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
            max_steps: None,
        }
    }
}

impl TrainingConfig {
    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.grad_accumulation
    }

    pub fn validate(&self) -> Result<()> {
        let ints = [
            ("epochs", self.epochs),
            ("grad_accumulation", self.grad_accumulation),
            ("micro_batch", self.micro_batch),
        ];
        for (name, v) in ints {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be positive".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }

    /// Optimizer steps a dataset of `records` yields.
    pub fn steps_for(&self, records: usize) -> usize {
        let per_epoch = records.div_ceil(self.effective_batch());
        let total = per_epoch * self.epochs;
        self.max_steps.map_or(total, |m| m.min(total))
    }
}

/// One optimizer step of the DPO run.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub margin: f64,
    pub chosen_reward: f64,
    pub rejected_reward: f64,
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsLog {
    pub run: String,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new(run: impl Into<String>) -> Self {
        Self {
            run: run.into(),
            rows: Vec::new(),
        }
    }

    /// Appends a row; steps must be strictly increasing.
    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::Contract(format!("step {} after step {}", row.step, last.step)));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn margins(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.margin).collect()
    }

    /// Trailing moving average of the margin over `window` steps (shorter at
    /// the start of the run).
    pub fn margin_moving_average(&self, window: usize) -> Vec<f64> {
        let m = self.margins();
        let w = window.max(1);
        (0..m.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                m[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }

    /// Mean of `f` over the first `n` rows.
    pub fn head_mean(&self, n: usize, f: impl Fn(&MetricsRow) -> f64) -> f64 {
        let k = n.min(self.rows.len());
        self.rows[..k].iter().map(&f).sum::<f64>() / k as f64
    }

    /// Mean of `f` over the last `n` rows.
    pub fn tail_mean(&self, n: usize, f: impl Fn(&MetricsRow) -> f64) -> f64 {
        let k = n.min(self.rows.len());
        self.rows[self.rows.len() - k..].iter().map(&f).sum::<f64>() / k as f64
    }
}

/// Runs DPO over `dataset`, updating only the policy's adapters. On a NaN
/// loss the run stops before the offending update, so `pair` keeps the last
/// good weights.
pub fn train_dpo(
    pair: &mut PolicyPair,
    dataset: &[PreferenceRecord],
    config: &TrainingConfig,
    run: &str,
    mut on_step: impl FnMut(&MetricsRow),
) -> Result<MetricsLog> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("preference dataset"));
    }
    if !pair.policy.has_adapters() {
        return Err(Error::Contract("policy has no adapters attached".into()));
    }
    let max_len = pair.max_seq_len();
    let encoded: Vec<EncodedPair> = dataset
        .iter()
        .map(|r| EncodedPair::new(r, max_len))
        .collect::<Result<_>>()?;
    let reference: Vec<(f64, f64)> = encoded
        .iter()
        .map(|e| reference_logprobs(&pair.reference, e))
        .collect::<Result<_>>()?;

    let mut order_rng = Rng::seed_from_u64(config.seed);
    let mut dropout_rng = Rng::seed_from_u64(config.seed ^ 0x5eed_d40f);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let total_steps = config.steps_for(dataset.len());
    let mut log = MetricsLog::new(run);
    let mut step = 0;
    'epochs: for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(config.effective_batch()) {
            if step == total_steps {
                break 'epochs;
            }
            let stats = accumulate_step(pair, &encoded, &reference, chunk, config, &mut dropout_rng)?;
            if !stats.loss.is_finite() {
                pair.policy.store_mut().zero_grad();
                return Err(Error::NanLoss { step: step + 1 });
            }
            let lr = lr_at(step, config.learning_rate, config.warmup_steps);
            let applied = opt.step(pair.policy.store_mut(), lr);
            pair.policy.store_mut().zero_grad();
            applied?;
            step += 1;
            let row = MetricsRow {
                step,
                loss: stats.loss,
                margin: stats.mean_margin,
                chosen_reward: stats.mean_chosen_reward,
                rejected_reward: stats.mean_rejected_reward,
                accuracy: stats.preference_accuracy,
                lr,
            };
            on_step(&row);
            log.push(row)?;
        }
    }
    Ok(log)
}

/// Accumulates gradients of the step's mean loss over its micro-batches and
/// returns the step's statistics.
fn accumulate_step(
    pair: &mut PolicyPair,
    encoded: &[EncodedPair],
    reference: &[(f64, f64)],
    indices: &[usize],
    config: &TrainingConfig,
    rng: &mut Rng,
) -> Result<DpoBatchStats> {
    let total = indices.len() as f64;
    let mut stats = DpoBatchStats {
        records: indices.len(),
        ..DpoBatchStats::default()
    };
    for micro in indices.chunks(config.micro_batch) {
        let batch: Vec<EncodedPair> = micro.iter().map(|&i| encoded[i].clone()).collect();
        let refs: Vec<(f64, f64)> = micro.iter().map(|&i| reference[i]).collect();
        let weight = micro.len() as f64 / total;
        let mut tape = Tape::new();
        let (loss, s) = dpo_loss(&mut tape, pair, &batch, Some(&refs), config.beta, &mut Mode::Train(rng))?;
        let scaled = tape.scale(loss, weight);
        tape.backward(scaled)?.accumulate_into(pair.policy.store_mut())?;
        stats.loss += weight * s.loss;
        stats.mean_margin += weight * s.mean_margin;
        stats.mean_chosen_reward += weight * s.mean_chosen_reward;
        stats.mean_rejected_reward += weight * s.mean_rejected_reward;
        stats.preference_accuracy += weight * s.preference_accuracy;
    }
    Ok(stats)
}

/// Next-token pretraining hyperparameters for the base model.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            learning_rate: 3e-3,
            warmup_steps: 20,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Splits documents into training windows of at most `max_len` tokens.
/// Consecutive windows of a long document overlap by one token so every
/// next-token target is predicted exactly once.
pub fn chunk_documents(docs: &[Vec<u32>], max_len: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let stride = max_len.saturating_sub(1).max(1);
    for doc in docs {
        if doc.len() < 2 {
            continue;
        }
        let mut start = 0;
        loop {
            let end = (start + max_len).min(doc.len());
            out.push(doc[start..end].to_vec());
            if end == doc.len() {
                break;
            }
            start += stride;
        }
    }
    out
}

/// Trains every parameter of `model` on next-token prediction and returns
/// the per-step mean token loss.
pub fn train_lm(model: &mut LanguageModel, corpus: &[Vec<u32>], config: &PretrainConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let examples = chunk_documents(corpus, model.config().max_seq_len);
    if examples.is_empty() {
        return Err(Error::Empty("pretraining corpus"));
    }
    let mut rng = Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if order.is_empty() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("refilled above"));
        }
        let tokens: usize = batch.iter().map(|&i| examples[i].len() - 1).sum();
        let mut step_loss = 0.0;
        for &i in &batch {
            let mut tape = Tape::new();
            let lp = model.sequence_logprob(&mut tape, &examples[i], 1, &mut Mode::Eval)?;
            let loss = tape.scale(lp, -1.0 / tokens as f64);
            step_loss += tape.scalar(loss);
            tape.backward(loss)?.accumulate_into(model.store_mut())?;
        }
        if !step_loss.is_finite() {
            model.store_mut().zero_grad();
            return Err(Error::NanLoss { step: step + 1 });
        }
        let lr = lr_at(step, config.learning_rate, config.warmup_steps);
        let applied = opt.step(model.store_mut(), lr);
        model.store_mut().zero_grad();
        applied?;
        losses.push(step_loss);
    }
    Ok(losses)
}

/// Builds and pretrains a fresh model.
pub fn pretrain(
    corpus: &[Vec<u32>],
    config: &PretrainConfig,
    model_config: ModelConfig,
) -> Result<(LanguageModel, Vec<f64>)> {
    let mut model = LanguageModel::new(model_config, config.seed)?;
    let losses = train_lm(&mut model, corpus, config)?;
    Ok((model, losses))
}

/// Mean next-token NLL per token over `docs` in evaluation mode.
pub fn mean_nll(model: &LanguageModel, docs: &[Vec<u32>]) -> Result<f64> {
    let examples = chunk_documents(docs, model.config().max_seq_len);
    if examples.is_empty() {
        return Err(Error::Empty("held-out corpus"));
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for ex in &examples {
        total -= model.sequence_logprob_value(ex, 1)?;
        tokens += ex.len() - 1;
    }
    Ok(total / tokens as f64)
}
