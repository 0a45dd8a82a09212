//! The DPO objective over a policy/reference pair, implicit rewards and
//! margins, and exhaustive-enumeration oracles for the partition function and
//! the optimal policy on toy vocabularies.

mod oracle;

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::data::PreferenceRecord;
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, Tokenizer};
use crate::lora::LoraConfig;
use crate::Mode;

pub use oracle::{
    enumerate_responses, log_partition_function, optimal_policy, optimal_policy_check, partition_function,
    policy_logprob, AutoregressivePolicy, OptimalPolicyReport, SequenceDistribution, TabularPolicy, ENUMERATION_LIMIT,
};

/// Scores `log π(response | prompt)` over token ids.
pub trait SequenceScorer {
    fn logprob(&self, prompt: &[u32], response: &[u32]) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct DpoConfig {
    pub beta: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { beta: 0.1 }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta > 0.0 && self.beta.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("beta must be positive, got {}", self.beta)))
        }
    }
}

/// Trainable policy (base plus adapters) and the frozen base it started from.
#[derive(Debug, Clone)]
pub struct PolicyPair {
    pub policy: LanguageModel,
    pub reference: LanguageModel,
}

impl PolicyPair {
    /// Clones `base` as the frozen reference and attaches fresh adapters to
    /// the policy copy.
    pub fn new(base: LanguageModel, lora: &LoraConfig, seed: u64) -> Result<Self> {
        if base.has_adapters() {
            return Err(Error::Contract("base model already carries adapters".into()));
        }
        let mut reference = base.clone();
        reference.freeze();
        let mut policy = base;
        policy.attach_lora(lora, seed)?;
        Ok(Self { policy, reference })
    }

    pub fn max_seq_len(&self) -> usize {
        self.policy.config().max_seq_len
    }
}

/// A preference record laid out as two token sequences sharing the prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub chosen: Vec<u32>,
    pub chosen_start: usize,
    pub rejected: Vec<u32>,
    pub rejected_start: usize,
}

impl EncodedPair {
    pub fn new(record: &PreferenceRecord, max_seq_len: usize) -> Result<Self> {
        let tk = Tokenizer;
        let (chosen, chosen_start) = tk.format_pair(record.prompt.as_bytes(), record.chosen.as_bytes(), max_seq_len)?;
        let (rejected, rejected_start) =
            tk.format_pair(record.prompt.as_bytes(), record.rejected.as_bytes(), max_seq_len)?;
        Ok(Self {
            chosen,
            chosen_start,
            rejected,
            rejected_start,
        })
    }

    /// The same pair with preference reversed.
    pub fn swapped(&self) -> Self {
        Self {
            chosen: self.rejected.clone(),
            chosen_start: self.rejected_start,
            rejected: self.chosen.clone(),
            rejected_start: self.chosen_start,
        }
    }
}

/// `(log π_θ(y|x), log π_ref(y|x))` for one formatted sequence.
pub fn log_ratios(pair: &PolicyPair, prompt: &[u8], response: &[u8]) -> Result<(f64, f64)> {
    let (ids, start) = Tokenizer.format_pair(prompt, response, pair.max_seq_len())?;
    Ok((
        pair.policy.sequence_logprob_value(&ids, start)?,
        pair.reference.sequence_logprob_value(&ids, start)?,
    ))
}

/// `β[(log π_θ − log π_ref)(y_w) − (log π_θ − log π_ref)(y_l)]`.
pub fn margin_from_logprobs(
    beta: f64,
    policy_chosen: f64,
    ref_chosen: f64,
    policy_rejected: f64,
    ref_rejected: f64,
) -> f64 {
    beta * ((policy_chosen - ref_chosen) - (policy_rejected - ref_rejected))
}

/// Reward margin of `policy` over `reference` for one prompt.
pub fn reward_margin_with<P: SequenceScorer, R: SequenceScorer>(
    policy: &P,
    reference: &R,
    prompt: &[u32],
    chosen: &[u32],
    rejected: &[u32],
    beta: f64,
) -> Result<f64> {
    Ok(margin_from_logprobs(
        beta,
        policy.logprob(prompt, chosen)?,
        reference.logprob(prompt, chosen)?,
        policy.logprob(prompt, rejected)?,
        reference.logprob(prompt, rejected)?,
    ))
}

pub fn reward_margin(pair: &PolicyPair, record: &PreferenceRecord, beta: f64) -> Result<f64> {
    let (pw, rw) = log_ratios(pair, record.prompt.as_bytes(), record.chosen.as_bytes())?;
    let (pl, rl) = log_ratios(pair, record.prompt.as_bytes(), record.rejected.as_bytes())?;
    Ok(margin_from_logprobs(beta, pw, rw, pl, rl))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DpoBatchStats {
    pub loss: f64,
    pub mean_margin: f64,
    pub mean_chosen_reward: f64,
    pub mean_rejected_reward: f64,
    pub preference_accuracy: f64,
    pub records: usize,
}

/// Accuracy contribution of one margin: 1 if positive, ½ on a tie.
pub fn preference_score(margin: f64) -> f64 {
    if margin > 0.0 {
        1.0
    } else if margin == 0.0 {
        0.5
    } else {
        0.0
    }
}

/// Reference log-probabilities `(chosen, rejected)`, computed off-tape.
pub fn reference_logprobs(reference: &LanguageModel, pair: &EncodedPair) -> Result<(f64, f64)> {
    Ok((
        reference.sequence_logprob_value(&pair.chosen, pair.chosen_start)?,
        reference.sequence_logprob_value(&pair.rejected, pair.rejected_start)?,
    ))
}

/// Mean of `−log σ(margin)` over the batch, recorded on `tape` so that
/// gradients reach the policy's trainable parameters. `reference` supplies
/// precomputed reference log-probabilities; pass `None` to compute them.
pub fn dpo_loss(
    tape: &mut Tape,
    pair: &PolicyPair,
    batch: &[EncodedPair],
    reference: Option<&[(f64, f64)]>,
    beta: f64,
    mode: &mut Mode<'_>,
) -> Result<(Var, DpoBatchStats)> {
    if batch.is_empty() {
        return Err(Error::Contract("dpo_loss needs a non-empty batch".into()));
    }
    if let Some(r) = reference {
        if r.len() != batch.len() {
            return Err(Error::Contract(format!(
                "{} reference entries for a batch of {}",
                r.len(),
                batch.len()
            )));
        }
    }
    let n = batch.len() as f64;
    let mut stats = DpoBatchStats {
        records: batch.len(),
        ..DpoBatchStats::default()
    };
    let mut total: Option<Var> = None;
    for (i, item) in batch.iter().enumerate() {
        let (ref_w, ref_l) = match reference {
            Some(r) => r[i],
            None => reference_logprobs(&pair.reference, item)?,
        };
        let lw = pair
            .policy
            .sequence_logprob(tape, &item.chosen, item.chosen_start, mode)?;
        let ll = pair
            .policy
            .sequence_logprob(tape, &item.rejected, item.rejected_start, mode)?;
        let diff = tape.sub(lw, ll)?;
        let shift = tape.constant(crate::Tensor::scalar(-(ref_w - ref_l)));
        let diff = tape.add(diff, shift)?;
        let margin = tape.scale(diff, beta);
        let ls = tape.log_sigmoid(margin);
        let term = tape.scale(ls, -1.0 / n);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });

        let m = tape.scalar(margin);
        let chosen_reward = beta * (tape.scalar(lw) - ref_w);
        let rejected_reward = beta * (tape.scalar(ll) - ref_l);
        stats.mean_margin += m / n;
        stats.mean_chosen_reward += chosen_reward / n;
        stats.mean_rejected_reward += rejected_reward / n;
        stats.preference_accuracy += preference_score(m) / n;
    }
    let loss = total.expect("batch is non-empty");
    stats.loss = tape.scalar(loss);
    Ok((loss, stats))
}

/// Evaluation-mode loss and statistics without gradients.
pub fn evaluate_batch(pair: &PolicyPair, batch: &[EncodedPair], beta: f64) -> Result<DpoBatchStats> {
    let mut tape = Tape::new();
    let (_, stats) = dpo_loss(&mut tape, pair, batch, None, beta, &mut Mode::Eval)?;
    Ok(stats)
}

/// Finite-difference step of [`dpo_gradient_check`].
pub const DPO_CHECK_STEP: f64 = 1e-3;

/// Worst relative error between the tape gradient of [`dpo_loss`] with
/// respect to every adapter entry and five-point differences (step
/// [`DPO_CHECK_STEP`]) through the full network. Uses a small random model
/// with non-zero adapters so no coordinate is structurally zero.
pub fn dpo_gradient_check(seed: u64) -> Result<f64> {
    use rand::{Rng as _, SeedableRng};

    let config = crate::lm::ModelConfig {
        layers: 1,
        heads: 2,
        embed_dim: 8,
        max_seq_len: 32,
        vocab_size: crate::lm::VOCAB_SIZE,
    };
    let mut base = LanguageModel::new(config, seed)?;
    let mut rng = crate::Rng::seed_from_u64(seed.wrapping_add(2));
    // Unit-scale weights keep gradients well above finite-difference noise.
    for (_, p) in base.store_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let lora = LoraConfig {
        rank: 2,
        dropout: 0.0,
        ..LoraConfig::default()
    };
    let mut pair = PolicyPair::new(base, &lora, seed.wrapping_add(1))?;
    let ids: Vec<_> = pair
        .policy
        .adapters()
        .iter()
        .flat_map(|(_, a)| [a.adapter.a, a.adapter.b])
        .collect();
    for &id in &ids {
        for v in pair.policy.store_mut().get_mut(id).value.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let records = [
        PreferenceRecord::new("hi?", "yo, sup!", "Greetings."),
        PreferenceRecord::new("tea", "love it lol", "It is a beverage."),
    ];
    let batch: Vec<EncodedPair> = records
        .iter()
        .map(|r| EncodedPair::new(r, pair.max_seq_len()))
        .collect::<Result<_>>()?;

    let mut tape = Tape::new();
    let (loss, _) = dpo_loss(
        &mut tape,
        &pair,
        &batch,
        None,
        DpoConfig::default().beta,
        &mut Mode::Eval,
    )?;
    tape.backward(loss)?.accumulate_into(pair.policy.store_mut())?;
    let mut analytic = Vec::new();
    let mut point = Vec::new();
    for &id in &ids {
        let p = pair.policy.store().get(id);
        analytic.extend_from_slice(p.grad.as_ref().map_or(&[][..], |g| g.data()));
        point.extend_from_slice(p.value.data());
    }
    if analytic.len() != point.len() {
        return Err(Error::Contract("adapter without gradient".into()));
    }
    pair.policy.store_mut().zero_grad();

    let sizes: Vec<usize> = ids
        .iter()
        .map(|&id| pair.policy.store().get(id).value.numel())
        .collect();
    let mut failure = None;
    let numeric = crate::autodiff::numeric_gradient_five_point(
        |x| {
            let mut offset = 0;
            for (&id, &n) in ids.iter().zip(&sizes) {
                pair.policy
                    .store_mut()
                    .get_mut(id)
                    .value
                    .data_mut()
                    .copy_from_slice(&x[offset..offset + n]);
                offset += n;
            }
            match evaluate_batch(&pair, &batch, DpoConfig::default().beta) {
                Ok(s) => s.loss,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &point,
        DPO_CHECK_STEP,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(crate::autodiff::max_relative_error(&analytic, &numeric))
}

impl SequenceScorer for LanguageModel {
    /// `prompt` and `response` are raw byte tokens; the chat layout is added.
    fn logprob(&self, prompt: &[u32], response: &[u32]) -> Result<f64> {
        let mut ids = Vec::with_capacity(prompt.len() + response.len() + 3);
        ids.push(crate::lm::BOS);
        ids.extend_from_slice(prompt);
        ids.push(crate::lm::SEP);
        let start = ids.len();
        ids.extend_from_slice(response);
        ids.push(crate::lm::EOS);
        if ids.len() > self.config().max_seq_len {
            return Err(Error::Truncation {
                len: ids.len(),
                limit: self.config().max_seq_len,
            });
        }
        self.sequence_logprob_value(&ids, start)
    }
}
