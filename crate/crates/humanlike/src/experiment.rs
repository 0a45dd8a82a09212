//! The desk-scale run end to end: stub data, a pretrained base, the DPO
//! stage on top of it, and the retention check.

use humanlike_core::arena::{perplexity_retention, RetentionReport};
use humanlike_core::data::PreferenceRecord;
use humanlike_core::dpo::PolicyPair;
use humanlike_core::lm::{LanguageModel, Tokenizer};
use humanlike_core::train::{pretrain, MetricsLog, MetricsRow};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::datagen::{run_pipeline, StubBackend};
use crate::error::Result;

/// Every formatted `prompt → response` sequence (both styles) that fits the
/// context window. This is the base model's training corpus.
pub fn sft_corpus(records: &[PreferenceRecord], max_seq_len: usize) -> Vec<Vec<u32>> {
    records
        .iter()
        .flat_map(|r| {
            [&r.chosen, &r.rejected]
                .map(|resp| Tokenizer.format_pair(r.prompt.as_bytes(), resp.as_bytes(), max_seq_len))
        })
        .filter_map(|f| f.ok().map(|(ids, _)| ids))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskRunConfig {
    /// Preference pairs used for DPO.
    pub train_pairs: usize,
    /// Additional pairs held out for perplexity retention.
    pub heldout_pairs: usize,
    pub data_seed: u64,
    pub run_name: String,
}

impl Default for DeskRunConfig {
    fn default() -> Self {
        Self {
            train_pairs: 1600,
            heldout_pairs: 100,
            data_seed: 7,
            run_name: "desk".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeskRun {
    pub train: Vec<PreferenceRecord>,
    pub heldout: Vec<PreferenceRecord>,
    pub base: LanguageModel,
    pub pretrain_losses: Vec<f64>,
    pub pair: PolicyPair,
    pub log: MetricsLog,
    pub base_digest_before: [u8; 32],
    pub base_digest_after: [u8; 32],
    pub retention: RetentionReport,
}

/// Generates `train_pairs + heldout_pairs` stub records, pretrains the base
/// on the training split, runs DPO, and measures retention on the held-out
/// split.
pub fn desk_run(desk: &DeskRunConfig, config: &Config, mut on_step: impl FnMut(&MetricsRow)) -> Result<DeskRun> {
    let mut datagen = config.datagen.clone();
    datagen.count = desk.train_pairs + desk.heldout_pairs;
    let (mut records, _) = run_pipeline(&StubBackend::new(desk.data_seed), &datagen)?;
    let heldout = records.split_off(desk.train_pairs.min(records.len()));
    let train = records;

    let max_len = config.model.max_seq_len;
    let (base, pretrain_losses) = pretrain(&sft_corpus(&train, max_len), &config.pretrain, config.model.clone())?;
    let mut pair = PolicyPair::new(base.clone(), &config.lora, config.training.seed)?;
    let base_digest_before = pair.policy.base_digest();
    let log = humanlike_core::train::train_dpo(&mut pair, &train, &config.training, &desk.run_name, &mut on_step)?;
    let base_digest_after = pair.policy.base_digest();
    let retention = perplexity_retention(&base, &pair.policy, &sft_corpus(&heldout, max_len))?;
    Ok(DeskRun {
        train,
        heldout,
        base,
        pretrain_losses,
        pair,
        log,
        base_digest_before,
        base_digest_after,
        retention,
    })
}
