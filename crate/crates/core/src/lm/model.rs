use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lora::{AdaptedLinear, LoraAdapter, LoraConfig, LoraTarget};
use crate::math;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{Mode, Rng};

use super::tokenizer::VOCAB_SIZE;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            embed_dim: 64,
            max_seq_len: 256,
            vocab_size: VOCAB_SIZE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("embed_dim", self.embed_dim),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// A linear map stored `out × in`, optionally carrying a LoRA adapter.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Plain(ParamId),
    Adapted(AdaptedLinear),
}

impl Projection {
    pub fn weight(&self) -> ParamId {
        match self {
            Projection::Plain(id) => *id,
            Projection::Adapted(a) => a.base,
        }
    }

    pub fn adapter(&self) -> Option<&AdaptedLinear> {
        match self {
            Projection::Plain(_) => None,
            Projection::Adapted(a) => Some(a),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        match self {
            Projection::Plain(id) => {
                let w = tape.param(store, *id);
                tape.matmul_nt(x, w)
            }
            Projection::Adapted(layer) => layer.forward(tape, store, x, mode),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    query: Projection,
    key: Projection,
    value: Projection,
    output: Projection,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    mlp_in: Projection,
    mlp_in_bias: ParamId,
    mlp_out: Projection,
    mlp_out_bias: ParamId,
}

impl Block {
    fn projection_mut(&mut self, target: LoraTarget) -> &mut Projection {
        match target {
            LoraTarget::Query => &mut self.query,
            LoraTarget::Key => &mut self.key,
            LoraTarget::Value => &mut self.value,
            LoraTarget::Output => &mut self.output,
            LoraTarget::MlpIn => &mut self.mlp_in,
            LoraTarget::MlpOut => &mut self.mlp_out,
        }
    }

    fn projection(&self, target: LoraTarget) -> &Projection {
        match target {
            LoraTarget::Query => &self.query,
            LoraTarget::Key => &self.key,
            LoraTarget::Value => &self.value,
            LoraTarget::Output => &self.output,
            LoraTarget::MlpIn => &self.mlp_in,
            LoraTarget::MlpOut => &self.mlp_out,
        }
    }
}

const ALL_TARGETS: [LoraTarget; 6] = [
    LoraTarget::Query,
    LoraTarget::Key,
    LoraTarget::Value,
    LoraTarget::Output,
    LoraTarget::MlpIn,
    LoraTarget::MlpOut,
];

/// Pre-norm decoder-only transformer over the byte vocabulary with learned
/// positions and tied input/output embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    config: ModelConfig,
    store: ParamStore,
    token_embedding: ParamId,
    position_embedding: ParamId,
    blocks: Vec<Block>,
    final_gain: ParamId,
    final_bias: ParamId,
}

impl LanguageModel {
    /// Randomly initialized model (weights `N(0, 0.02²)`, unit norms).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut gaussian = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("shape")
        };
        Self::build(&config, |name, shape| {
            if name.ends_with("gain") {
                Tensor::filled(shape, 1.0)
            } else if name.ends_with("bias") {
                Tensor::zeros(shape)
            } else {
                gaussian(shape)
            }
        })
    }

    /// Rebuilds a model from named weights, e.g. a loaded checkpoint. Every
    /// expected weight must be present with the expected shape.
    pub fn from_weights(config: ModelConfig, weights: &[(String, Tensor)]) -> Result<Self> {
        config.validate()?;
        let mut missing = None;
        let model = Self::build(&config, |name, shape| match weights.iter().find(|(n, _)| n == name) {
            Some((_, t)) if t.shape() == shape => t.clone(),
            _ => {
                missing.get_or_insert_with(|| String::from(name));
                Tensor::zeros(shape)
            }
        })?;
        if let Some(name) = missing {
            return Err(Error::Config(format!(
                "checkpoint weight `{name}` missing or misshapen"
            )));
        }
        if weights.len() != model.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} weights, model expects {}",
                weights.len(),
                model.store.len()
            )));
        }
        Ok(model)
    }

    fn build(config: &ModelConfig, mut init: impl FnMut(&str, &[usize]) -> Tensor) -> Result<Self> {
        let d = config.embed_dim;
        let mut store = ParamStore::new();
        let mut param = |store: &mut ParamStore, name: String, shape: &[usize]| {
            let t = init(&name, shape);
            store.push(name, t, true)
        };
        let token_embedding = param(&mut store, "token_embedding".into(), &[config.vocab_size, d]);
        let position_embedding = param(&mut store, "position_embedding".into(), &[config.max_seq_len, d]);
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut p = |suffix: &str, shape: &[usize]| param(&mut store, format!("block{l}.{suffix}"), shape);
            blocks.push(Block {
                ln1_gain: p("ln1.gain", &[d]),
                ln1_bias: p("ln1.bias", &[d]),
                query: Projection::Plain(p("attn.query", &[d, d])),
                key: Projection::Plain(p("attn.key", &[d, d])),
                value: Projection::Plain(p("attn.value", &[d, d])),
                output: Projection::Plain(p("attn.output", &[d, d])),
                ln2_gain: p("ln2.gain", &[d]),
                ln2_bias: p("ln2.bias", &[d]),
                mlp_in: Projection::Plain(p("mlp.in", &[4 * d, d])),
                mlp_in_bias: p("mlp.in.bias", &[4 * d]),
                mlp_out: Projection::Plain(p("mlp.out", &[d, 4 * d])),
                mlp_out_bias: p("mlp.out.bias", &[d]),
            });
        }
        let final_gain = param(&mut store, "final_ln.gain".into(), &[d]);
        let final_bias = param(&mut store, "final_ln.bias".into(), &[d]);
        Ok(Self {
            config: config.clone(),
            store,
            token_embedding,
            position_embedding,
            blocks,
            final_gain,
            final_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Marks every parameter frozen.
    pub fn freeze(&mut self) {
        self.store.freeze_all();
    }

    /// Base weights (everything that is not an adapter matrix) by name.
    pub fn base_weights(&self) -> Vec<(String, Tensor)> {
        let adapter_ids = self.adapter_param_ids();
        self.store
            .iter()
            .filter(|(id, _)| !adapter_ids.contains(id))
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect()
    }

    fn adapter_param_ids(&self) -> Vec<ParamId> {
        self.adapters()
            .iter()
            .flat_map(|(_, a)| [a.adapter.a, a.adapter.b])
            .collect()
    }

    /// SHA-256 of all non-adapter weights.
    pub fn base_digest(&self) -> [u8; 32] {
        let adapter_ids = self.adapter_param_ids();
        let names: Vec<&str> = adapter_ids.iter().map(|id| self.store.get(*id).name.as_str()).collect();
        self.store.digest(|p| !names.contains(&p.name.as_str()))
    }

    /// Freezes the whole base and attaches adapters to the configured targets
    /// of every block.
    pub fn attach_lora(&mut self, config: &LoraConfig, seed: u64) -> Result<()> {
        config.validate()?;
        if self.has_adapters() {
            return Err(Error::Contract("adapters are already attached".into()));
        }
        self.store.freeze_all();
        let mut rng = Rng::seed_from_u64(seed);
        for block in &mut self.blocks {
            for target in ALL_TARGETS {
                if !config.targets.contains(&target) {
                    continue;
                }
                let proj = block.projection_mut(target);
                let layer = AdaptedLinear::attach(&mut self.store, proj.weight(), config, &mut rng)?;
                *proj = Projection::Adapted(layer);
            }
        }
        Ok(())
    }

    /// Re-creates adapters from stored `A`/`B` matrices keyed by base weight
    /// name, refusing shapes that do not fit the base.
    pub fn load_lora(
        &mut self,
        rank: usize,
        alpha: f64,
        dropout: f64,
        layers: &[(String, Tensor, Tensor)],
    ) -> Result<()> {
        if self.has_adapters() {
            return Err(Error::Contract("adapters are already attached".into()));
        }
        self.store.freeze_all();
        for (name, a, b) in layers {
            let base = self
                .store
                .find(name)
                .ok_or_else(|| Error::Config(format!("adapter targets unknown weight `{name}`")))?;
            let (d, k) = self.store.get(base).value.dims2("load_lora")?;
            if a.shape() != [rank, k] || b.shape() != [d, rank] {
                return Err(Error::Config(format!(
                    "adapter for `{name}` has A {:?} and B {:?}, base is {d}x{k} at rank {rank}",
                    a.shape(),
                    b.shape()
                )));
            }
            let a_id = self.store.push(format!("{name}.lora_a"), a.clone(), true);
            let b_id = self.store.push(format!("{name}.lora_b"), b.clone(), true);
            let layer = AdaptedLinear::from_parts(
                base,
                LoraAdapter {
                    a: a_id,
                    b: b_id,
                    rank,
                    alpha,
                    dropout,
                },
            );
            let slot = self
                .blocks
                .iter()
                .enumerate()
                .find_map(|(bi, blk)| {
                    ALL_TARGETS
                        .iter()
                        .find(|t| blk.projection(**t).weight() == base)
                        .map(|t| (bi, *t))
                })
                .ok_or_else(|| Error::Config(format!("`{name}` is not an adaptable projection")))?;
            *self.blocks[slot.0].projection_mut(slot.1) = Projection::Adapted(layer);
        }
        Ok(())
    }

    pub fn has_adapters(&self) -> bool {
        !self.adapters().is_empty()
    }

    /// Attached adapters with the name of the base weight they modify.
    pub fn adapters(&self) -> Vec<(String, &AdaptedLinear)> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for target in ALL_TARGETS {
                if let Some(a) = block.projection(target).adapter() {
                    out.push((self.store.get(a.base).name.clone(), a));
                }
            }
        }
        out
    }

    /// Final normalized hidden states `T × d`.
    pub fn hidden(&self, tape: &mut Tape, ids: &[u32], mode: &mut Mode<'_>) -> Result<Var> {
        let t = ids.len();
        if t == 0 {
            return Err(Error::Empty("token sequence"));
        }
        if t > self.config.max_seq_len {
            return Err(Error::Truncation {
                len: t,
                limit: self.config.max_seq_len,
            });
        }
        let s = &self.store;
        let tok = tape.param(s, self.token_embedding);
        let pos = tape.param(s, self.position_embedding);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..t).collect();
        let te = tape.gather_rows(tok, &idx)?;
        let pe = tape.gather_rows(pos, &positions)?;
        let mut x = tape.add(te, pe)?;
        let hd = self.config.head_dim();
        let inv_sqrt = 1.0 / math::sqrt(hd as f64);
        for b in &self.blocks {
            let h = self.norm(tape, x, b.ln1_gain, b.ln1_bias)?;
            let q = b.query.forward(tape, s, h, mode)?;
            let k = b.key.forward(tape, s, h, mode)?;
            let v = b.value.forward(tape, s, h, mode)?;
            let mut heads = Vec::with_capacity(self.config.heads);
            for head in 0..self.config.heads {
                let qh = tape.slice_cols(q, head * hd, hd)?;
                let kh = tape.slice_cols(k, head * hd, hd)?;
                let vh = tape.slice_cols(v, head * hd, hd)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, inv_sqrt);
                let att = tape.causal_softmax(scores)?;
                heads.push(tape.matmul(att, vh)?);
            }
            let cat = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)?
            };
            let o = b.output.forward(tape, s, cat, mode)?;
            x = tape.add(x, o)?;
            let h2 = self.norm(tape, x, b.ln2_gain, b.ln2_bias)?;
            let m = b.mlp_in.forward(tape, s, h2, mode)?;
            let mb = tape.param(s, b.mlp_in_bias);
            let m = tape.add_row(m, mb)?;
            let m = tape.gelu(m);
            let m = b.mlp_out.forward(tape, s, m, mode)?;
            let ob = tape.param(s, b.mlp_out_bias);
            let m = tape.add_row(m, ob)?;
            x = tape.add(x, m)?;
        }
        self.norm(tape, x, self.final_gain, self.final_bias)
    }

    fn norm(&self, tape: &mut Tape, x: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
        let n = tape.layer_norm(x, LN_EPS);
        let g = tape.param(&self.store, gain);
        let b = tape.param(&self.store, bias);
        let n = tape.mul_row(n, g)?;
        tape.add_row(n, b)
    }

    /// Logits `rows × V` for hidden states through the tied embedding.
    pub fn project(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let tok = tape.param(&self.store, self.token_embedding);
        tape.matmul_nt(hidden, tok)
    }

    /// Next-token logits `T × V` for every position.
    pub fn forward(&self, tape: &mut Tape, ids: &[u32], mode: &mut Mode<'_>) -> Result<Var> {
        let h = self.hidden(tape, ids, mode)?;
        self.project(tape, h)
    }

    /// Evaluation-mode logits without keeping the tape.
    pub fn logits(&self, ids: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, ids, &mut Mode::Eval)?;
        Ok(tape.value(out).clone())
    }

    /// Log-probabilities of the last position only.
    pub fn next_token_logprobs(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let h = self.hidden(&mut tape, ids, &mut Mode::Eval)?;
        let last = tape.slice_rows(h, ids.len() - 1, 1)?;
        let logits = self.project(&mut tape, last)?;
        let lp = tape.log_softmax(logits)?;
        Ok(tape.value(lp).data().to_vec())
    }

    /// `Σ_{t ≥ start} log p(ids[t] | ids[<t])` recorded on `tape`.
    pub fn sequence_logprob(
        &self,
        tape: &mut Tape,
        ids: &[u32],
        response_start: usize,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        if response_start == 0 || response_start >= ids.len() {
            return Err(Error::Contract(format!(
                "response start {response_start} outside 1..{}",
                ids.len()
            )));
        }
        let h = self.hidden(tape, ids, mode)?;
        let n = ids.len() - response_start;
        let rows = tape.slice_rows(h, response_start - 1, n)?;
        let logits = self.project(tape, rows)?;
        let lp = tape.log_softmax(logits)?;
        let at: Vec<(usize, usize)> = (0..n).map(|i| (i, ids[response_start + i] as usize)).collect();
        let picked = tape.pick(lp, &at)?;
        Ok(tape.sum(picked))
    }

    /// Evaluation-mode value of [`LanguageModel::sequence_logprob`].
    pub fn sequence_logprob_value(&self, ids: &[u32], response_start: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let v = self.sequence_logprob(&mut tape, ids, response_start, &mut Mode::Eval)?;
        Ok(tape.scalar(v))
    }

    /// Mean next-token negative log-likelihood over every position after the
    /// first, and the number of predicted tokens.
    pub fn nll(&self, tape: &mut Tape, ids: &[u32], mode: &mut Mode<'_>) -> Result<(Var, usize)> {
        if ids.len() < 2 {
            return Err(Error::Contract("need at least two tokens to score".into()));
        }
        let lp = self.sequence_logprob(tape, ids, 1, mode)?;
        let n = ids.len() - 1;
        Ok((tape.scale(lp, -1.0 / n as f64), n))
    }
}
