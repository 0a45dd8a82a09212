use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};

use crate::error::{Error, Result};
use crate::math;
use crate::Rng;

use super::model::LanguageModel;
use super::tokenizer::{Tokenizer, BYTE_TOKENS, EOS};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct GenerationParams {
    /// Zero means greedy decoding.
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_tokens: 128,
            seed: 0,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be finite and non-negative".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config("top_p must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Samples a response to `prompt`, stopping at EOS, after `max_tokens`, or
/// when the context window is full. Only byte tokens and EOS are eligible.
pub fn generate(model: &LanguageModel, prompt: &[u8], params: &GenerationParams) -> Result<Vec<u8>> {
    params.validate()?;
    let limit = model.config().max_seq_len;
    let mut ids = Tokenizer.format_prompt(prompt, limit)?;
    let mut rng = Rng::seed_from_u64(params.seed);
    let mut out = Vec::new();
    while out.len() < params.max_tokens && ids.len() < limit {
        let lp = model.next_token_logprobs(&ids)?;
        let next = pick_token(&lp, params, &mut rng);
        if next == EOS {
            break;
        }
        out.push(next as u8);
        ids.push(next);
    }
    Ok(out)
}

fn eligible(id: usize) -> bool {
    id < BYTE_TOKENS as usize || id == EOS as usize
}

fn pick_token(logprobs: &[f64], params: &GenerationParams, rng: &mut Rng) -> u32 {
    let candidates: Vec<usize> = (0..logprobs.len()).filter(|&i| eligible(i)).collect();
    if params.temperature == 0.0 {
        // First maximum wins, so ties are deterministic.
        let mut best = candidates[0];
        for &i in &candidates[1..] {
            if logprobs[i] > logprobs[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let scaled: Vec<f64> = candidates.iter().map(|&i| logprobs[i] / params.temperature).collect();
    let norm = math::log_sum_exp(&scaled);
    let mut ranked: Vec<(usize, f64)> = candidates
        .iter()
        .zip(&scaled)
        .map(|(&i, &s)| (i, math::exp(s - norm)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept = 0;
    let mut mass = 0.0;
    for (_, p) in &ranked {
        mass += p;
        kept += 1;
        if mass >= params.top_p {
            break;
        }
    }
    ranked.truncate(kept);
    let mut u = rng.random::<f64>() * mass;
    for (i, p) in &ranked {
        if u < *p {
            return *i as u32;
        }
        u -= p;
    }
    ranked[ranked.len() - 1].0 as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::model::ModelConfig;
    use crate::lm::tokenizer::VOCAB_SIZE;
    use alloc::vec;

    fn model() -> LanguageModel {
        LanguageModel::new(
            ModelConfig {
                layers: 1,
                heads: 1,
                embed_dim: 8,
                max_seq_len: 32,
                vocab_size: VOCAB_SIZE,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn deterministic_under_seed() {
        let m = model();
        let p = GenerationParams {
            temperature: 1.0,
            top_p: 0.95,
            max_tokens: 10,
            seed: 42,
        };
        let a = generate(&m, b"hi", &p).unwrap();
        assert_eq!(a, generate(&m, b"hi", &p).unwrap());
        assert!(a.len() <= 10);
    }

    #[test]
    fn respects_context_window() {
        let m = model();
        let p = GenerationParams {
            temperature: 1.0,
            top_p: 1.0,
            max_tokens: 1000,
            seed: 1,
        };
        let out = generate(&m, &[b'a'; 20], &p).unwrap();
        assert!(out.len() <= 32 - 22);
        assert!(matches!(generate(&m, &[b'a'; 31], &p), Err(Error::Truncation { .. })));
    }

    #[test]
    fn greedy_picks_argmax_and_top_p_truncates() {
        let mut lp = vec![f64::NEG_INFINITY; VOCAB_SIZE];
        lp[b'x' as usize] = (0.6f64).ln();
        lp[b'y' as usize] = (0.3f64).ln();
        lp[EOS as usize] = (0.1f64).ln();
        let mut rng = Rng::seed_from_u64(0);
        let greedy = GenerationParams {
            temperature: 0.0,
            ..Default::default()
        };
        assert_eq!(pick_token(&lp, &greedy, &mut rng), b'x' as u32);
        let nucleus = GenerationParams {
            temperature: 1.0,
            top_p: 0.5,
            ..Default::default()
        };
        for _ in 0..50 {
            assert_eq!(pick_token(&lp, &nucleus, &mut rng), b'x' as u32);
        }
    }

    #[test]
    fn rejects_bad_params() {
        let m = model();
        let bad = GenerationParams {
            top_p: 0.0,
            ..Default::default()
        };
        assert!(generate(&m, b"", &bad).is_err());
    }
}
