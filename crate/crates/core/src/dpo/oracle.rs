use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use super::SequenceScorer;
use crate::error::{Error, Result};
use crate::math;
use crate::Rng;

/// Largest `V^max_len` the enumeration oracles accept.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// A next-token distribution over content tokens `0..vocab` plus EOS, which
/// sits at index `vocab` of the returned log-probabilities.
pub trait AutoregressivePolicy {
    fn vocab(&self) -> usize;
    fn next_logprobs(&self, prompt: &[u32], prefix: &[u32]) -> Result<Vec<f64>>;
}

/// `log π(y|x)` where `y` is followed by EOS, or by nothing when it already
/// has `max_len` tokens (EOS is then forced with probability one).
pub fn policy_logprob<P: AutoregressivePolicy + ?Sized>(
    policy: &P,
    prompt: &[u32],
    y: &[u32],
    max_len: usize,
) -> Result<f64> {
    if y.len() > max_len {
        return Err(Error::Truncation {
            len: y.len(),
            limit: max_len,
        });
    }
    let v = policy.vocab();
    let mut total = 0.0;
    for t in 0..y.len() {
        if y[t] as usize >= v {
            return Err(Error::Vocabulary { id: y[t], vocab: v });
        }
        total += policy.next_logprobs(prompt, &y[..t])?[y[t] as usize];
    }
    if y.len() < max_len {
        total += policy.next_logprobs(prompt, y)?[v];
    }
    Ok(total)
}

fn check_capacity(vocab: usize, max_len: usize) -> Result<()> {
    let required = (vocab as u128).checked_pow(max_len as u32).unwrap_or(u128::MAX);
    if required > ENUMERATION_LIMIT {
        return Err(Error::Capacity {
            required,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(())
}

/// Every response of at most `max_len` content tokens, shortest first.
pub fn enumerate_responses(vocab: usize, max_len: usize) -> Result<Vec<Vec<u32>>> {
    check_capacity(vocab, max_len)?;
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(frontier.len() * vocab);
        for prefix in &frontier {
            for tok in 0..vocab as u32 {
                let mut y: Vec<u32> = prefix.clone();
                y.push(tok);
                next.push(y);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    Ok(out)
}

/// `ln Z(x) = ln Σ_y π_ref(y|x)·exp(r(x,y)/β)` by exhaustive enumeration.
pub fn log_partition_function<P, F>(reference: &P, reward: F, prompt: &[u32], max_len: usize, beta: f64) -> Result<f64>
where
    P: AutoregressivePolicy + ?Sized,
    F: Fn(&[u32], &[u32]) -> f64,
{
    let terms = weighted_terms(reference, &reward, prompt, max_len, beta)?;
    let logs: Vec<f64> = terms.iter().map(|(_, lr, r)| lr + r / beta).collect();
    Ok(math::log_sum_exp(&logs))
}

/// `Z(x)`, see [`log_partition_function`].
pub fn partition_function<P, F>(reference: &P, reward: F, prompt: &[u32], max_len: usize, beta: f64) -> Result<f64>
where
    P: AutoregressivePolicy + ?Sized,
    F: Fn(&[u32], &[u32]) -> f64,
{
    Ok(math::exp(log_partition_function(
        reference, reward, prompt, max_len, beta,
    )?))
}

type Term = (Vec<u32>, f64, f64);

fn weighted_terms<P, F>(reference: &P, reward: &F, prompt: &[u32], max_len: usize, beta: f64) -> Result<Vec<Term>>
where
    P: AutoregressivePolicy + ?Sized,
    F: Fn(&[u32], &[u32]) -> f64,
{
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    enumerate_responses(reference.vocab(), max_len)?
        .into_iter()
        .map(|y| {
            let lr = policy_logprob(reference, prompt, &y, max_len)?;
            let r = reward(prompt, &y);
            Ok((y, lr, r))
        })
        .collect()
}

/// An explicit distribution over complete responses for a single prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDistribution {
    logprobs: BTreeMap<Vec<u32>, f64>,
}

impl SequenceDistribution {
    pub fn iter(&self) -> impl Iterator<Item = (&Vec<u32>, f64)> {
        self.logprobs.iter().map(|(y, lp)| (y, *lp))
    }

    pub fn len(&self) -> usize {
        self.logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.logprobs.values().map(|lp| math::exp(*lp)).sum()
    }
}

impl SequenceScorer for SequenceDistribution {
    fn logprob(&self, _prompt: &[u32], response: &[u32]) -> Result<f64> {
        self.logprobs
            .get(response)
            .copied()
            .ok_or_else(|| Error::Contract(format!("response {response:?} outside the enumerated space")))
    }
}

/// `π_r(y|x) = π_ref(y|x)·exp(r(x,y)/β) / Z(x)` over the enumerated space.
pub fn optimal_policy<P, F>(
    reference: &P,
    reward: F,
    prompt: &[u32],
    max_len: usize,
    beta: f64,
) -> Result<SequenceDistribution>
where
    P: AutoregressivePolicy + ?Sized,
    F: Fn(&[u32], &[u32]) -> f64,
{
    let terms = weighted_terms(reference, &reward, prompt, max_len, beta)?;
    let logs: Vec<f64> = terms.iter().map(|(_, lr, r)| lr + r / beta).collect();
    let log_z = math::log_sum_exp(&logs);
    Ok(SequenceDistribution {
        logprobs: terms
            .into_iter()
            .zip(logs)
            .map(|((y, _, _), l)| (y, l - log_z))
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptimalPolicyReport {
    pub partition: f64,
    pub log_partition: f64,
    /// `|Σ_y π_r(y|x) − 1|`
    pub normalization_defect: f64,
    /// `max_y |r(x,y) − β ln(π_r/π_ref) − β ln Z(x)|`
    pub reparameterization_residual: f64,
    pub sequences: usize,
}

pub fn optimal_policy_check<P, F>(
    reference: &P,
    reward: F,
    beta: f64,
    prompt: &[u32],
    max_len: usize,
) -> Result<OptimalPolicyReport>
where
    P: AutoregressivePolicy + ?Sized,
    F: Fn(&[u32], &[u32]) -> f64,
{
    let log_z = log_partition_function(reference, &reward, prompt, max_len, beta)?;
    let pi_r = optimal_policy(reference, &reward, prompt, max_len, beta)?;
    let mut residual: f64 = 0.0;
    for (y, lp) in pi_r.iter() {
        let lr = policy_logprob(reference, prompt, y, max_len)?;
        let r = reward(prompt, y);
        let d = (r - beta * (lp - lr) - beta * log_z).abs();
        residual = if d.is_nan() { f64::NAN } else { residual.max(d) };
    }
    Ok(OptimalPolicyReport {
        partition: math::exp(log_z),
        log_partition: log_z,
        normalization_defect: (pi_r.total_mass() - 1.0).abs(),
        reparameterization_residual: residual,
        sequences: pi_r.len(),
    })
}

/// A toy autoregressive policy for one prompt with an explicit table of
/// next-token log-probabilities for every prefix shorter than `max_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab: usize,
    max_len: usize,
    table: BTreeMap<Vec<u32>, Vec<f64>>,
}

impl TabularPolicy {
    /// Random logits `N(0, spread²)` at every prefix, normalized per row.
    pub fn random(vocab: usize, max_len: usize, spread: f64, seed: u64) -> Result<Self> {
        let mut rng = Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, spread).map_err(|_| Error::Config(format!("bad spread {spread}")))?;
        Self::build(vocab, max_len, |_| {
            (0..=vocab).map(|_| normal.sample(&mut rng)).collect()
        })
    }

    pub fn uniform(vocab: usize, max_len: usize) -> Result<Self> {
        Self::build(vocab, max_len, |_| vec![0.0; vocab + 1])
    }

    /// Builds from raw logits per prefix; each row is log-softmax normalized.
    pub fn build(vocab: usize, max_len: usize, mut logits: impl FnMut(&[u32]) -> Vec<f64>) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::Config("toy vocabulary must be non-empty".into()));
        }
        let mut table = BTreeMap::new();
        for prefix in enumerate_responses(vocab, max_len)? {
            if prefix.len() == max_len {
                continue;
            }
            let row = logits(&prefix);
            if row.len() != vocab + 1 {
                return Err(Error::Shape {
                    op: "tabular_policy",
                    lhs: vec![row.len()],
                    rhs: vec![vocab + 1],
                });
            }
            let norm = math::log_sum_exp(&row);
            table.insert(prefix, row.iter().map(|l| l - norm).collect());
        }
        Ok(Self { vocab, max_len, table })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }
}

impl AutoregressivePolicy for TabularPolicy {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn next_logprobs(&self, _prompt: &[u32], prefix: &[u32]) -> Result<Vec<f64>> {
        self.table
            .get(prefix)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("no distribution for prefix {prefix:?}")))
    }
}

impl SequenceScorer for TabularPolicy {
    fn logprob(&self, prompt: &[u32], response: &[u32]) -> Result<f64> {
        policy_logprob(self, prompt, response, self.max_len)
    }
}
