//! The numerical self-checks behind the `grad-check` and `oracle`
//! subcommands.

use std::collections::BTreeMap;

use humanlike_core::autodiff::run_primitive_suite;
use humanlike_core::dpo::{
    dpo_gradient_check, enumerate_responses, optimal_policy, optimal_policy_check, partition_function, policy_logprob,
    reward_margin_with, SequenceScorer, TabularPolicy,
};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientSuiteReport {
    /// Worst relative error per primitive over all seeds, in suite order.
    pub primitives: Vec<(String, f64)>,
    /// End-to-end `dpo_loss` error per seed, from five-point differences.
    pub dpo_loss: Vec<(u64, f64)>,
}

impl GradientSuiteReport {
    pub fn max_error(&self) -> f64 {
        self.primitives
            .iter()
            .map(|(_, e)| *e)
            .chain(self.dpo_loss.iter().map(|(_, e)| *e))
            .fold(0.0, |m, e| if e.is_nan() { f64::NAN } else { m.max(e) })
    }
}

pub fn gradient_suite(seeds: impl IntoIterator<Item = u64> + Clone, step: f64) -> Result<GradientSuiteReport> {
    let mut worst: Vec<(String, f64)> = Vec::new();
    for seed in seeds.clone() {
        for (i, (name, err)) in run_primitive_suite(seed, step).into_iter().enumerate() {
            match worst.get_mut(i) {
                Some(w) => w.1 = if err.is_nan() { f64::NAN } else { w.1.max(err) },
                None => worst.push((name.to_string(), err)),
            }
        }
    }
    let dpo_loss = seeds
        .into_iter()
        .map(|s| Ok((s, dpo_gradient_check(s)?)))
        .collect::<Result<_>>()?;
    Ok(GradientSuiteReport {
        primitives: worst,
        dpo_loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleToyReport {
    pub seed: u64,
    pub sequences: usize,
    pub partition: f64,
    pub normalization_defect: f64,
    pub reparameterization_residual: f64,
    /// `|Z(x) − 1|` under the zero reward.
    pub zero_reward_defect: f64,
    /// Worst gap between the log-ratio margin and the difference of full rewards.
    pub margin_error: f64,
}

impl OracleToyReport {
    pub fn max_error(&self) -> f64 {
        [
            self.normalization_defect,
            self.reparameterization_residual,
            self.zero_reward_defect,
            self.margin_error,
        ]
        .into_iter()
        .fold(0.0, |m, e| if e.is_nan() { f64::NAN } else { m.max(e) })
    }
}

/// Random reference and random rewards on one enumerable toy, checked
/// against the closed-form optimal-policy identities.
pub fn oracle_toy(vocab: usize, max_len: usize, beta: f64, seed: u64) -> Result<OracleToyReport> {
    let reference = TabularPolicy::random(vocab, max_len, 1.0, seed)?;
    let ys = enumerate_responses(vocab, max_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table: BTreeMap<Vec<u32>, f64> = ys.iter().map(|y| (y.clone(), rng.random_range(-1.0..1.0))).collect();
    let reward = |_: &[u32], y: &[u32]| table[y];

    let report = optimal_policy_check(&reference, reward, beta, &[], max_len)?;
    let z0 = partition_function(&reference, |_, _| 0.0, &[], max_len, beta)?;
    let pi_r = optimal_policy(&reference, reward, &[], max_len, beta)?;
    let full_reward = |y: &[u32]| -> Result<f64> {
        let lr = policy_logprob(&reference, &[], y, max_len)?;
        let lp = pi_r.logprob(&[], y)?;
        Ok(beta * (lp - lr) + beta * report.log_partition)
    };
    let full: Vec<f64> = ys.iter().map(|y| full_reward(y)).collect::<Result<_>>()?;
    let mut margin_error: f64 = 0.0;
    for (w, rw) in ys.iter().zip(&full) {
        for (l, rl) in ys.iter().zip(&full) {
            let m = reward_margin_with(&pi_r, &reference, &[], w, l, beta)?;
            margin_error = margin_error.max((m - (rw - rl)).abs());
        }
    }
    Ok(OracleToyReport {
        seed,
        sequences: report.sequences,
        partition: report.partition,
        normalization_defect: report.normalization_defect,
        reparameterization_residual: report.reparameterization_residual,
        zero_reward_defect: (z0 - 1.0).abs(),
        margin_error,
    })
}
