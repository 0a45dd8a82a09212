use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::lm::{ModelConfig, Tokenizer, VOCAB_SIZE};
use crate::lora::LoraConfig;

#[test]
fn emoji_examples() {
    assert_eq!(strip_emoji("Hey! 😊"), "Hey!");
    assert_eq!(strip_emoji("no emoji here"), "no emoji here");
    assert_eq!(strip_emoji("🔥🔥 ok 🚀"), "ok");
    assert_eq!(strip_emoji("a 😊 b"), "a b");
    assert_eq!(strip_emoji("flag 🇫🇷 done"), "flag done");
    assert_eq!(strip_emoji("love ❤️ it"), "love it");
    assert_eq!(strip_emoji("family 👨‍👩‍👧 time"), "family time");
    assert_eq!(strip_emoji("thumbs 👍🏽!"), "thumbs !");
}

#[test]
fn plain_symbols_and_spacing_survive() {
    // Text-presentation symbols and pre-existing spacing are not touched.
    assert_eq!(strip_emoji("x → y  ✓"), "x → y  ✓");
    assert_eq!(strip_emoji("  indented"), "  indented");
    assert_eq!(strip_emoji("café naïve 日本語"), "café naïve 日本語");
}

#[test]
fn invalid_utf8() {
    assert_eq!(strip_emoji_bytes(b"ok \xff"), Err(Error::Encoding { valid_up_to: 3 }));
    assert_eq!(strip_emoji_bytes("hi 🙂".as_bytes()).unwrap(), "hi");
}

#[test]
fn disclaimer_patterns() {
    let d = detect_disclaimer("I'm just an AI, I don't have feelings.");
    assert_eq!(d.matched.as_deref(), Some("I'm just an AI"));
    assert!(detect_disclaimer("As a DIGITAL assistant, I can help").flagged);
    assert!(detect_disclaimer("I\u{2019}m just an AI").flagged);
    assert!(!detect_disclaimer("").flagged);
    assert!(!detect_disclaimer("She has an aim in life").flagged);
    assert!(detect_disclaimer("Speaking as an AI, no.").flagged);
    let custom = DisclaimerDetector::with_extra([String::from("beep boop")]);
    assert!(custom.detect("well, BEEP boop").flagged);
    assert_eq!(custom.patterns().len(), DEFAULT_DISCLAIMERS.len() + 1);
}

/// Roots of `(p̂ − p)² = z² p (1 − p) / n`, solved as a quadratic in `p`.
fn wilson_by_quadratic(k: usize, n: usize, z: f64) -> (f64, f64) {
    let ph = k as f64 / n as f64;
    let c = z * z / n as f64;
    let a = 1.0 + c;
    let b = -(2.0 * ph + c);
    let cc = ph * ph;
    let disc = (b * b - 4.0 * a * cc).sqrt();
    (100.0 * (-b - disc) / (2.0 * a), 100.0 * (-b + disc) / (2.0 * a))
}

#[test]
fn wilson_matches_quadratic_roots() {
    for (k, n) in [(896, 1000), (1, 7), (0, 10), (10, 10), (204, 1000), (3, 4)] {
        let (lo, hi) = wilson_interval(k, n, Z_95);
        let (qlo, qhi) = wilson_by_quadratic(k, n, Z_95);
        assert!((lo - qlo.max(0.0)).abs() < 1e-9, "{k}/{n}: {lo} vs {qlo}");
        assert!((hi - qhi.min(100.0)).abs() < 1e-9, "{k}/{n}: {hi} vs {qhi}");
    }
}

fn fixture(pairs: &[(&str, &str, usize, usize)]) -> (Vec<VoteRecord>, Vec<Assignment>) {
    let mut votes = Vec::new();
    let mut assignments = Vec::new();
    for (tuned, official, wins, losses) in pairs {
        for i in 0..(wins + losses) {
            let pair_id = format!("{tuned}-{i}");
            // Alternate sides so the join, not the side, decides the winner.
            let tuned_on_a = i % 2 == 0;
            let (model_a, model_b) = if tuned_on_a {
                (tuned, official)
            } else {
                (official, tuned)
            };
            assignments.push(Assignment {
                pair_id: pair_id.clone(),
                question_id: i,
                model_a: String::from(*model_a),
                model_b: String::from(*model_b),
            });
            let tuned_wins = i < *wins;
            let choice = if tuned_wins == tuned_on_a { Choice::A } else { Choice::B };
            votes.push(VoteRecord {
                pair_id,
                choice,
                session_id: format!("s{}", i % 13),
                timestamp: String::from("2026-01-01T00:00:00Z"),
            });
        }
    }
    (votes, assignments)
}

#[test]
fn selection_rates_round_to_one_decimal() {
    let (votes, assignments) = fixture(&[("tuned-x", "official-x", 896, 104), ("tuned-z", "official-z", 796, 204)]);
    let report = selection_report(&votes, &assignments).unwrap();
    assert_eq!(report.total_votes, 2000);
    let find = |m: &str| {
        report
            .pairs
            .iter()
            .flat_map(|p| p.models.iter())
            .find(|t| t.model == m)
            .unwrap()
            .clone()
    };
    assert_eq!(find("tuned-x").selection_rate, 89.6);
    assert_eq!(find("official-x").selection_rate, 10.4);
    assert_eq!(find("tuned-z").selection_rate, 79.6);
    assert_eq!(find("official-z").selection_rate, 20.4);
    for p in &report.pairs {
        assert_eq!(p.models[0].votes + p.models[1].votes, p.total);
        assert!((p.models[0].selection_rate + p.models[1].selection_rate - 100.0).abs() <= 0.1);
    }
}

#[test]
fn unanimous_votes_exclude_even_odds() {
    let (votes, assignments) = fixture(&[("m1", "m2", 10, 0)]);
    let report = selection_report(&votes, &assignments).unwrap();
    let p = &report.pairs[0];
    let winner = p.models.iter().find(|t| t.model == "m1").unwrap();
    let loser = p.models.iter().find(|t| t.model == "m2").unwrap();
    assert_eq!(winner.selection_rate, 100.0);
    assert_eq!(loser.selection_rate, 0.0);
    assert!(winner.wilson_low > 50.0);
}

#[test]
fn orphan_votes_are_integrity_errors() {
    let (mut votes, assignments) = fixture(&[("m1", "m2", 1, 1)]);
    votes[0].pair_id = String::from("ghost");
    assert_eq!(
        selection_report(&votes, &assignments),
        Err(Error::OrphanVote(String::from("ghost")))
    );
}

#[test]
fn report_is_deterministic_and_empty_is_valid() {
    let (votes, assignments) = fixture(&[("a", "b", 3, 5)]);
    assert_eq!(
        selection_report(&votes, &assignments),
        selection_report(&votes, &assignments)
    );
    let empty = selection_report(&[], &assignments).unwrap();
    assert_eq!(empty.total_votes, 0);
    assert!(empty.pairs.is_empty());
}

#[test]
fn choice_parsing() {
    assert_eq!("A".parse::<Choice>(), Ok(Choice::A));
    assert!("C".parse::<Choice>().is_err());
}

fn model() -> LanguageModel {
    LanguageModel::new(
        ModelConfig {
            layers: 1,
            heads: 1,
            embed_dim: 8,
            max_seq_len: 32,
            vocab_size: VOCAB_SIZE,
        },
        4,
    )
    .unwrap()
}

#[test]
fn retention_is_exactly_one_without_training() {
    let base = model();
    let heldout = vec![
        Tokenizer.encode(b"the quick brown fox"),
        Tokenizer.encode(b"jumps over"),
    ];
    let same = perplexity_retention(&base, &base.clone(), &heldout).unwrap();
    assert_eq!(same.ratio, 1.0);
    let mut adapted = base.clone();
    adapted.attach_lora(&LoraConfig::default(), 5).unwrap();
    let r = perplexity_retention(&base, &adapted, &heldout).unwrap();
    assert_eq!(r.ratio, 1.0);
    assert!(r.base_ppl > 1.0 && r.base_ppl.is_finite());
}

#[test]
fn retention_requires_matching_configs() {
    let other = LanguageModel::new(
        ModelConfig {
            layers: 2,
            heads: 1,
            embed_dim: 8,
            max_seq_len: 32,
            vocab_size: VOCAB_SIZE,
        },
        4,
    )
    .unwrap();
    let heldout = vec![Tokenizer.encode(b"abc")];
    assert!(matches!(
        perplexity_retention(&model(), &other, &heldout),
        Err(Error::Config(_))
    ));
}
