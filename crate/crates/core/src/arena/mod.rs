//! Statistics and text checks behind pairwise human-likeness evaluation:
//! emoji stripping, disclaimer detection, selection rates with Wilson
//! intervals, and perplexity retention.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::math;
use crate::train::mean_nll;

/// Two-sided 95% standard normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

const VARIATION_SELECTORS: [char; 2] = ['\u{FE0E}', '\u{FE0F}'];
const ZWJ: char = '\u{200D}';

/// Pictographic blocks removed unconditionally.
fn is_pictograph(c: char) -> bool {
    matches!(c as u32,
        0x1F600..=0x1F64F // emoticons
        | 0x1F300..=0x1F5FF // symbols and pictographs, skin tones
        | 0x1F680..=0x1F6FF // transport and map
        | 0x1F900..=0x1F9FF // supplemental symbols and pictographs
        | 0x1FA70..=0x1FAFF // symbols and pictographs extended-A
        | 0x1F1E6..=0x1F1FF // regional indicators (flags)
    )
}

/// BMP symbols that are emoji only in emoji presentation (followed by U+FE0F).
fn is_text_symbol(c: char) -> bool {
    matches!(c as u32, 0x2600..=0x27BF | 0x2B00..=0x2BFF | 0x2190..=0x21FF | 0x2300..=0x23FF)
}

/// Removes emoji and the variation selectors and joiners attached to them,
/// then collapses the doubled spaces the removal leaves behind.
pub fn strip_emoji(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut after_removal = false;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let next = chars.get(i + 1).copied();
        let remove = is_pictograph(c)
            || (is_text_symbol(c) && next == Some('\u{FE0F}'))
            || (after_removal && (VARIATION_SELECTORS.contains(&c) || c == ZWJ));
        if remove {
            after_removal = true;
            i += 1;
            continue;
        }
        if c == ' ' && after_removal && (out.is_empty() || out.ends_with(' ')) {
            i += 1;
            continue;
        }
        if c != ' ' {
            after_removal = false;
        }
        out.push(c);
        i += 1;
    }
    if after_removal {
        let trimmed = out.trim_end_matches(' ').len();
        out.truncate(trimmed);
    }
    out
}

/// [`strip_emoji`] over raw bytes, rejecting invalid UTF-8.
pub fn strip_emoji_bytes(bytes: &[u8]) -> Result<String> {
    let text = core::str::from_utf8(bytes).map_err(|e| Error::Encoding {
        valid_up_to: e.valid_up_to(),
    })?;
    Ok(strip_emoji(text))
}

/// Self-referential disclaimer phrases checked by default, in match order.
pub const DEFAULT_DISCLAIMERS: [&str; 6] = [
    "I am just a language model",
    "As a digital assistant",
    "I'm just an AI",
    "I'm an artificial intelligence language model",
    "as an AI",
    "I don't have personal experiences",
];

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DisclaimerMatch {
    pub flagged: bool,
    pub matched: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisclaimerDetector {
    patterns: Vec<String>,
    folded: Vec<String>,
}

impl Default for DisclaimerDetector {
    fn default() -> Self {
        Self::new(DEFAULT_DISCLAIMERS.iter().map(|s| s.to_string()))
    }
}

fn fold(text: &str) -> String {
    text.chars()
        .map(|c| match c {
            '\u{2018}' | '\u{2019}' | '\u{02BC}' => '\'',
            _ => c,
        })
        .flat_map(char::to_lowercase)
        .collect()
}

impl DisclaimerDetector {
    pub fn new(patterns: impl IntoIterator<Item = String>) -> Self {
        let patterns: Vec<String> = patterns.into_iter().filter(|p| !p.trim().is_empty()).collect();
        let folded = patterns.iter().map(|p| fold(p)).collect();
        Self { patterns, folded }
    }

    /// Defaults plus `extra` patterns.
    pub fn with_extra(extra: impl IntoIterator<Item = String>) -> Self {
        Self::new(DEFAULT_DISCLAIMERS.iter().map(|s| s.to_string()).chain(extra))
    }

    pub fn patterns(&self) -> &[String] {
        &self.patterns
    }

    /// First pattern (in list order) found case-insensitively on word
    /// boundaries. Curly apostrophes count as straight ones.
    pub fn detect(&self, text: &str) -> DisclaimerMatch {
        let hay = fold(text);
        for (pattern, needle) in self.patterns.iter().zip(&self.folded) {
            if contains_word_bounded(&hay, needle) {
                return DisclaimerMatch {
                    flagged: true,
                    matched: Some(pattern.clone()),
                };
            }
        }
        DisclaimerMatch {
            flagged: false,
            matched: None,
        }
    }
}

fn contains_word_bounded(hay: &str, needle: &str) -> bool {
    let is_word = |c: Option<char>| c.is_some_and(char::is_alphanumeric);
    let mut from = 0;
    while let Some(pos) = hay[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before = hay[..start].chars().next_back();
        let after = hay[end..].chars().next();
        let edge_ok = |n: Option<char>, h: Option<char>| !(is_word(n) && is_word(h));
        if edge_ok(needle.chars().next(), before) && edge_ok(needle.chars().next_back(), after) {
            return true;
        }
        from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
    }
    false
}

pub fn detect_disclaimer(text: &str) -> DisclaimerMatch {
    DisclaimerDetector::default().detect(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Choice {
    A,
    B,
}

impl core::str::FromStr for Choice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Choice::A),
            "B" => Ok(Choice::B),
            other => Err(Error::Contract(alloc::format!("choice must be A or B, got `{other}`"))),
        }
    }
}

/// Which model produced which side of a served pair.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Assignment {
    pub pair_id: String,
    pub question_id: usize,
    pub model_a: String,
    pub model_b: String,
}

impl Assignment {
    pub fn winner(&self, choice: Choice) -> &str {
        match choice {
            Choice::A => &self.model_a,
            Choice::B => &self.model_b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VoteRecord {
    pub pair_id: String,
    pub choice: Choice,
    pub session_id: String,
    pub timestamp: String,
}

/// Wilson score interval for `successes` out of `n`, in percent.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 100.0);
    }
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * math::sqrt(p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)) / denom;
    (100.0 * (center - half).max(0.0), 100.0 * (center + half).min(1.0))
}

/// Percentage rounded to one decimal.
pub fn rate_percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    libm::round(1000.0 * count as f64 / total as f64) / 10.0
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelTally {
    pub model: String,
    pub votes: usize,
    pub selection_rate: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
}

/// Results for one pair of competing models.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PairReport {
    pub models: [ModelTally; 2],
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SelectionReport {
    pub pairs: Vec<PairReport>,
    pub total_votes: usize,
}

/// Joins votes to their hidden assignments and tallies selection rates per
/// unordered model pair. Pairs are listed in name order; within a pair the
/// models are in name order too.
pub fn selection_report(votes: &[VoteRecord], assignments: &[Assignment]) -> Result<SelectionReport> {
    let by_id: BTreeMap<&str, &Assignment> = assignments.iter().map(|a| (a.pair_id.as_str(), a)).collect();
    let mut tallies: BTreeMap<(String, String), [usize; 2]> = BTreeMap::new();
    for v in votes {
        let a = by_id
            .get(v.pair_id.as_str())
            .ok_or_else(|| Error::OrphanVote(v.pair_id.clone()))?;
        let (first, second) = if a.model_a <= a.model_b {
            (a.model_a.clone(), a.model_b.clone())
        } else {
            (a.model_b.clone(), a.model_a.clone())
        };
        let winner_is_first = a.winner(v.choice) == first;
        let entry = tallies.entry((first, second)).or_insert([0, 0]);
        entry[if winner_is_first { 0 } else { 1 }] += 1;
    }
    let pairs: Vec<PairReport> = tallies
        .into_iter()
        .map(|((m0, m1), counts)| {
            let total = counts[0] + counts[1];
            let tally = |model: String, votes: usize| {
                let (lo, hi) = wilson_interval(votes, total, Z_95);
                ModelTally {
                    model,
                    votes,
                    selection_rate: rate_percent(votes, total),
                    wilson_low: lo,
                    wilson_high: hi,
                }
            };
            PairReport {
                models: [tally(m0, counts[0]), tally(m1, counts[1])],
                total,
            }
        })
        .collect();
    Ok(SelectionReport {
        total_votes: votes.len(),
        pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RetentionReport {
    pub base_ppl: f64,
    pub tuned_ppl: f64,
    pub ratio: f64,
}

/// `exp(mean next-token NLL)` over held-out documents.
pub fn perplexity(model: &LanguageModel, heldout: &[Vec<u32>]) -> Result<f64> {
    Ok(math::exp(mean_nll(model, heldout)?))
}

pub fn perplexity_retention(
    base: &LanguageModel,
    tuned: &LanguageModel,
    heldout: &[Vec<u32>],
) -> Result<RetentionReport> {
    if base.config() != tuned.config() {
        return Err(Error::Config(
            "base and tuned models have different configurations".into(),
        ));
    }
    let base_ppl = perplexity(base, heldout)?;
    let tuned_ppl = perplexity(tuned, heldout)?;
    Ok(RetentionReport {
        base_ppl,
        tuned_ppl,
        ratio: tuned_ppl / base_ppl,
    })
}

#[cfg(test)]
mod tests;
