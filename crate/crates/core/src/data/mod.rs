//! Preference records and the text processing around them: system-prompt
//! templates, question-list parsing, deduplication, topic tags and dataset
//! statistics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Minimum length in characters for a response to survive [`dedup_filter`].
pub const MIN_RESPONSE_CHARS: usize = 10;

/// One preference pair: the human-like answer is `chosen`, the formal one
/// `rejected`.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PreferenceRecord {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub topic: Option<String>,
}

impl PreferenceRecord {
    pub fn new(prompt: impl Into<String>, chosen: impl Into<String>, rejected: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            chosen: chosen.into(),
            rejected: rejected.into(),
            topic: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, text) in [
            ("prompt", &self.prompt),
            ("chosen", &self.chosen),
            ("rejected", &self.rejected),
        ] {
            if text.trim().is_empty() {
                return Err(Error::Contract(format!("{field} is empty")));
            }
        }
        if self.chosen == self.rejected {
            return Err(Error::Contract("chosen and rejected are identical".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PromptKind {
    ConversationalQuestion,
    KnowledgeQuestion,
    HumanlikeAnswer,
    FormalAnswer,
}

impl PromptKind {
    pub const ALL: [PromptKind; 4] = [
        Self::ConversationalQuestion,
        Self::KnowledgeQuestion,
        Self::HumanlikeAnswer,
        Self::FormalAnswer,
    ];

    /// The system prompt for this kind.
    pub fn template(self) -> &'static str {
        match self {
            Self::ConversationalQuestion => include_str!("prompts/conversational_question.txt"),
            Self::KnowledgeQuestion => include_str!("prompts/knowledge_question.txt"),
            Self::HumanlikeAnswer => include_str!("prompts/humanlike_answer.txt"),
            Self::FormalAnswer => include_str!("prompts/formal_answer.txt"),
        }
    }

    pub fn is_question(self) -> bool {
        matches!(self, Self::ConversationalQuestion | Self::KnowledgeQuestion)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ConversationalQuestion => "conversational_question",
            Self::KnowledgeQuestion => "knowledge_question",
            Self::HumanlikeAnswer => "humanlike_answer",
            Self::FormalAnswer => "formal_answer",
        }
    }
}

/// Splits a completion into questions. Accepts `1.`, `1)` and `-`/`*`
/// markers as well as bare lines; blank lines and exact repeats are dropped.
pub fn parse_question_list(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for line in text.lines() {
        let q = strip_marker(line.trim()).trim();
        if q.is_empty() {
            continue;
        }
        if seen.insert(q.to_string()) {
            out.push(q.to_string());
        }
    }
    out
}

fn strip_marker(line: &str) -> &str {
    if let Some(rest) = line.strip_prefix("- ").or_else(|| line.strip_prefix("* ")) {
        return rest;
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r;
        }
    }
    line
}

/// Lowercases and collapses every run of punctuation or whitespace into a
/// single space.
pub fn normalize_prompt(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut gap = false;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if gap && !out.is_empty() {
                out.push(' ');
            }
            gap = false;
            out.extend(c.to_lowercase());
        } else {
            gap = true;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RemovalReport {
    pub duplicate_prompt: usize,
    pub short_response: usize,
}

impl RemovalReport {
    pub fn total(&self) -> usize {
        self.duplicate_prompt + self.short_response
    }
}

/// Keeps the first record of each normalized prompt and drops records with a
/// response shorter than [`MIN_RESPONSE_CHARS`].
pub fn dedup_filter(records: Vec<PreferenceRecord>) -> (Vec<PreferenceRecord>, RemovalReport) {
    let mut report = RemovalReport::default();
    let mut seen = BTreeSet::new();
    let mut kept = Vec::with_capacity(records.len());
    for r in records {
        let short = |s: &str| s.trim().chars().count() < MIN_RESPONSE_CHARS;
        if short(&r.chosen) || short(&r.rejected) {
            report.short_response += 1;
            continue;
        }
        if !seen.insert(normalize_prompt(&r.prompt)) {
            report.duplicate_prompt += 1;
            continue;
        }
        kept.push(r);
    }
    (kept, report)
}

/// Topic clusters with the keywords that assign them.
pub const TOPIC_KEYWORDS: [(&str, &[&str]); 12] = [
    (
        "traveling",
        &[
            "travel", "trip", "vacation", "beach", "city", "country", "flight", "abroad",
        ],
    ),
    (
        "sports",
        &[
            "sport",
            "football",
            "soccer",
            "basketball",
            "team",
            "game day",
            "tennis",
        ],
    ),
    ("fitness", &["fitness", "workout", "gym", "yoga", "running", "exercise"]),
    ("music", &["music", "song", "band", "concert", "album", "guitar"]),
    (
        "technology",
        &[
            "technology",
            "tech",
            "coding",
            "code",
            "computer",
            "phone",
            "robot",
            "internet",
            "social media",
        ],
    ),
    (
        "nature",
        &["nature", "ocean", "forest", "mountain", "animal", "garden", "weather"],
    ),
    (
        "health",
        &["health", "sleep", "diet", "stress", "mental", "medicine", "meditation"],
    ),
    (
        "science",
        &[
            "science",
            "space",
            "physics",
            "chemistry",
            "biology",
            "quantum",
            "brain",
            "dark matter",
        ],
    ),
    (
        "family",
        &["family", "parent", "kid", "child", "sibling", "grandma", "mom", "dad"],
    ),
    (
        "culture",
        &[
            "culture",
            "art",
            "film",
            "movie",
            "book",
            "history",
            "tradition",
            "festival",
        ],
    ),
    (
        "daily life",
        &[
            "morning", "routine", "weekend", "coffee", "cooking", "food", "daily", "habit",
        ],
    ),
    (
        "language",
        &["language", "word", "grammar", "accent", "translate", "speak"],
    ),
];

/// First cluster with a keyword occurring in `text` (case-insensitive).
pub fn tag_topic(text: &str) -> Option<&'static str> {
    let lower = text.to_lowercase();
    TOPIC_KEYWORDS
        .iter()
        .find(|(_, words)| words.iter().any(|w| lower.contains(w)))
        .map(|(topic, _)| *topic)
}

/// Bucket name for records without a topic.
pub const UNTAGGED: &str = "untagged";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LengthStats {
    pub min: usize,
    pub p10: usize,
    pub p50: usize,
    pub p90: usize,
    pub max: usize,
}

impl LengthStats {
    /// Nearest-rank percentiles over character counts.
    pub fn of(lengths: &mut [usize]) -> Self {
        if lengths.is_empty() {
            return Self::default();
        }
        lengths.sort_unstable();
        let rank = |p: usize| {
            let idx = (p * lengths.len()).div_ceil(100).max(1) - 1;
            lengths[idx]
        };
        Self {
            min: lengths[0],
            p10: rank(10),
            p50: rank(50),
            p90: rank(90),
            max: lengths[lengths.len() - 1],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetStats {
    pub records: usize,
    pub topic_count: usize,
    pub topics: BTreeMap<String, usize>,
    pub prompt_chars: LengthStats,
    pub chosen_chars: LengthStats,
    pub rejected_chars: LengthStats,
}

pub fn dataset_stats(records: &[PreferenceRecord]) -> DatasetStats {
    let mut topics = BTreeMap::new();
    for r in records {
        let key = r.topic.clone().unwrap_or_else(|| UNTAGGED.into());
        *topics.entry(key).or_insert(0) += 1;
    }
    let lengths = |f: fn(&PreferenceRecord) -> &str| -> LengthStats {
        let mut v: Vec<usize> = records.iter().map(|r| f(r).chars().count()).collect();
        LengthStats::of(&mut v)
    };
    DatasetStats {
        records: records.len(),
        topic_count: topics.keys().filter(|k| k.as_str() != UNTAGGED).count(),
        prompt_chars: lengths(|r| &r.prompt),
        chosen_chars: lengths(|r| &r.chosen),
        rejected_chars: lengths(|r| &r.rejected),
        topics,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn rec(p: &str) -> PreferenceRecord {
        PreferenceRecord::new(p, "sure thing, happy to chat", "Good day. I shall assist.")
    }

    #[test]
    fn templates_carry_their_anchors() {
        assert!(PromptKind::HumanlikeAnswer
            .template()
            .contains("keep it natural and casual"));
        assert!(PromptKind::HumanlikeAnswer
            .template()
            .contains("Don't response like a book"));
        assert!(PromptKind::FormalAnswer
            .template()
            .contains("formal and professional manner"));
        assert!(PromptKind::ConversationalQuestion
            .template()
            .ends_with("Generate me 20 questions!"));
        assert!(!PromptKind::ConversationalQuestion
            .template()
            .contains("Don't response like a book"));
        assert!(PromptKind::KnowledgeQuestion
            .template()
            .contains("casual conversation with a friend"));
    }

    #[test]
    fn question_list_markers() {
        assert_eq!(parse_question_list("1. A?\n2. B?"), vec!["A?", "B?"]);
        assert_eq!(
            parse_question_list("1) A?\n\n- B?\n  * C?\nD?"),
            vec!["A?", "B?", "C?", "D?"]
        );
        assert_eq!(parse_question_list("1. A?\n2. A?\n3. B?"), vec!["A?", "B?"]);
        assert!(parse_question_list("\n \n").is_empty());
    }

    #[test]
    fn record_validation() {
        assert!(rec("hi").validate().is_ok());
        assert!(rec(" ").validate().is_err());
        let same = PreferenceRecord::new("q", "same text here", "same text here");
        assert!(same.validate().is_err());
    }

    #[test]
    fn dedup_rules() {
        let (kept, report) = dedup_filter(vec![rec("How are you?"), rec("how are you ?"), rec("Other")]);
        assert_eq!(kept.len(), 2);
        assert_eq!(
            report,
            RemovalReport {
                duplicate_prompt: 1,
                short_response: 0
            }
        );

        let short = PreferenceRecord::new("q", "ok", "Good day to you, sir.");
        let (kept, report) = dedup_filter(vec![short]);
        assert!(kept.is_empty());
        assert_eq!(report.short_response, 1);

        assert_eq!(dedup_filter(vec![]), (vec![], RemovalReport::default()));
        let three = vec![rec("a"), rec("b"), rec("c")];
        let (kept, report) = dedup_filter(three.clone());
        assert_eq!(kept, three);
        assert_eq!(report.total(), 0);
    }

    #[test]
    fn dedup_is_idempotent() {
        let input = vec![
            rec("A"),
            rec("a!"),
            rec("B"),
            PreferenceRecord::new("C", "tiny", "Good day to you."),
        ];
        let (once, _) = dedup_filter(input);
        let (twice, report) = dedup_filter(once.clone());
        assert_eq!(once, twice);
        assert_eq!(report.total(), 0);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_prompt("  Hello,   World?! "), "hello world");
        assert_eq!(normalize_prompt("What's up?"), "what s up");
    }

    #[test]
    fn stats_histogram() {
        let mut rs = vec![rec("x"), rec("y"), rec("z")];
        rs[0].topic = Some("a".into());
        rs[1].topic = Some("a".into());
        rs[2].topic = Some("b".into());
        let s = dataset_stats(&rs);
        assert_eq!(s.records, 3);
        assert_eq!(s.topic_count, 2);
        assert_eq!(s.topics.get("a"), Some(&2));
        assert_eq!(s.topics.get("b"), Some(&1));

        let empty = dataset_stats(&[]);
        assert_eq!(empty.records, 0);
        assert!(empty.topics.is_empty());

        let untagged = dataset_stats(&[rec("q")]);
        assert_eq!(untagged.topics.get(UNTAGGED), Some(&1));
        assert_eq!(untagged.topic_count, 0);
    }

    #[test]
    fn percentiles_nearest_rank() {
        let mut v: Vec<usize> = (1..=10).collect();
        let s = LengthStats::of(&mut v);
        assert_eq!((s.min, s.p10, s.p50, s.p90, s.max), (1, 1, 5, 9, 10));
    }

    #[test]
    fn topics() {
        assert_eq!(tag_topic("Any tips for my yoga practice?"), Some("fitness"));
        assert_eq!(tag_topic("Best beach trip ever"), Some("traveling"));
        assert_eq!(tag_topic("zzz"), None);
    }
}
