//! Synthetic preference data: question lists from the two question prompts,
//! then one human-like and one formal answer per question.

mod backend;
mod http;
mod stub;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use humanlike_core::data::{
    dedup_filter, normalize_prompt, parse_question_list, tag_topic, PreferenceRecord, PromptKind, RemovalReport,
};
use humanlike_core::lm::GenerationParams;
use serde::{Deserialize, Serialize};

pub use backend::{ChatBackend, ChatMessage, ChatRequest, RoutedBackend};
pub use http::{extract_content, Failure, HttpBackend, RetryPolicy};
pub use stub::{StubBackend, CASUAL_OPENERS, FORMAL_OPENERS, QUESTIONS_PER_LIST};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenConfig {
    /// Number of preference records to produce.
    pub count: usize,
    /// Share of questions drawn from the conversational prompt; the rest come
    /// from the knowledge prompt.
    pub conversational_share: f64,
    /// Maximum number of requests in flight.
    pub concurrency: usize,
    /// Chat-completions URL for the network backend.
    pub endpoint: Option<String>,
    pub question_model: String,
    pub answer_model: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub params: GenerationParams,
    pub retry: RetryPolicy,
    /// Question requests allowed per kind, as a multiple of the minimum.
    pub request_budget: usize,
    /// Seeds the offline stub backend.
    pub seed: u64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            count: 200,
            conversational_share: 0.5,
            concurrency: 4,
            endpoint: None,
            question_model: "llama-3.1-405b-instruct".into(),
            answer_model: "llama-3-70b-instruct".into(),
            api_key_env: "HUMANLIKE_API_KEY".into(),
            params: GenerationParams::default(),
            retry: RetryPolicy::default(),
            request_budget: 4,
            seed: 0,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("datagen.count must be positive".into()));
        }
        if self.concurrency == 0 {
            return Err(Error::Config("datagen.concurrency must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.conversational_share) {
            return Err(Error::Config("datagen.conversational_share must lie in [0, 1]".into()));
        }
        self.params.validate()?;
        Ok(())
    }

    /// Questions wanted from each question prompt.
    pub fn split(&self) -> (usize, usize) {
        let conv = (self.count as f64 * self.conversational_share).round() as usize;
        (conv, self.count - conv)
    }
}

fn request(kind: PromptKind, user: String, params: &GenerationParams) -> ChatRequest {
    ChatRequest {
        messages: vec![ChatMessage::system(kind.template()), ChatMessage::user(user)],
        temperature: params.temperature,
        top_p: params.top_p,
    }
}

/// Applies `f` to every item with at most `limit` calls in flight. Results
/// come back in input order.
pub fn map_bounded<T: Sync, R: Send>(items: &[T], limit: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..limit.max(1).min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Requests question lists under a question prompt until `count` distinct
/// questions are collected or the request budget runs out.
pub fn generate_questions(
    backend: &dyn ChatBackend,
    kind: PromptKind,
    count: usize,
    params: &GenerationParams,
    concurrency: usize,
    budget: usize,
) -> Result<Vec<String>> {
    if !kind.is_question() {
        return Err(Error::Config(format!("{} is not a question prompt", kind.as_str())));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    let max_requests = count.div_ceil(QUESTIONS_PER_LIST).max(1) * budget.max(1);
    let mut issued = 0;
    let mut failed = Vec::new();
    while out.len() < count && issued < max_requests {
        let missing = count - out.len();
        let batch: Vec<usize> = (issued..(issued + missing.div_ceil(QUESTIONS_PER_LIST)).min(max_requests)).collect();
        issued += batch.len();
        let replies = map_bounded(&batch, concurrency, |&i| {
            backend.complete(&request(
                kind,
                format!("Generate me {QUESTIONS_PER_LIST} questions! (batch {i})"),
                params,
            ))
        });
        for (i, reply) in batch.iter().zip(replies) {
            match reply {
                Ok(text) => {
                    for q in parse_question_list(&text) {
                        if out.len() < count && seen.insert(normalize_prompt(&q)) {
                            out.push(q);
                        }
                    }
                }
                Err(e) => failed.push(format!("{} batch {i}: {e}", kind.as_str())),
            }
        }
    }
    if out.len() < count {
        return Err(Error::Shortfall {
            message: format!(
                "{} of {count} {} questions after {issued} requests",
                out.len(),
                kind.as_str()
            ),
            failed,
        });
    }
    Ok(out)
}

/// Answers `question` once in each style and assembles the record.
pub fn generate_pair(backend: &dyn ChatBackend, question: &str, params: &GenerationParams) -> Result<PreferenceRecord> {
    let question = question.trim();
    if question.is_empty() {
        return Err(humanlike_core::Error::Contract("question is empty".into()).into());
    }
    let chosen = backend.complete(&request(PromptKind::HumanlikeAnswer, question.into(), params))?;
    let rejected = backend.complete(&request(PromptKind::FormalAnswer, question.into(), params))?;
    let mut record = PreferenceRecord::new(question, chosen.trim(), rejected.trim());
    record.topic = tag_topic(question).map(str::to_owned);
    record.validate()?;
    Ok(record)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PipelineReport {
    pub conversational_questions: usize,
    pub knowledge_questions: usize,
    pub removed: RemovalReport,
    pub records: usize,
}

/// Questions from both prompts, answers for each, then filtering. Records
/// come out in question order whatever order the requests finish in.
pub fn run_pipeline(
    backend: &dyn ChatBackend,
    config: &DatagenConfig,
) -> Result<(Vec<PreferenceRecord>, PipelineReport)> {
    config.validate()?;
    let (n_conv, n_know) = config.split();
    let p = &config.params;
    let mut questions = Vec::with_capacity(config.count);
    for (kind, n) in [
        (PromptKind::ConversationalQuestion, n_conv),
        (PromptKind::KnowledgeQuestion, n_know),
    ] {
        if n > 0 {
            questions.extend(generate_questions(
                backend,
                kind,
                n,
                p,
                config.concurrency,
                config.request_budget,
            )?);
        }
    }
    let results = map_bounded(&questions, config.concurrency, |q| generate_pair(backend, q, p));
    let mut records = Vec::with_capacity(results.len());
    let mut failed = Vec::new();
    for (q, r) in questions.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => failed.push(format!("{q}: {e}")),
        }
    }
    if !failed.is_empty() {
        return Err(Error::Shortfall {
            message: format!("{} of {} answer requests failed", failed.len(), questions.len()),
            failed,
        });
    }
    let (records, removed) = dedup_filter(records);
    let report = PipelineReport {
        conversational_questions: n_conv,
        knowledge_questions: n_know,
        removed,
        records: records.len(),
    };
    Ok((records, report))
}
