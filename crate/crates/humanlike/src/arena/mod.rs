//! Anonymous pairwise voting: a campaign of questions answered by two models,
//! served one pair at a time with hidden, randomized sides.

mod http;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use humanlike_core::arena::{selection_report, strip_emoji, Assignment, Choice, SelectionReport, VoteRecord};
use humanlike_core::data::PromptKind;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use http::{router, serve, SESSION_COOKIE, SESSION_HEADER};

use crate::datagen::{generate_questions, ChatBackend, ChatMessage, ChatRequest};
use crate::error::{Error, Result};
use crate::jsonl::{read_jsonl, JsonlAppender};

pub const ASSIGNMENTS_FILE: &str = "assignments.jsonl";
pub const VOTES_FILE: &str = "votes.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArenaConfig {
    /// Campaign directory holding the vote and assignment logs.
    pub dir: PathBuf,
    pub host: String,
    pub port: u16,
    /// Seeds question order and side assignment.
    pub seed: u64,
    /// Questions in a generated campaign.
    pub questions: usize,
    /// Pairs a single session may receive; unlimited when unset.
    pub pairs_per_session: Option<usize>,
    /// Names of the two competing models, as recorded in assignments.
    pub models: [String; 2],
    /// Static files for the voting client.
    pub ui_dir: Option<PathBuf>,
    /// Disclaimer phrases flagged in addition to the built-in list.
    pub extra_disclaimers: Vec<String>,
}

impl Default for ArenaConfig {
    fn default() -> Self {
        Self {
            dir: "arena".into(),
            host: "127.0.0.1".into(),
            port: 8080,
            seed: 0,
            questions: 500,
            pairs_per_session: None,
            models: ["humanlike-tuned".into(), "official-instruct".into()],
            ui_dir: None,
            extra_disclaimers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignItem {
    pub question: String,
    /// `responses[i]` was written by `models[i]`.
    pub responses: [String; 2],
}

/// Evaluation questions with one pre-generated response per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Campaign {
    pub models: [String; 2],
    pub items: Vec<CampaignItem>,
}

impl Campaign {
    pub fn validate(&self) -> Result<()> {
        let [a, b] = &self.models;
        if a.trim().is_empty() || b.trim().is_empty() || a == b {
            return Err(Error::Config(
                "campaign needs two distinct, non-empty model names".into(),
            ));
        }
        if self.items.is_empty() {
            return Err(humanlike_core::Error::Empty("campaign").into());
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let c: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.into(),
            message: e.to_string(),
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("campaign serializes");
        fs::write(path, text).map_err(Error::io(path))
    }

    /// A campaign where `models[0]` answers with the human-like prompt and
    /// `models[1]` with the formal one, over freshly generated questions.
    pub fn generate(backend: &dyn ChatBackend, models: [String; 2], questions: usize) -> Result<Self> {
        let params = humanlike_core::lm::GenerationParams::default();
        let qs = generate_questions(backend, PromptKind::KnowledgeQuestion, questions, &params, 1, 4)?;
        let answer = |kind: PromptKind, q: &str| {
            backend.complete(&ChatRequest {
                messages: vec![ChatMessage::system(kind.template()), ChatMessage::user(q)],
                temperature: params.temperature,
                top_p: params.top_p,
            })
        };
        let items = qs
            .into_iter()
            .map(|q| {
                let a = answer(PromptKind::HumanlikeAnswer, &q)?;
                let b = answer(PromptKind::FormalAnswer, &q)?;
                Ok(CampaignItem {
                    question: q,
                    responses: [a, b],
                })
            })
            .collect::<Result<_>>()?;
        let c = Self { models, items };
        c.validate()?;
        Ok(c)
    }
}

/// The only payload a voter ever sees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairPayload {
    pub pair_id: String,
    pub question: String,
    pub side_a: String,
    pub side_b: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NextPair {
    Pair(PairPayload),
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VoteAck {
    pub status: &'static str,
    pub session_votes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VoteError {
    #[error("choice must be A or B")]
    InvalidChoice,
    #[error("unknown pair `{0}`")]
    UnknownPair(String),
    #[error("session already voted on pair `{0}`")]
    Duplicate(String),
    #[error("could not persist the vote: {0}")]
    Storage(String),
}

struct Session {
    remaining: Vec<usize>,
    issued: usize,
    rng: ChaCha8Rng,
}

struct State {
    sessions: HashMap<String, Session>,
    pairs: HashSet<String>,
    voted: HashSet<(String, String)>,
    assignments: Vec<Assignment>,
    votes: Vec<VoteRecord>,
    assignment_log: Option<JsonlAppender>,
    vote_log: Option<JsonlAppender>,
}

/// Campaign state shared by all requests. Every mutation, including both log
/// appends, happens under one lock, so there is a single writer.
pub struct Arena {
    campaign: Campaign,
    seed: u64,
    pairs_per_session: Option<usize>,
    state: Mutex<State>,
}

fn session_rng(seed: u64, session: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(session.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

impl Arena {
    /// In-memory arena without logs.
    pub fn new(campaign: Campaign, seed: u64) -> Result<Self> {
        campaign.validate()?;
        Ok(Self {
            campaign,
            seed,
            pairs_per_session: None,
            state: Mutex::new(State {
                sessions: HashMap::new(),
                pairs: HashSet::new(),
                voted: HashSet::new(),
                assignments: Vec::new(),
                votes: Vec::new(),
                assignment_log: None,
                vote_log: None,
            }),
        })
    }

    /// Arena persisting to `dir`, resuming any logs already there.
    pub fn open(campaign: Campaign, seed: u64, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let arena = Self::new(campaign, seed)?;
        let (assignments, votes) = read_logs(dir)?;
        {
            let mut s = arena.state.lock().expect("arena state");
            s.pairs = assignments.iter().map(|a| a.pair_id.clone()).collect();
            s.voted = votes
                .iter()
                .map(|v| (v.session_id.clone(), v.pair_id.clone()))
                .collect();
            s.assignments = assignments;
            s.votes = votes;
            s.assignment_log = Some(JsonlAppender::open(dir.join(ASSIGNMENTS_FILE))?);
            s.vote_log = Some(JsonlAppender::open(dir.join(VOTES_FILE))?);
        }
        Ok(arena)
    }

    pub fn with_pairs_per_session(mut self, limit: Option<usize>) -> Self {
        self.pairs_per_session = limit;
        self
    }

    pub fn campaign(&self) -> &Campaign {
        &self.campaign
    }

    pub fn new_session_id() -> String {
        uuid::Uuid::new_v4().to_string()
    }

    /// Issues an unseen question to `session` with sides assigned at random.
    pub fn next_pair(&self, session: &str) -> Result<NextPair> {
        let mut guard = self.state.lock().expect("arena state");
        let state = &mut *guard;
        let n = self.campaign.items.len();
        let sess = state.sessions.entry(session.to_string()).or_insert_with(|| Session {
            remaining: (0..n).collect(),
            issued: 0,
            rng: session_rng(self.seed, session),
        });
        if sess.remaining.is_empty() || self.pairs_per_session.is_some_and(|m| sess.issued >= m) {
            return Ok(NextPair::Complete);
        }
        let pick = sess.rng.random_range(0..sess.remaining.len());
        let idx = sess.remaining.swap_remove(pick);
        let first_on_a = sess.rng.random_bool(0.5);
        sess.issued += 1;

        let item = &self.campaign.items[idx];
        let (a, b) = if first_on_a { (0, 1) } else { (1, 0) };
        let pair_id = uuid::Uuid::new_v4().to_string();
        let assignment = Assignment {
            pair_id: pair_id.clone(),
            question_id: idx,
            model_a: self.campaign.models[a].clone(),
            model_b: self.campaign.models[b].clone(),
        };
        if let Some(log) = state.assignment_log.as_mut() {
            log.append(&assignment)?;
        }
        state.assignments.push(assignment);
        state.pairs.insert(pair_id.clone());
        Ok(NextPair::Pair(PairPayload {
            pair_id,
            question: strip_emoji(&item.question),
            side_a: strip_emoji(&item.responses[a]),
            side_b: strip_emoji(&item.responses[b]),
        }))
    }

    pub fn record_vote(&self, session: &str, pair_id: &str, choice: &str) -> std::result::Result<VoteAck, VoteError> {
        let choice: Choice = choice.parse().map_err(|_| VoteError::InvalidChoice)?;
        let mut guard = self.state.lock().expect("arena state");
        let state = &mut *guard;
        if !state.pairs.contains(pair_id) {
            return Err(VoteError::UnknownPair(pair_id.into()));
        }
        let key = (session.to_string(), pair_id.to_string());
        if state.voted.contains(&key) {
            return Err(VoteError::Duplicate(pair_id.into()));
        }
        let vote = VoteRecord {
            pair_id: pair_id.into(),
            choice,
            session_id: session.into(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        };
        if let Some(log) = state.vote_log.as_mut() {
            log.append(&vote).map_err(|e| VoteError::Storage(e.to_string()))?;
        }
        state.votes.push(vote);
        state.voted.insert(key);
        let count = state.votes.iter().filter(|v| v.session_id == session).count();
        Ok(VoteAck {
            status: "ok",
            session_votes: count,
        })
    }

    pub fn report(&self) -> Result<SelectionReport> {
        let s = self.state.lock().expect("arena state");
        Ok(selection_report(&s.votes, &s.assignments)?)
    }

    pub fn vote_count(&self) -> usize {
        self.state.lock().expect("arena state").votes.len()
    }
}

/// Assignments and votes from a campaign directory; missing files are empty.
pub fn read_logs(dir: impl AsRef<Path>) -> Result<(Vec<Assignment>, Vec<VoteRecord>)> {
    let dir = dir.as_ref();
    let load = |name: &str| dir.join(name);
    let assignments = if load(ASSIGNMENTS_FILE).exists() {
        read_jsonl(load(ASSIGNMENTS_FILE))?
    } else {
        Vec::new()
    };
    let votes = if load(VOTES_FILE).exists() {
        read_jsonl(load(VOTES_FILE))?
    } else {
        Vec::new()
    };
    Ok((assignments, votes))
}

/// Offline report from a campaign directory's logs.
pub fn replay_report(dir: impl AsRef<Path>) -> Result<SelectionReport> {
    let (assignments, votes) = read_logs(dir)?;
    Ok(selection_report(&votes, &assignments)?)
}
