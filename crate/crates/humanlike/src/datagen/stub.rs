//! Offline stand-in for a chat model. Output is a pure function of the
//! prompt kind, the stub seed, and the user message, so whole pipelines are
//! reproducible without a network.

use humanlike_core::data::PromptKind;
use rand::seq::IndexedRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::backend::{ChatBackend, ChatRequest};
use crate::error::{Error, Result};

/// Every stub human-like answer starts with one of these.
pub const CASUAL_OPENERS: [&str; 8] = [
    "Oh man,",
    "Haha,",
    "Ooh,",
    "Honestly?",
    "Okay so,",
    "Ha!",
    "Oh wow,",
    "Lol,",
];

/// Every stub formal answer starts with one of these.
pub const FORMAL_OPENERS: [&str; 5] = [
    "Certainly.",
    "Thank you for your question.",
    "That is an interesting inquiry.",
    "Good day.",
    "I appreciate your inquiry.",
];

/// Number of questions in one stub question list.
pub const QUESTIONS_PER_LIST: usize = 20;

/// `(phrase used in questions, noun used in answers)`.
const SUBJECTS: [(&str, &str); 60] = [
    ("a beach vacation", "beach vacations"),
    ("your last road trip", "road trips"),
    ("a city you want to visit", "city breaks"),
    ("flying abroad", "going abroad"),
    ("packing for a trip", "trip planning"),
    ("your favorite football team", "football"),
    ("playing tennis", "tennis"),
    ("pickup basketball", "basketball"),
    ("watching soccer", "soccer"),
    ("being on a team", "team sports"),
    ("a morning workout", "workouts"),
    ("starting yoga", "yoga"),
    ("going to the gym", "the gym"),
    ("running a 5k", "running"),
    ("stretching after exercise", "stretching"),
    ("a song you can't stop playing", "that one song"),
    ("your first concert", "concerts"),
    ("learning guitar", "guitar"),
    ("a favorite album", "albums"),
    ("starting a band", "garage bands"),
    ("social media", "social media"),
    ("learning to code", "coding"),
    ("your phone", "phones"),
    ("robots in the kitchen", "robot chefs"),
    ("the early internet", "the old internet"),
    ("the ocean", "the ocean"),
    ("a walk in the forest", "forest walks"),
    ("hiking a mountain", "mountain hikes"),
    ("keeping a garden", "gardening"),
    ("stormy weather", "storms"),
    ("getting enough sleep", "sleep"),
    ("handling stress", "stress"),
    ("trying meditation", "meditation"),
    ("a balanced diet", "eating well"),
    ("mental health days", "rest days"),
    ("space exploration", "space"),
    ("the human brain", "the brain"),
    ("quantum physics", "quantum stuff"),
    ("dark matter", "dark matter"),
    ("chemistry experiments", "chemistry"),
    ("family dinners", "family dinners"),
    ("your grandma's recipes", "grandma's cooking"),
    ("growing up with siblings", "siblings"),
    ("advice from your parents", "parent advice"),
    ("raising a kid", "little kids"),
    ("a movie that stuck with you", "movies"),
    ("a book you love", "books"),
    ("local festivals", "festivals"),
    ("ancient history", "old history"),
    ("visiting art museums", "art"),
    ("your morning coffee", "coffee"),
    ("weekend plans", "weekends"),
    ("cooking at home", "cooking"),
    ("a daily routine", "routines"),
    ("small habits", "habits"),
    ("learning a new language", "languages"),
    ("a word you love", "fun words"),
    ("regional accents", "accents"),
    ("translating jokes", "translation"),
    ("grammar rules", "grammar"),
];

const CONVERSATIONAL: [&str; 10] = [
    "What's your take on {s}{q}?",
    "Got any funny stories about {s}{q}?",
    "How do you feel about {s}{q}?",
    "What's the best part of {s}{q}?",
    "Is {s} overrated{q}, or is it just me?",
    "What got you into {s}{q}?",
    "Any tips for {s}{q}?",
    "Be honest, do you actually enjoy {s}{q}?",
    "What's your favorite memory of {s}{q}?",
    "Would you spend a free afternoon on {s}{q}?",
];
const CONVERSATIONAL_QUALIFIERS: [&str; 7] = [
    "",
    " lately",
    " these days",
    " growing up",
    " right now",
    " this year",
    " with friends",
];

const KNOWLEDGE: [&str; 10] = [
    "How does {s} actually work{q}?",
    "What's the backstory of {s}{q}?",
    "What are some surprising facts about {s}{q}?",
    "Why do people care so much about {s}{q}?",
    "How has {s} changed over the years{q}?",
    "What's really going on behind {s}{q}?",
    "What would surprise most people about {s}{q}?",
    "Can you explain {s} like I'm five{q}?",
    "What's a common myth about {s}{q}?",
    "What should a beginner know about {s}{q}?",
];
const KNOWLEDGE_QUALIFIERS: [&str; 6] = [
    "",
    " today",
    " in simple terms",
    " in everyday life",
    " for a curious beginner",
    " in a nutshell",
];

const CASUAL_REACTIONS: [&str; 6] = [
    "I love {n}.",
    "{N} is totally my thing.",
    "I could talk about {n} all day.",
    "{N}? Yes please.",
    "I'm kinda obsessed with {n}.",
    "{N} always cheers me up.",
];
const CASUAL_DETAILS: [&str; 6] = [
    "My cousin got me into it years ago.",
    "Last summer was wild, trust me.",
    "It's my favorite way to unwind.",
    "I still laugh thinking about it.",
    "Best decision I ever made, no joke.",
    "",
];
const CASUAL_CLOSERS: [&str; 6] = [
    "What about you?",
    "You ever tried it?",
    "What's your take?",
    "Tell me yours!",
    "Right? \u{1F604}",
    "Your turn!",
];

const FORMAL_BODIES: [&str; 5] = [
    "The subject of {n} encompasses several considerations.",
    "{N} has been examined extensively in the literature.",
    "As an AI language model, I do not hold personal views regarding {n}.",
    "There are multiple perspectives regarding {n}.",
    "It is advisable to consider {n} from a balanced standpoint.",
];
const FORMAL_CLOSERS: [&str; 4] = [
    "I hope this information is helpful.",
    "Please let me know if you require further details.",
    "Further information is available from reputable sources.",
    "",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StubBackend {
    pub seed: u64,
}

impl StubBackend {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn rng(&self, kind: PromptKind, user: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(kind.as_str().as_bytes());
        h.update(self.seed.to_le_bytes());
        h.update(user.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

fn kind_of(system: &str) -> Option<PromptKind> {
    PromptKind::ALL.into_iter().find(|k| k.template() == system)
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn fill(template: &str, noun: &str) -> String {
    template.replace("{n}", noun).replace("{N}", &capitalize(noun))
}

fn join(parts: &[&str]) -> String {
    parts
        .iter()
        .filter(|p| !p.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Noun of the first subject phrase found in the question.
fn noun_for(question: &str) -> &'static str {
    SUBJECTS
        .iter()
        .find(|(phrase, _)| question.contains(phrase))
        .map_or("that", |(_, noun)| noun)
}

fn question_list(rng: &mut ChaCha8Rng, templates: &[&str], qualifiers: &[&str]) -> String {
    (1..=QUESTIONS_PER_LIST)
        .map(|i| {
            let (subject, _) = SUBJECTS.choose(rng).expect("non-empty");
            let t = templates.choose(rng).expect("non-empty");
            let q = qualifiers.choose(rng).expect("non-empty");
            format!("{i}. {}", t.replace("{s}", subject).replace("{q}", q))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn casual_answer(rng: &mut ChaCha8Rng, question: &str) -> String {
    let noun = noun_for(question);
    let opener = CASUAL_OPENERS.choose(rng).expect("non-empty");
    let reaction = fill(CASUAL_REACTIONS.choose(rng).expect("non-empty"), noun);
    let detail = CASUAL_DETAILS.choose(rng).expect("non-empty");
    let closer = CASUAL_CLOSERS.choose(rng).expect("non-empty");
    join(&[opener, &reaction, detail, closer])
}

fn formal_answer(rng: &mut ChaCha8Rng, question: &str) -> String {
    let noun = noun_for(question);
    let opener = FORMAL_OPENERS.choose(rng).expect("non-empty");
    let body = fill(FORMAL_BODIES.choose(rng).expect("non-empty"), noun);
    let closer = if rng.random_bool(0.5) {
        FORMAL_CLOSERS.choose(rng).expect("non-empty")
    } else {
        ""
    };
    join(&[opener, &body, closer])
}

impl ChatBackend for StubBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let system = request
            .system_prompt()
            .ok_or_else(|| Error::Backend("stub needs a system prompt".into()))?;
        let kind =
            kind_of(system).ok_or_else(|| Error::Backend("stub only answers the built-in system prompts".into()))?;
        let user = request.user_prompt().unwrap_or("");
        let mut rng = self.rng(kind, user);
        Ok(match kind {
            PromptKind::ConversationalQuestion => question_list(&mut rng, &CONVERSATIONAL, &CONVERSATIONAL_QUALIFIERS),
            PromptKind::KnowledgeQuestion => question_list(&mut rng, &KNOWLEDGE, &KNOWLEDGE_QUALIFIERS),
            PromptKind::HumanlikeAnswer => casual_answer(&mut rng, user),
            PromptKind::FormalAnswer => formal_answer(&mut rng, user),
        })
    }
}
