use humanlike_core::data::PromptKind;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// One chat-completion request as sent over the wire, minus the model name.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
}

impl ChatRequest {
    pub fn system_prompt(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == "system")
            .map(|m| m.content.as_str())
    }

    pub fn user_prompt(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
    }
}

/// Anything that can answer a chat-completion request with text.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        (**self).complete(request)
    }
}

/// Sends question-list requests to one backend and everything else to
/// another, so questions and answers can come from different models.
#[derive(Debug, Clone)]
pub struct RoutedBackend<Q, A> {
    pub questions: Q,
    pub answers: A,
}

impl<Q: ChatBackend, A: ChatBackend> ChatBackend for RoutedBackend<Q, A> {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let is_question = request
            .system_prompt()
            .is_some_and(|s| PromptKind::ALL.iter().any(|k| k.is_question() && k.template() == s));
        if is_question {
            self.questions.complete(request)
        } else {
            self.answers.complete(request)
        }
    }
}
