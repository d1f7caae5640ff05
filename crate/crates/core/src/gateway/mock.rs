use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::embedding::{EmbedError, TextEmbedder, UnitVector};

use super::{
    digest_messages, estimate_tokens, ChatProvider, Completion, EmbeddingProvider, Message,
    ProviderError, ProviderRequest, Task,
};

/// Produces the text of a mock completion.
pub trait Responder: Send + Sync {
    fn respond(&self, task: Task, messages: &[Message]) -> Result<String, ProviderError>;
}

impl<F> Responder for F
where
    F: Fn(Task, &[Message]) -> Result<String, ProviderError> + Send + Sync,
{
    fn respond(&self, task: Task, messages: &[Message]) -> Result<String, ProviderError> {
        self(task, messages)
    }
}

/// Chat provider that never touches the network.
pub struct MockProvider {
    responder: Arc<dyn Responder>,
}

impl MockProvider {
    pub fn new(responder: Arc<dyn Responder>) -> Self {
        Self { responder }
    }
}

impl ChatProvider for MockProvider {
    fn complete(&self, request: &ProviderRequest<'_>) -> Result<Completion, ProviderError> {
        let text = self.responder.respond(request.task, request.messages)?;
        Ok(Completion {
            prompt_tokens: request
                .messages
                .iter()
                .map(|m| estimate_tokens(&m.content))
                .sum(),
            completion_tokens: estimate_tokens(&text),
            text,
        })
    }
}

/// Canned reply keyed by `(role, digest(messages))`.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoResponder;

impl Responder for EchoResponder {
    fn respond(&self, task: Task, messages: &[Message]) -> Result<String, ProviderError> {
        let digest = digest_messages(messages);
        Ok(format!("[mock:{}:{}]", task.role(), &digest[..16]))
    }
}

/// Queue of replies per task, consumed in order. Once a task's queue is empty
/// the fallback responder (if any) answers. Every prompt is kept for inspection.
#[derive(Default)]
pub struct ScriptedResponder {
    queues: Mutex<HashMap<Task, VecDeque<Result<String, ProviderError>>>>,
    fallback: Option<Arc<dyn Responder>>,
    seen: Mutex<Vec<(Task, Vec<Message>)>>,
}

impl ScriptedResponder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fallback(fallback: Arc<dyn Responder>) -> Self {
        Self {
            fallback: Some(fallback),
            ..Self::default()
        }
    }

    pub fn push(&self, task: Task, reply: Result<String, ProviderError>) -> &Self {
        self.queues
            .lock()
            .expect("script lock")
            .entry(task)
            .or_default()
            .push_back(reply);
        self
    }

    pub fn push_ok(&self, task: Task, reply: impl Into<String>) -> &Self {
        self.push(task, Ok(reply.into()))
    }

    /// Prompts received so far for `task`.
    pub fn prompts(&self, task: Task) -> Vec<Vec<Message>> {
        self.seen
            .lock()
            .expect("seen lock")
            .iter()
            .filter(|(t, _)| *t == task)
            .map(|(_, m)| m.clone())
            .collect()
    }

    pub fn call_count(&self, task: Task) -> usize {
        self.prompts(task).len()
    }
}

impl Responder for ScriptedResponder {
    fn respond(&self, task: Task, messages: &[Message]) -> Result<String, ProviderError> {
        self.seen
            .lock()
            .expect("seen lock")
            .push((task, messages.to_vec()));
        let next = self
            .queues
            .lock()
            .expect("script lock")
            .get_mut(&task)
            .and_then(VecDeque::pop_front);
        match next {
            Some(reply) => reply,
            None => match &self.fallback {
                Some(f) => f.respond(task, messages),
                None => Err(ProviderError::Rejected(format!(
                    "no scripted reply left for {}",
                    task.as_str()
                ))),
            },
        }
    }
}

/// Deterministic embedding: each word maps to a seeded pseudo-random vector,
/// the text vector is their sum plus a whole-text term, then normalised.
///
/// Texts sharing vocabulary land near each other; distinct texts never
/// coincide unless byte-identical.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    fn seeded(&self, tag: &str, text: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(tag.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        let d = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&d);
        ChaCha8Rng::from_seed(seed)
    }

    fn accumulate(&self, acc: &mut [f64], tag: &str, text: &str, weight: f64) {
        let mut rng = self.seeded(tag, text);
        for x in acc.iter_mut() {
            *x += weight * rng.gen_range(-1.0..1.0);
        }
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let mut acc = vec![0.0; self.dim];
        let lowered = text.to_lowercase();
        for word in lowered
            .split(|c: char| !c.is_alphanumeric() && c != '_')
            .filter(|w| !w.is_empty())
        {
            self.accumulate(&mut acc, "word", word, 1.0);
        }
        self.accumulate(&mut acc, "text", text, 1.0);
        Ok(acc)
    }
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<UnitVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let raw = self
            .embed_raw(text)
            .map_err(|e| EmbedError::Provider(e.to_string()))?;
        Ok(UnitVector::normalize(raw)?)
    }
}
