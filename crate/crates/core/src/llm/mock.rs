//! Offline deterministic backend.
//!
//! Endpoint syntax: `mock:<kind>?key=value&...`. Every response is a pure
//! function of (kind, parameters, request), except for the `fails=N`
//! parameter, which makes the first N calls fail transiently.
//!
//! | kind       | chat behaviour                                               |
//! |------------|--------------------------------------------------------------|
//! | `agent`    | role-aware: question lists, context-citing answers, digits   |
//! | `echo`     | answers with the context labels found in the prompt          |
//! | `constant` | always `answer` (default `3`)                                |
//! | `random`   | uniform digit 1..4 seeded by `seed` and the prompt           |
//! | `fail`     | every call fails transiently                                 |
//! | `hash`     | alias of `agent`; usually used for embeddings                |
//!
//! Embeddings for every kind are a seeded hashed bag-of-words projection to
//! `dim` (default 64) components. `limit=N` advertises an N-token input
//! budget.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use super::{Backend, BackendError, ChatRequest, Completion, Purpose, Usage};
use crate::corpus::{RegexTokenCounter, TokenCounter};

/// Label that prefixes each retrieved context block in answer prompts.
pub const SOURCE_LABEL: &str = "[source: ";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockKind {
    Agent,
    Echo,
    Constant(String),
    Random,
    Fail,
}

/// Replies to replay and the position of the next one.
type Script = (Vec<Result<String, BackendError>>, usize);

#[derive(Debug)]
pub struct MockBackend {
    kind: MockKind,
    seed: u64,
    dim: usize,
    limit: Option<usize>,
    fail_first: usize,
    calls: AtomicUsize,
    answer_key: HashMap<String, u8>,
    script: Option<Mutex<Script>>,
}

impl MockBackend {
    pub fn new(kind: MockKind, seed: u64) -> Self {
        MockBackend {
            kind,
            seed,
            dim: 64,
            limit: None,
            fail_first: 0,
            calls: AtomicUsize::new(0),
            answer_key: HashMap::new(),
            script: None,
        }
    }

    /// Parses the part after `mock:`.
    pub fn parse(spec: &str) -> Result<Self, String> {
        let (kind, query) = spec.split_once('?').unwrap_or((spec, ""));
        let mut params: HashMap<&str, &str> = HashMap::new();
        for pair in query.split('&').filter(|p| !p.is_empty()) {
            let (k, v) = pair.split_once('=').ok_or_else(|| format!("mock parameter {pair:?} is not key=value"))?;
            params.insert(k, v);
        }
        let num = |key: &str| -> Result<Option<u64>, String> {
            params
                .get(key)
                .map(|v| v.parse::<u64>().map_err(|_| format!("mock parameter {key}={v} is not an integer")))
                .transpose()
        };
        let kind = match kind {
            "" | "agent" | "hash" => MockKind::Agent,
            "echo" => MockKind::Echo,
            "constant" => MockKind::Constant(params.get("answer").unwrap_or(&"3").to_string()),
            "random" => MockKind::Random,
            "fail" => MockKind::Fail,
            other => return Err(format!("unknown mock kind {other:?}")),
        };
        let mut m = MockBackend::new(kind, num("seed")?.unwrap_or(0));
        if let Some(d) = num("dim")? {
            if d == 0 {
                return Err("mock dim must be positive".into());
            }
            m.dim = d as usize;
        }
        m.limit = num("limit")?.map(|l| l as usize);
        m.fail_first = num("fails")?.unwrap_or(0) as usize;
        Ok(m)
    }

    /// Multiple-choice oracle: answers each question with its key.
    pub fn answer_key(key: HashMap<String, u8>) -> Self {
        MockBackend { answer_key: key, ..MockBackend::new(MockKind::Agent, 0) }
    }

    /// Replays `responses` in order, cycling when exhausted.
    pub fn scripted(responses: Vec<Result<String, BackendError>>) -> Self {
        MockBackend { script: Some(Mutex::new((responses, 0))), ..MockBackend::new(MockKind::Agent, 0) }
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = dim.max(1);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn respond(&self, req: &ChatRequest) -> Result<String, BackendError> {
        if let Some(script) = &self.script {
            let mut guard = script.lock();
            let (items, pos) = &mut *guard;
            if items.is_empty() {
                return Ok(String::new());
            }
            let out = items[*pos % items.len()].clone();
            *pos += 1;
            return out;
        }
        if !self.answer_key.is_empty() {
            if let Some(q) = question_line(&req.user_prompt) {
                if let Some(a) = self.answer_key.get(q) {
                    return Ok(a.to_string());
                }
            }
        }
        let h = fnv1a(self.seed, req.user_prompt.as_bytes());
        match &self.kind {
            MockKind::Fail => Err(BackendError::Transient("mock backend configured to fail".into())),
            MockKind::Constant(a) => Ok(a.clone()),
            MockKind::Random => Ok((1 + h % 4).to_string()),
            MockKind::Echo => Ok(source_labels(&req.user_prompt).join(" ")),
            MockKind::Agent => Ok(match req.purpose {
                Purpose::QuestionGeneration => agent_questions(&req.user_prompt, h),
                Purpose::AnswerGeneration => agent_answer(&req.user_prompt),
                Purpose::MultipleChoice => (1 + h % 4).to_string(),
                Purpose::Generic => "OK".to_string(),
            }),
        }
    }
}

impl Backend for MockBackend {
    fn chat(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if n < self.fail_first {
            return Err(BackendError::Transient(format!("scripted failure {}", n + 1)));
        }
        let text = self.respond(request)?;
        let usage = Usage {
            prompt_tokens: RegexTokenCounter.count(&request.system_prompt) as u64
                + RegexTokenCounter.count(&request.user_prompt) as u64,
            completion_tokens: RegexTokenCounter.count(&text) as u64,
        };
        Ok(Completion { text, usage })
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if n < self.fail_first || self.kind == MockKind::Fail {
            return Err(BackendError::Transient(format!("scripted failure {}", n + 1)));
        }
        Ok(texts.iter().map(|t| hashed_bag_of_words(t, self.dim, self.seed)).collect())
    }

    fn embed_token_limit(&self) -> Option<usize> {
        self.limit
    }
}

/// Signed feature hashing of lowercased word tokens plus a constant bias
/// component, so no input maps to the zero vector.
pub fn hashed_bag_of_words(text: &str, dim: usize, seed: u64) -> Vec<f32> {
    let mut v = vec![0f32; dim];
    let bias = fnv1a(seed, b"\x00bias") as usize % dim;
    v[bias] += 0.5;
    for m in word_regex().find_iter(text) {
        let h = fnv1a(seed, m.as_str().to_lowercase().as_bytes());
        let idx = (h % dim as u64) as usize;
        let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
        v[idx] += sign;
    }
    v
}

fn word_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\w+").expect("static regex"))
}

pub(crate) fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // final avalanche so low bits are usable as indices
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h
}

fn question_line(prompt: &str) -> Option<&str> {
    prompt.lines().find_map(|l| l.strip_prefix("Question: ")).map(str::trim)
}

/// Labels of the `[source: ...]` context blocks in `prompt`, in order.
pub fn source_labels(prompt: &str) -> Vec<String> {
    prompt
        .lines()
        .filter_map(|l| l.trim().strip_prefix(SOURCE_LABEL))
        .filter_map(|rest| rest.strip_suffix(']'))
        .map(str::to_string)
        .collect()
}

fn context_of(prompt: &str) -> &str {
    match (prompt.find("<context>"), prompt.rfind("</context>")) {
        (Some(s), Some(e)) if s + 9 <= e => &prompt[s + 9..e],
        _ => prompt,
    }
}

fn agent_questions(prompt: &str, h: u64) -> String {
    static IDENT: OnceLock<Regex> = OnceLock::new();
    let ident = IDENT.get_or_init(|| Regex::new(r"\b([A-Za-z_][A-Za-z0-9_]{3,})\s*\(").expect("static regex"));
    let context = context_of(prompt);
    let mut rng = ChaCha8Rng::seed_from_u64(h);

    let mut questions: Vec<String> = Vec::new();
    let looks_like_code = context.contains(';') && context.contains('{');
    if looks_like_code {
        let mut names: Vec<&str> = ident
            .captures_iter(context)
            .map(|c| c.get(1).map_or("", |m| m.as_str()))
            .filter(|n| !matches!(*n, "if" | "for" | "while" | "switch" | "return" | "sizeof"))
            .collect();
        names.dedup();
        names.truncate(3);
        for n in names {
            questions.push(format!("Explain the purpose of the `{n}` function."));
            questions.push(format!("Generate code to add error handling to the `{n}` function."));
        }
    } else {
        let sentences: Vec<String> = context
            .split(['.', '\n', '?', '!'])
            .map(|s| s.split_whitespace().collect::<Vec<_>>())
            .filter(|w| w.len() >= 6)
            .map(|w| w[..6].join(" ").trim_matches(|c: char| !c.is_alphanumeric()).to_string())
            .collect();
        let picked: Vec<&String> = sentences.choose_multiple(&mut rng, 4.min(sentences.len())).collect();
        for s in picked {
            questions.push(format!("What does the document state about \"{s}\"?"));
        }
    }
    questions.push("What is the main purpose of this section?".to_string());

    let style = rng.gen_range(0..3);
    let mut out = String::new();
    if rng.gen_bool(0.5) {
        out.push_str("Here are the questions:\n");
    }
    for (i, q) in questions.iter().enumerate() {
        let line = match style {
            0 => format!("{}. {q}", i + 1),
            1 => format!("- {q}"),
            _ => format!("Q{}: {q}", i + 1),
        };
        out.push_str(&line);
        out.push('\n');
    }
    if rng.gen_bool(0.5) {
        out.push_str(match style {
            0 => "9. What is the",
            1 => "- What is the",
            _ => "Q9: What is the",
        });
    }
    out
}

fn agent_answer(prompt: &str) -> String {
    let labels = source_labels(prompt);
    let mut words: Vec<&str> = Vec::new();
    let mut in_block = false;
    for line in prompt.lines() {
        if line.trim().starts_with(SOURCE_LABEL) {
            in_block = true;
            continue;
        }
        if in_block && !line.trim().is_empty() {
            words.extend(line.split_whitespace());
            if words.len() >= 24 {
                break;
            }
        }
    }
    words.truncate(24);
    let cited = labels.iter().map(|l| format!("[{l}]")).collect::<Vec<_>>().join(", ");
    format!("According to {cited}: {}.", words.join(" ").trim_end_matches('.'))
}
