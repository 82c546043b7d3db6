//! Question generation: prompt the question agent per generation chunk,
//! parse its list output, de-duplicate and filter.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Chunk, ChunkKind, ChunkRef, RegexTokenCounter, TokenCounter};
use crate::exec::{self, Exec};
use crate::llm::{LlmClient, LlmError, Purpose};
use crate::prompts::{render, PromptTemplates};

pub const DEFAULT_QUESTIONS_PER_CHUNK: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionStatus {
    Raw,
    Parsed,
    Duplicate,
    FilteredOut,
    Valid,
}

impl QuestionStatus {
    fn stage(self) -> u8 {
        match self {
            QuestionStatus::Raw => 0,
            QuestionStatus::Parsed => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub text: String,
    pub source_chunk: ChunkRef,
    pub status: QuestionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<Rejection>,
}

impl QuestionRecord {
    pub fn parsed(text: impl Into<String>, source_chunk: ChunkRef) -> Self {
        QuestionRecord { text: text.into(), source_chunk, status: QuestionStatus::Parsed, reason: None }
    }

    /// Moves the record forward. Backward or terminal-to-terminal moves
    /// are refused and leave the record unchanged.
    pub fn advance(&mut self, to: QuestionStatus) -> bool {
        if to.stage() <= self.status.stage() {
            return false;
        }
        self.status = to;
        true
    }
}

#[derive(Debug, thiserror::Error)]
pub enum QuestionGenError {
    #[error("chunk {0} is a {1:?} chunk; question generation needs ltg or whole_file chunks")]
    WrongChunkKind(ChunkRef, ChunkKind),
    #[error("chat failed for chunk {chunk}: {source}")]
    Chat { chunk: ChunkRef, source: LlmError },
}

fn list_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:(?:Q(?:uestion)?\s*)?\d{1,3}\s*[.):\-]\s*|[-*•+]\s+)").expect("static regex"))
}

/// Splits a list-shaped completion into item strings. When any line carries
/// a list marker only marked lines count as items; otherwise every
/// non-empty line does.
pub fn parse_question_list(completion: &str) -> Vec<String> {
    let lines: Vec<&str> = completion.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let any_marked = lines.iter().any(|l| list_marker().is_match(l));
    lines
        .into_iter()
        .filter_map(|l| match list_marker().find(l) {
            Some(m) => Some(l[m.end()..].trim().to_string()),
            None if !any_marked => Some(l.to_string()),
            None => None,
        })
        .filter(|q| !q.is_empty())
        .collect()
}

pub fn generate_questions(
    chunk: &Chunk,
    client: &LlmClient,
    n_per_chunk: usize,
    templates: &PromptTemplates,
) -> Result<Vec<QuestionRecord>, QuestionGenError> {
    if !matches!(chunk.kind, ChunkKind::Ltg | ChunkKind::WholeFile) {
        return Err(QuestionGenError::WrongChunkKind(chunk.chunk_ref(), chunk.kind));
    }
    let n = n_per_chunk.to_string();
    let user = render(&templates.question_user, &[("n", &n), ("chunk", &chunk.text)]);
    let system = render(&templates.question_system, &[]);
    let request = client.request(system, user, Purpose::QuestionGeneration);
    let exchange =
        client.chat(&request).map_err(|source| QuestionGenError::Chat { chunk: chunk.chunk_ref(), source })?;
    let questions = parse_question_list(&exchange.response_text);
    if questions.is_empty() {
        log::warn!("no parseable questions for chunk {}", chunk.chunk_ref());
    }
    Ok(questions.into_iter().map(|q| QuestionRecord::parsed(q, chunk.chunk_ref())).collect())
}

#[derive(Debug, Default)]
pub struct GeneratedQuestions {
    pub records: Vec<QuestionRecord>,
    /// Chunks whose chat call failed; they are skipped.
    pub skipped: Vec<(ChunkRef, String)>,
}

/// Generates for every chunk concurrently (bounded by the client), then
/// orders results by (doc_id, seq) so output does not depend on scheduling.
pub fn generate_all(
    chunks: &[Chunk],
    client: &LlmClient,
    n_per_chunk: usize,
    templates: &PromptTemplates,
    exec: Exec,
) -> GeneratedQuestions {
    let mut order: Vec<&Chunk> = chunks.iter().collect();
    order.sort_by(|a, b| (&a.doc_id, a.kind, a.seq).cmp(&(&b.doc_id, b.kind, b.seq)));
    let results = exec::map(exec, &order, |c| generate_questions(c, client, n_per_chunk, templates));
    let mut out = GeneratedQuestions::default();
    for (chunk, r) in order.iter().zip(results) {
        match r {
            Ok(recs) => out.records.extend(recs),
            Err(e) => {
                log::warn!("skipping chunk {}: {e}", chunk.chunk_ref());
                out.skipped.push((chunk.chunk_ref(), e.to_string()));
            }
        }
    }
    out
}

/// Records split into those kept and those removed by a pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partition {
    pub kept: Vec<QuestionRecord>,
    pub removed: Vec<QuestionRecord>,
}

/// Exact-string de-duplication keeping first occurrences in order.
pub fn deduplicate(questions: Vec<QuestionRecord>) -> Partition {
    let mut seen: HashSet<String> = HashSet::new();
    let mut out = Partition::default();
    for mut q in questions {
        if seen.insert(q.text.clone()) {
            out.kept.push(q);
        } else {
            q.advance(QuestionStatus::Duplicate);
            out.removed.push(q);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    NoTerminalPunctuation,
    NotAnInstruction,
    TooShort,
    TooLong,
    ListArtifact,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterRules {
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Verbs accepted as the opener of a `.`-terminated instruction.
    pub instruction_openers: Vec<String>,
}

impl Default for FilterRules {
    fn default() -> Self {
        let openers = [
            "generate",
            "write",
            "explain",
            "describe",
            "implement",
            "create",
            "list",
            "summarize",
            "compare",
            "define",
            "identify",
            "provide",
            "show",
            "modify",
            "add",
            "refactor",
            "outline",
            "give",
            "state",
            "name",
            "discuss",
            "analyze",
            "update",
            "extend",
        ];
        FilterRules {
            min_tokens: 4,
            max_tokens: 128,
            instruction_openers: openers.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn artifact_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*(?:(?:Q(?:uestion)?\s*)?\d{1,3}\s*[.):]|[-*•+#>]\s*)|\*\*|```|[\r\n\t]").expect("static regex")
    })
}

impl FilterRules {
    /// First rule `text` violates, if any.
    pub fn check(&self, text: &str) -> Option<Rejection> {
        let t = text.trim();
        if artifact_regex().is_match(text) {
            return Some(Rejection::ListArtifact);
        }
        let terminal = match t.chars().last() {
            Some('?') => None,
            Some('.') => {
                let first = t.split_whitespace().next().unwrap_or("").to_lowercase();
                let first = first.trim_matches(|c: char| !c.is_alphanumeric());
                if self.instruction_openers.iter().any(|o| o.eq_ignore_ascii_case(first)) {
                    None
                } else {
                    Some(Rejection::NotAnInstruction)
                }
            }
            _ => Some(Rejection::NoTerminalPunctuation),
        };
        if terminal.is_some() {
            return terminal;
        }
        let tokens = RegexTokenCounter.count(t);
        if tokens < self.min_tokens {
            Some(Rejection::TooShort)
        } else if tokens > self.max_tokens {
            Some(Rejection::TooLong)
        } else {
            None
        }
    }
}

pub fn filter_valid(questions: Vec<QuestionRecord>, rules: &FilterRules) -> Partition {
    let mut out = Partition::default();
    for mut q in questions {
        match rules.check(&q.text) {
            None => {
                q.advance(QuestionStatus::Valid);
                out.kept.push(q);
            }
            Some(reason) => {
                q.advance(QuestionStatus::FilteredOut);
                q.reason = Some(reason);
                out.removed.push(q);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{recursive_split, Document, SourceKind, DEFAULT_SEPARATORS};
    use crate::llm::{BackendConfig, BackendError, MockBackend};
    use std::sync::Arc;

    fn r(text: &str) -> QuestionRecord {
        QuestionRecord::parsed(text, ChunkRef("d:ltg:0".into()))
    }

    fn texts(p: &[QuestionRecord]) -> Vec<&str> {
        p.iter().map(|q| q.text.as_str()).collect()
    }

    #[test]
    fn canonical_numbered_list() {
        assert_eq!(parse_question_list("1. What is X?\n2. What is Y?"), ["What is X?", "What is Y?"]);
    }

    #[test]
    fn list_styles_parse_identically() {
        let canonical = parse_question_list("1. What is X?\n2. Explain Y.");
        for styled in [
            "- What is X?\n- Explain Y.",
            "* What is X?\n* Explain Y.",
            "Q1: What is X?\nQ2: Explain Y.",
            "Question 1: What is X?\nQuestion 2: Explain Y.",
            "1) What is X?\n2) Explain Y.",
            "Here you go:\n\n  1.   What is X?\n 2. Explain Y.\n",
            "What is X?\nExplain Y.",
        ] {
            assert_eq!(parse_question_list(styled), canonical, "style {styled:?}");
        }
    }

    #[test]
    fn numbers_inside_questions_are_kept() {
        assert_eq!(parse_question_list("1. What does 5G NR add?"), ["What does 5G NR add?"]);
    }

    #[test]
    fn dedup_keeps_first_occurrence() {
        let p = deduplicate(vec![r("a?"), r("b?"), r("a?")]);
        assert_eq!(texts(&p.kept), ["a?", "b?"]);
        assert_eq!(p.removed.len(), 1);
        assert_eq!(p.removed[0].status, QuestionStatus::Duplicate);
        assert_eq!(deduplicate(vec![]), Partition::default());
    }

    #[test]
    fn filter_examples() {
        let rules = FilterRules::default();
        assert_eq!(rules.check("What is the O-RAN fronthaul split?"), None);
        assert_eq!(rules.check("What is the"), Some(Rejection::NoTerminalPunctuation));
        assert_eq!(
            rules.check("Generate code to add error handling for the `std::strtol` function in `parse_args`."),
            None
        );
        assert_eq!(rules.check("The answer is below."), Some(Rejection::NotAnInstruction));
        assert_eq!(rules.check("Why?"), Some(Rejection::TooShort));
        assert_eq!(rules.check("1. What is the O-RAN split?"), Some(Rejection::ListArtifact));
        assert_eq!(rules.check("What is **this** about here?"), Some(Rejection::ListArtifact));
        let long = format!("What {}?", "word ".repeat(200));
        assert_eq!(rules.check(&long), Some(Rejection::TooLong));
    }

    #[test]
    fn filter_marks_status_and_reason() {
        let p = filter_valid(vec![r("What is the O-RAN fronthaul split?"), r("What is the")], &FilterRules::default());
        assert_eq!(p.kept[0].status, QuestionStatus::Valid);
        assert_eq!(p.removed[0].status, QuestionStatus::FilteredOut);
        assert_eq!(p.removed[0].reason, Some(Rejection::NoTerminalPunctuation));
    }

    #[test]
    fn status_only_moves_forward() {
        let mut q = r("x?");
        assert!(!q.advance(QuestionStatus::Raw));
        assert!(q.advance(QuestionStatus::Valid));
        assert!(!q.advance(QuestionStatus::Duplicate));
        assert_eq!(q.status, QuestionStatus::Valid);
    }

    fn ltg_chunk(text: &str) -> Chunk {
        let d = Document::new(SourceKind::Spec, "x.txt", text.into());
        recursive_split(&d, ChunkKind::Ltg, 4096, &DEFAULT_SEPARATORS, &RegexTokenCounter).remove(0)
    }

    #[test]
    fn generate_from_scripted_completion() {
        let backend = MockBackend::scripted(vec![Ok("1. What is X?\n2. What is Y?".into())]);
        let client = LlmClient::with_backend(BackendConfig::mock("agent"), Arc::new(backend));
        let chunk = ltg_chunk("X and Y are things.");
        let qs = generate_questions(&chunk, &client, 2, &PromptTemplates::default()).unwrap();
        assert_eq!(texts(&qs), ["What is X?", "What is Y?"]);
        assert!(qs.iter().all(|q| q.source_chunk == chunk.chunk_ref() && q.status == QuestionStatus::Parsed));
    }

    #[test]
    fn rag_chunks_are_refused() {
        let d = Document::new(SourceKind::Spec, "x.txt", "text".into());
        let c = recursive_split(&d, ChunkKind::Rag, 10, &DEFAULT_SEPARATORS, &RegexTokenCounter).remove(0);
        let client = LlmClient::from_config(BackendConfig::mock("agent")).unwrap();
        assert!(matches!(
            generate_questions(&c, &client, 1, &PromptTemplates::default()),
            Err(QuestionGenError::WrongChunkKind(..))
        ));
    }

    #[test]
    fn failing_chunks_are_skipped() {
        let backend = MockBackend::scripted(vec![Err(BackendError::Permanent { status: 400, message: "bad".into() })]);
        let client = LlmClient::with_backend(BackendConfig::mock("agent"), Arc::new(backend));
        let out = generate_all(&[ltg_chunk("a b c")], &client, 3, &PromptTemplates::default(), Exec::Sequential);
        assert!(out.records.is_empty());
        assert_eq!(out.skipped.len(), 1);
    }

    #[test]
    fn code_chunk_yields_instruction_style_questions() {
        let d = Document::new(
            SourceKind::Code,
            "apps/parse.cpp",
            "void parse_args(int argc, char** argv) {\n  long v = std::strtol(argv[1], nullptr, 10);\n}\n".into(),
        );
        let chunk = crate::corpus::whole_file_chunk(&d, &RegexTokenCounter);
        let client = LlmClient::from_config(BackendConfig::mock("agent?seed=1")).unwrap();
        let qs = generate_questions(&chunk, &client, 5, &PromptTemplates::default()).unwrap();
        let valid = filter_valid(deduplicate(qs).kept, &FilterRules::default()).kept;
        assert!(valid.iter().any(|q| q.text.starts_with("Generate code to add error handling")));
    }
}
