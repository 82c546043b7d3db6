//! Multiple-choice benchmark loading, sampling, evaluation and scoring.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answers::ChunkStore;
use crate::exec::{self, Exec};
use crate::index::VectorIndex;
use crate::llm::{LlmClient, Purpose, SOURCE_LABEL};
use crate::numeric::{percent_change, round_dp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Easy,
    #[serde(alias = "medium")]
    Intermediate,
    Difficult,
    Code,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Easy, Category::Intermediate, Category::Difficult, Category::Code];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Easy => "easy",
            Category::Intermediate => "intermediate",
            Category::Difficult => "difficult",
            Category::Code => "code",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "easy" => Ok(Category::Easy),
            "intermediate" | "medium" => Ok(Category::Intermediate),
            "difficult" | "hard" => Ok(Category::Difficult),
            "code" | "srsran" => Ok(Category::Code),
            other => Err(format!("unknown category {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchItem {
    pub id: String,
    pub question: String,
    pub options: [String; 4],
    /// 1-based index of the correct option.
    pub answer: u8,
    pub category: Category,
}

#[derive(Deserialize)]
struct RawItem {
    id: serde_json::Value,
    question: String,
    options: Vec<String>,
    answer: i64,
    category: String,
}

impl TryFrom<RawItem> for BenchItem {
    type Error = String;

    fn try_from(raw: RawItem) -> Result<Self, String> {
        let id = match raw.id {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            other => return Err(format!("id must be a string or number, got {other}")),
        };
        let n = raw.options.len();
        let options: [String; 4] =
            raw.options.try_into().map_err(|_| format!("expected exactly 4 options, got {n}"))?;
        if !(1..=4).contains(&raw.answer) {
            return Err(format!("answer {} is outside 1..4", raw.answer));
        }
        if raw.question.trim().is_empty() {
            return Err("empty question".into());
        }
        let category = raw.category.parse()?;
        Ok(BenchItem { id, question: raw.question, options, answer: raw.answer as u8, category })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Default)]
pub struct LoadedBench {
    pub items: Vec<BenchItem>,
    pub errors: Vec<LineError>,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("cannot read benchmark file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("no valid benchmark items ({} rejected lines{})", .0.len(), first_error(.0))]
    NoValidItems(Vec<LineError>),
    #[error("RAG mode requires a retrieval index")]
    MissingRagIndex,
    #[error("missing accuracy for category {0}")]
    MissingCategory(Category),
    #[error("baseline must be positive, got {0}")]
    NonPositiveBaseline(f64),
}

fn first_error(errors: &[LineError]) -> String {
    errors.first().map(|e| format!(", first: {e}")).unwrap_or_default()
}

/// Parses line-delimited benchmark records, collecting per-line errors.
pub fn parse_bench(text: &str) -> Result<LoadedBench, BenchError> {
    let mut out = LoadedBench::default();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed =
            serde_json::from_str::<RawItem>(line).map_err(|e| e.to_string()).and_then(BenchItem::try_from).and_then(
                |item| {
                    if ids.insert(item.id.clone()) {
                        Ok(item)
                    } else {
                        Err(format!("duplicate id {:?}", item.id))
                    }
                },
            );
        match parsed {
            Ok(item) => out.items.push(item),
            Err(message) => out.errors.push(LineError { line: i + 1, message }),
        }
    }
    if out.items.is_empty() {
        return Err(BenchError::NoValidItems(out.errors));
    }
    for e in &out.errors {
        log::warn!("benchmark item rejected: {e}");
    }
    Ok(out)
}

pub fn load_bench(path: &Path) -> Result<LoadedBench, BenchError> {
    let text =
        fs::read_to_string(path).map_err(|source| BenchError::Io { path: path.display().to_string(), source })?;
    parse_bench(&text)
}

/// Draws up to `per_category` items from each category uniformly without
/// replacement. The result keeps the input order.
pub fn sample_subset(items: &[BenchItem], per_category: usize, seed: u64) -> Vec<BenchItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = BTreeSet::new();
    for cat in Category::ALL {
        let positions: Vec<usize> =
            items.iter().enumerate().filter(|(_, it)| it.category == cat).map(|(i, _)| i).collect();
        let take = per_category.min(positions.len());
        for j in rand::seq::index::sample(&mut rng, positions.len(), take) {
            chosen.insert(positions[j]);
        }
    }
    chosen.into_iter().map(|i| items[i].clone()).collect()
}

/// The evaluation prompt: optional context, the question, numbered options
/// and an instruction to reply with one digit.
pub fn mcq_prompt(item: &BenchItem, context: Option<&str>) -> String {
    let mut p = String::new();
    if let Some(ctx) = context {
        p.push_str("Context:\n");
        p.push_str(ctx.trim_end());
        p.push_str("\n\n");
    }
    p.push_str(&format!("Question: {}\nOptions:\n", item.question.trim()));
    for (i, o) in item.options.iter().enumerate() {
        p.push_str(&format!("{}) {}\n", i + 1, o));
    }
    p.push_str("Reply with the number (1, 2, 3 or 4) of the correct option only.");
    p
}

pub const MCQ_SYSTEM_PROMPT: &str = "You are answering multiple-choice questions about telecommunication systems.";

/// First digit 1..4 that is not attached to a letter, another digit or a
/// decimal point.
pub fn parse_answer(completion: &str) -> Option<u8> {
    let chars: Vec<char> = completion.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if !c.is_ascii_digit() {
            continue;
        }
        let prev = i.checked_sub(1).map(|j| chars[j]);
        let next = chars.get(i + 1).copied();
        let glued = |ch: Option<char>| ch.is_some_and(|ch| ch.is_alphanumeric() || ch == '_');
        let decimal_before = prev == Some('.') && i >= 2 && chars[i - 2].is_ascii_digit();
        let decimal_after = next == Some('.') && chars.get(i + 2).is_some_and(|ch| ch.is_ascii_digit());
        if glued(prev) || glued(next) || decimal_before || decimal_after {
            continue;
        }
        if ('1'..='4').contains(&c) {
            return Some(c as u8 - b'0');
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Plain,
    Rag,
}

impl FromStr for EvalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(EvalMode::Plain),
            "rag" => Ok(EvalMode::Rag),
            other => Err(format!("unknown mode {other:?} (expected plain or rag)")),
        }
    }
}

pub struct RagContext<'a> {
    pub index: &'a VectorIndex,
    pub store: &'a ChunkStore,
    pub embedder: &'a LlmClient,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub category: Category,
    pub answer: u8,
    pub predicted: Option<u8>,
    pub correct: bool,
    pub raw_completion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: EvalMode,
    pub model: String,
    pub k: usize,
    pub items: Vec<ItemResult>,
}

impl RunRecord {
    pub fn unparsed_count(&self) -> usize {
        self.items.iter().filter(|r| r.error.is_none() && r.predicted.is_none()).count()
    }

    pub fn errored_count(&self) -> usize {
        self.items.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn accuracy(&self) -> f64 {
        accuracy_of(self.items.iter())
    }

    /// Accuracy per category that has at least one item.
    pub fn accuracies(&self) -> BTreeMap<Category, f64> {
        Category::ALL
            .iter()
            .filter_map(|c| {
                let mut it = self.items.iter().filter(|r| r.category == *c).peekable();
                it.peek()?;
                Some((*c, accuracy_of(it)))
            })
            .collect()
    }
}

fn accuracy_of<'a>(items: impl Iterator<Item = &'a ItemResult>) -> f64 {
    let (mut n, mut ok) = (0usize, 0usize);
    for r in items {
        n += 1;
        ok += r.correct as usize;
    }
    if n == 0 {
        0.0
    } else {
        ok as f64 / n as f64
    }
}

fn rag_context(item: &BenchItem, rag: &RagContext<'_>) -> Result<String, String> {
    let q = rag.embedder.embed_one(&item.question).map_err(|e| e.to_string())?;
    let hits = rag.index.search_with(&q, rag.k, Exec::Sequential).map_err(|e| e.to_string())?;
    let mut ctx = String::new();
    for h in hits {
        let text = rag.store.text(&h.chunk_ref).ok_or_else(|| format!("no text for chunk {}", h.chunk_ref))?;
        ctx.push_str(&format!("{SOURCE_LABEL}{}]\n{}\n\n", h.chunk_ref, text.trim_end()));
    }
    Ok(ctx)
}

fn evaluate_item(item: &BenchItem, chat: &LlmClient, rag: Option<&RagContext<'_>>) -> ItemResult {
    let mut result = ItemResult {
        id: item.id.clone(),
        category: item.category,
        answer: item.answer,
        predicted: None,
        correct: false,
        raw_completion: None,
        error: None,
    };
    let context = match rag.map(|r| rag_context(item, r)).transpose() {
        Ok(c) => c,
        Err(e) => {
            log::warn!("retrieval failed for item {}: {e}", item.id);
            result.error = Some(e);
            return result;
        }
    };
    let request = chat.request(MCQ_SYSTEM_PROMPT, mcq_prompt(item, context.as_deref()), Purpose::MultipleChoice);
    match chat.chat(&request) {
        Ok(ex) => {
            result.predicted = parse_answer(&ex.response_text);
            result.correct = result.predicted == Some(item.answer);
            result.raw_completion = Some(ex.response_text);
        }
        Err(e) => {
            log::warn!("item {} errored: {e}", item.id);
            result.error = Some(e.to_string());
        }
    }
    result
}

/// Evaluates every item; failures mark single items and never abort the run.
pub fn evaluate(
    items: &[BenchItem],
    chat: &LlmClient,
    mode: EvalMode,
    rag: Option<&RagContext<'_>>,
    exec: Exec,
) -> Result<RunRecord, BenchError> {
    let rag = match mode {
        EvalMode::Plain => None,
        EvalMode::Rag => Some(rag.ok_or(BenchError::MissingRagIndex)?),
    };
    let results = exec::map(exec, items, |it| evaluate_item(it, chat, rag));
    Ok(RunRecord { mode, model: chat.config().model_name.clone(), k: rag.map_or(0, |r| r.k), items: results })
}

/// Per-category accuracies and the two aggregate scores, all at 3 decimals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub easy: f64,
    pub medium: f64,
    pub difficult: f64,
    pub code: f64,
    pub oranbench_average: f64,
    pub cumulative_score: f64,
    pub unparsed_count: usize,
}

impl ScoreTable {
    /// The average is taken over the 3-decimal category accuracies, and the
    /// cumulative score over the 3-decimal average and code accuracy.
    pub fn from_accuracies(easy: f64, medium: f64, difficult: f64, code: f64) -> Self {
        let [easy, medium, difficult, code] = [easy, medium, difficult, code].map(|x| round_dp(x, 3));
        let avg = round_dp((easy + medium + difficult) / 3.0, 3);
        let cumulative = round_dp((avg + code) / 2.0, 3);
        ScoreTable {
            easy,
            medium,
            difficult,
            code,
            oranbench_average: avg,
            cumulative_score: cumulative,
            unparsed_count: 0,
        }
    }
}

/// Scores one or more runs that together cover all four categories.
pub fn score(runs: &[RunRecord]) -> Result<ScoreTable, BenchError> {
    let items: Vec<&ItemResult> = runs.iter().flat_map(|r| r.items.iter()).collect();
    let mut acc = [0.0; 4];
    for (slot, cat) in acc.iter_mut().zip(Category::ALL) {
        let mut of_cat = items.iter().copied().filter(|r| r.category == cat).peekable();
        if of_cat.peek().is_none() {
            return Err(BenchError::MissingCategory(cat));
        }
        *slot = accuracy_of(of_cat);
    }
    let mut table = ScoreTable::from_accuracies(acc[0], acc[1], acc[2], acc[3]);
    table.unparsed_count = runs.iter().map(RunRecord::unparsed_count).sum();
    Ok(table)
}

/// Relative gain of `with_value` over `without_value`, in percent at 2 decimals.
pub fn improvement_percent(with_value: f64, without_value: f64) -> Result<f64, BenchError> {
    if without_value <= 0.0 || without_value.is_nan() {
        return Err(BenchError::NonPositiveBaseline(without_value));
    }
    Ok(round_dp(percent_change(without_value, with_value), 2))
}
