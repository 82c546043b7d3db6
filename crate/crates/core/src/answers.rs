//! Answer generation over retrieved context and dataset assembly.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{word_count, Chunk, ChunkRef, Document, SourceKind};
use crate::exec::{self, Exec};
use crate::index::{IndexError, VectorIndex};
use crate::llm::{LlmClient, LlmError, Purpose, SOURCE_LABEL};
use crate::numeric::{percent, round_dp};
use crate::prompts::{render, PromptTemplates};
use crate::questions::{QuestionRecord, QuestionStatus};

pub const DEFAULT_TOP_K: usize = 3;

/// Dataset-level source label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    #[serde(alias = "spec")]
    Oran,
    #[serde(alias = "code")]
    Srsran,
}

impl DatasetSource {
    pub const ALL: [DatasetSource; 2] = [DatasetSource::Oran, DatasetSource::Srsran];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetSource::Oran => "oran",
            DatasetSource::Srsran => "srsran",
        }
    }
}

impl From<SourceKind> for DatasetSource {
    fn from(k: SourceKind) -> Self {
        match k {
            SourceKind::Spec => DatasetSource::Oran,
            SourceKind::Code => DatasetSource::Srsran,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedChunk {
    pub chunk_ref: ChunkRef,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub instruction: String,
    pub response: String,
    pub source: DatasetSource,
    pub retrieved_chunks: Vec<RetrievedChunk>,
    pub agent_model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedPair {
    pub instruction: String,
    pub source_chunk: ChunkRef,
    pub reason: String,
}

#[derive(Debug, thiserror::Error)]
pub enum AnswerError {
    #[error("question is {0:?}, only valid questions are answered")]
    NotValid(QuestionStatus),
    #[error("unknown source document for chunk {0}")]
    UnknownSource(ChunkRef),
    #[error("retrieved chunk {0} has no stored text")]
    MissingChunk(ChunkRef),
    #[error("embedding the question failed: {0}")]
    Embed(LlmError),
    #[error("retrieval failed: {0}")]
    Retrieval(#[from] IndexError),
    #[error("chat failed: {0}")]
    Chat(LlmError),
    #[error("empty completion")]
    EmptyCompletion,
}

/// Text and provenance lookup for every indexed chunk.
#[derive(Debug, Default, Clone)]
pub struct ChunkStore {
    texts: HashMap<ChunkRef, String>,
    sources: HashMap<String, SourceKind>,
}

impl ChunkStore {
    pub fn new(documents: &[Document], chunks: &[Chunk]) -> Self {
        let mut store = ChunkStore::default();
        for d in documents {
            store.sources.insert(d.id.clone(), d.source_kind);
        }
        for c in chunks {
            store.texts.insert(c.chunk_ref(), c.text.clone());
        }
        store
    }

    pub fn text(&self, r: &ChunkRef) -> Option<&str> {
        self.texts.get(r).map(String::as_str)
    }

    pub fn source(&self, r: &ChunkRef) -> Option<SourceKind> {
        let doc_id = r.as_str().split(':').next()?;
        self.sources.get(doc_id).copied()
    }
}

/// Retrieved chunks go first, each under a `[source: REF]` label, then the
/// question.
pub fn answer_prompt(question: &str, context: &[(&ChunkRef, &str)], templates: &PromptTemplates) -> String {
    let mut blocks = String::new();
    for (r, text) in context {
        blocks.push_str(&format!("{SOURCE_LABEL}{r}]\n{}\n\n", text.trim_end()));
    }
    render(&templates.answer_user, &[("context", blocks.trim_end()), ("question", question)])
}

pub struct AnswerContext<'a> {
    pub index: &'a VectorIndex,
    pub store: &'a ChunkStore,
    pub embedder: &'a LlmClient,
    pub chat: &'a LlmClient,
    pub templates: &'a PromptTemplates,
    pub k: usize,
}

pub fn generate_answer(question: &QuestionRecord, ctx: &AnswerContext<'_>) -> Result<QAPair, AnswerError> {
    if question.status != QuestionStatus::Valid {
        return Err(AnswerError::NotValid(question.status));
    }
    let source = ctx
        .store
        .source(&question.source_chunk)
        .ok_or_else(|| AnswerError::UnknownSource(question.source_chunk.clone()))?;
    let query = ctx.embedder.embed_one(&question.text).map_err(AnswerError::Embed)?;
    let hits = ctx.index.search_with(&query, ctx.k, Exec::Sequential)?;
    let mut context = Vec::with_capacity(hits.len());
    for h in &hits {
        let text = ctx.store.text(&h.chunk_ref).ok_or_else(|| AnswerError::MissingChunk(h.chunk_ref.clone()))?;
        context.push((&h.chunk_ref, text));
    }
    let user = answer_prompt(&question.text, &context, ctx.templates);
    let system = render(&ctx.templates.answer_system, &[]);
    let exchange =
        ctx.chat.chat(&ctx.chat.request(system, user, Purpose::AnswerGeneration)).map_err(AnswerError::Chat)?;
    let response = exchange.response_text.trim().to_string();
    if response.is_empty() {
        return Err(AnswerError::EmptyCompletion);
    }
    Ok(QAPair {
        instruction: question.text.clone(),
        response,
        source: source.into(),
        retrieved_chunks: hits.into_iter().map(|h| RetrievedChunk { chunk_ref: h.chunk_ref, score: h.score }).collect(),
        agent_model: ctx.chat.config().model_name.clone(),
    })
}

#[derive(Debug, Default)]
pub struct Answered {
    pub pairs: Vec<QAPair>,
    pub failed: Vec<FailedPair>,
}

/// Answers every question; output order follows question order.
pub fn answer_all(questions: &[QuestionRecord], ctx: &AnswerContext<'_>, exec: Exec) -> Answered {
    let results = exec::map(exec, questions, |q| generate_answer(q, ctx));
    let mut out = Answered::default();
    for (q, r) in questions.iter().zip(results) {
        match r {
            Ok(p) => out.pairs.push(p),
            Err(e) => {
                log::warn!("answer failed for question from {}: {e}", q.source_chunk);
                out.failed.push(FailedPair {
                    instruction: q.text.clone(),
                    source_chunk: q.source_chunk.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    out
}

/// One line of the emitted dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub instruction: String,
    pub response: String,
    pub source: DatasetSource,
    pub retrieved_chunks: Vec<RetrievedChunk>,
}

impl From<&QAPair> for DatasetRecord {
    fn from(p: &QAPair) -> Self {
        DatasetRecord {
            instruction: p.instruction.clone(),
            response: p.response.clone(),
            source: p.source,
            retrieved_chunks: p.retrieved_chunks.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceShare {
    pub count: u64,
    /// Share of all pairs in percent, rounded to 3 decimals.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub total_pairs: u64,
    pub per_source: BTreeMap<DatasetSource, SourceShare>,
    pub total_words: u64,
}

impl DatasetMetrics {
    pub fn from_counts(counts: &[(DatasetSource, u64)], total_words: u64) -> Self {
        let mut per: BTreeMap<DatasetSource, u64> = DatasetSource::ALL.iter().map(|s| (*s, 0)).collect();
        for (s, n) in counts {
            *per.entry(*s).or_default() += n;
        }
        let total: u64 = per.values().sum();
        let per_source = per
            .into_iter()
            .map(|(s, count)| (s, SourceShare { count, percent: round_dp(percent(count as f64, total as f64), 3) }))
            .collect();
        DatasetMetrics { total_pairs: total, per_source, total_words }
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a DatasetRecord>) -> Self {
        let mut counts = Vec::new();
        let mut words = 0u64;
        for r in records {
            counts.push((r.source, 1));
            words += (word_count(&r.instruction) + word_count(&r.response)) as u64;
        }
        DatasetMetrics::from_counts(&counts, words)
    }
}

/// Writes the dataset file and returns metrics over what was written.
pub fn build_dataset(pairs: &[QAPair], out: &Path) -> io::Result<DatasetMetrics> {
    let records: Vec<DatasetRecord> = pairs.iter().map(DatasetRecord::from).collect();
    write_jsonl(out, &records)?;
    Ok(DatasetMetrics::from_records(&records))
}

pub fn write_failed(path: &Path, failed: &[FailedPair]) -> io::Result<()> {
    write_jsonl(path, failed)
}

pub fn read_dataset(path: &Path) -> io::Result<Vec<DatasetRecord>> {
    read_jsonl(path)
}

pub fn metrics_from_file(path: &Path) -> io::Result<DatasetMetrics> {
    Ok(DatasetMetrics::from_records(&read_dataset(path)?))
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> io::Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(source: DatasetSource, instruction: &str) -> QAPair {
        QAPair {
            instruction: instruction.into(),
            response: "two words".into(),
            source,
            retrieved_chunks: vec![],
            agent_model: "m".into(),
        }
    }

    #[test]
    fn paper_scale_shares() {
        let m = DatasetMetrics::from_counts(&[(DatasetSource::Srsran, 88_766), (DatasetSource::Oran, 62_734)], 0);
        assert_eq!(m.total_pairs, 151_500);
        assert_eq!(m.per_source[&DatasetSource::Srsran].percent, 58.591);
        assert_eq!(m.per_source[&DatasetSource::Oran].percent, 41.409);
    }

    #[test]
    fn seven_three_split_and_word_totals() {
        let dir = tempfile::tempdir().unwrap();
        let mut pairs: Vec<QAPair> = (0..7).map(|_| pair(DatasetSource::Oran, "what is x?")).collect();
        pairs.extend((0..3).map(|_| pair(DatasetSource::Srsran, "explain y.")));
        let path = dir.path().join("d.jsonl");
        let m = build_dataset(&pairs, &path).unwrap();
        assert_eq!(m.per_source[&DatasetSource::Oran].percent, 70.0);
        assert_eq!(m.per_source[&DatasetSource::Srsran].percent, 30.0);
        assert_eq!(m.total_words, 7 * 5 + 3 * 4);
        assert_eq!(metrics_from_file(&path).unwrap(), m);
    }

    #[test]
    fn empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let m = build_dataset(&[], &path).unwrap();
        assert_eq!(m.total_pairs, 0);
        assert_eq!(m.total_words, 0);
        assert!(m.per_source.values().all(|s| s.count == 0 && s.percent == 0.0));
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
    }

    #[test]
    fn source_serializes_with_dataset_names() {
        assert_eq!(serde_json::to_string(&DatasetSource::Srsran).unwrap(), "\"srsran\"");
        let s: DatasetSource = serde_json::from_str("\"spec\"").unwrap();
        assert_eq!(s, DatasetSource::Oran);
    }

    #[test]
    fn prompt_places_context_before_question() {
        let r = ChunkRef("abc:rag:0".into());
        let p = answer_prompt("What is X?", &[(&r, "X is a thing.")], &PromptTemplates::default());
        let ctx = p.find("[source: abc:rag:0]").unwrap();
        let q = p.find("Question: What is X?").unwrap();
        assert!(ctx < q);
    }
}
