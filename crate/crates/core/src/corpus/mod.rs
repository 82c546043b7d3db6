//! Corpus ingestion, token counting and chunking.

mod split;
mod tokens;

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use globset::{Glob, GlobSet, GlobSetBuilder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

pub use split::{recursive_split, whole_file_chunk, DEFAULT_LTG_TOKENS, DEFAULT_RAG_TOKENS, DEFAULT_SEPARATORS};
pub use tokens::{word_count, RegexTokenCounter, TokenCounter};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("corpus root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("invalid include pattern {pattern:?}: {message}")]
    BadGlob { pattern: String, message: String },
}

/// Where a document came from. Serialized with the spec/code names; the
/// dataset-level aliases `oran`/`srsran` are accepted on input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    #[serde(alias = "oran")]
    Spec,
    #[serde(alias = "srsran")]
    Code,
}

impl SourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::Spec => "spec",
            SourceKind::Code => "code",
        }
    }

    /// File patterns matched when no explicit include list is given.
    pub fn default_globs(self) -> Vec<String> {
        let pats: &[&str] = match self {
            SourceKind::Spec => &["**/*.txt", "**/*.md"],
            SourceKind::Code => {
                &["**/*.cpp", "**/*.cc", "**/*.cxx", "**/*.c", "**/*.h", "**/*.hpp", "**/*.hh", "**/*.hxx"]
            }
        };
        pats.iter().map(|s| s.to_string()).collect()
    }
}

impl FromStr for SourceKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "spec" | "oran" => Ok(SourceKind::Spec),
            "code" | "srsran" => Ok(SourceKind::Code),
            other => Err(format!("unknown source kind {other:?} (expected spec or code)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub source_kind: SourceKind,
    /// Path relative to the corpus root, `/`-separated.
    pub path: String,
    pub text: String,
    pub word_count: usize,
}

impl Document {
    pub fn new(source_kind: SourceKind, path: impl Into<String>, text: String) -> Self {
        let path = path.into();
        Document { id: document_id(source_kind, &path), source_kind, word_count: word_count(&text), path, text }
    }
}

/// Stable id: first 16 hex digits of sha256("<kind>:<path>").
pub fn document_id(kind: SourceKind, path: &str) -> String {
    let digest = Sha256::digest(format!("{}:{}", kind.as_str(), path).as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkKind {
    Rag,
    Ltg,
    WholeFile,
}

impl ChunkKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ChunkKind::Rag => "rag",
            ChunkKind::Ltg => "ltg",
            ChunkKind::WholeFile => "whole_file",
        }
    }
}

impl FromStr for ChunkKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rag" => Ok(ChunkKind::Rag),
            "ltg" => Ok(ChunkKind::Ltg),
            "whole_file" => Ok(ChunkKind::WholeFile),
            other => Err(format!("unknown chunk kind {other:?}")),
        }
    }
}

/// Reference to a chunk: `<doc_id>:<kind>:<seq>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChunkRef(pub String);

impl ChunkRef {
    pub fn new(doc_id: &str, kind: ChunkKind, seq: usize) -> Self {
        ChunkRef(format!("{doc_id}:{}:{seq}", kind.as_str()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ChunkRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub doc_id: String,
    pub kind: ChunkKind,
    pub seq: usize,
    pub text: String,
    pub token_count: usize,
    /// Byte span of `text` within the source document.
    pub byte_range: Range<usize>,
    /// Set when the span had to be cut at a token boundary because no
    /// separator could bring it under budget.
    pub hard_cut: bool,
}

impl Chunk {
    pub fn chunk_ref(&self) -> ChunkRef {
        ChunkRef::new(&self.doc_id, self.kind, self.seq)
    }

    pub fn manifest_record(&self) -> ChunkRecord {
        ChunkRecord {
            doc_id: self.doc_id.clone(),
            kind: self.kind,
            seq: self.seq,
            token_count: self.token_count,
            byte_range: [self.byte_range.start, self.byte_range.end],
            hard_cut: self.hard_cut,
        }
    }
}

/// One line of the chunk manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub doc_id: String,
    pub kind: ChunkKind,
    pub seq: usize,
    pub token_count: usize,
    pub byte_range: [usize; 2],
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub hard_cut: bool,
}

impl ChunkRecord {
    /// Rebuilds the chunk by slicing its document. Returns `None` when the
    /// range does not fit the document text.
    pub fn resolve(&self, doc: &Document) -> Option<Chunk> {
        let [start, end] = self.byte_range;
        let text = doc.text.get(start..end)?.to_string();
        Some(Chunk {
            doc_id: self.doc_id.clone(),
            kind: self.kind,
            seq: self.seq,
            text,
            token_count: self.token_count,
            byte_range: start..end,
            hard_cut: self.hard_cut,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileError {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct Ingested {
    pub documents: Vec<Document>,
    /// Files that matched but could not be read; ingestion continues past them.
    pub errors: Vec<FileError>,
}

/// Reads every file under `root` that matches one of `include_globs`
/// (matched against the root-relative path). Empty globs select the
/// defaults for `source_kind`. Output is sorted by path.
pub fn ingest_corpus(root: &Path, source_kind: SourceKind, include_globs: &[String]) -> Result<Ingested, CorpusError> {
    if !root.is_dir() {
        return Err(CorpusError::MissingRoot(root.to_path_buf()));
    }
    let globs = if include_globs.is_empty() { source_kind.default_globs() } else { include_globs.to_vec() };
    let matcher = build_globset(&globs)?;

    let mut paths: Vec<(String, PathBuf)> = Vec::new();
    let mut out = Ingested::default();
    for entry in WalkDir::new(root).follow_links(true) {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                let path = e.path().map(|p| p.display().to_string()).unwrap_or_default();
                out.errors.push(FileError { path, message: e.to_string() });
                continue;
            }
        };
        if !entry.file_type().is_file() {
            continue;
        }
        let Ok(rel) = entry.path().strip_prefix(root) else { continue };
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        if matcher.is_match(&rel) {
            paths.push((rel, entry.path().to_path_buf()));
        }
    }
    paths.sort();

    for (rel, full) in paths {
        match fs::read(&full) {
            Ok(bytes) => match String::from_utf8(bytes) {
                Ok(text) => out.documents.push(Document::new(source_kind, rel, text)),
                Err(e) => out.errors.push(FileError { path: rel, message: format!("not valid UTF-8: {e}") }),
            },
            Err(e) => out.errors.push(FileError { path: rel, message: e.to_string() }),
        }
    }
    Ok(out)
}

fn build_globset(patterns: &[String]) -> Result<GlobSet, CorpusError> {
    let mut builder = GlobSetBuilder::new();
    for p in patterns {
        let glob = Glob::new(p).map_err(|e| CorpusError::BadGlob { pattern: p.clone(), message: e.to_string() })?;
        builder.add(glob);
        // `**/*.ext` should also match files directly under the root.
        if let Some(rest) = p.strip_prefix("**/") {
            if let Ok(g) = Glob::new(rest) {
                builder.add(g);
            }
        }
    }
    builder.build().map_err(|e| CorpusError::BadGlob { pattern: patterns.join(","), message: e.to_string() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub doc_count: usize,
    pub total_words: usize,
    pub avg_words: f64,
}

pub fn corpus_stats(docs: &[Document]) -> CorpusStats {
    let total_words: usize = docs.iter().map(|d| d.word_count).sum();
    let avg_words = if docs.is_empty() { 0.0 } else { total_words as f64 / docs.len() as f64 };
    CorpusStats { doc_count: docs.len(), total_words, avg_words }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_root_is_fatal() {
        let err = ingest_corpus(Path::new("/definitely/not/here"), SourceKind::Spec, &[]).unwrap_err();
        assert!(matches!(err, CorpusError::MissingRoot(_)));
    }

    #[test]
    fn empty_directory_gives_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let got = ingest_corpus(dir.path(), SourceKind::Spec, &[]).unwrap();
        assert!(got.documents.is_empty());
        assert!(got.errors.is_empty());
    }

    #[test]
    fn ids_are_deterministic_and_kind_scoped() {
        assert_eq!(document_id(SourceKind::Spec, "a/b.txt"), document_id(SourceKind::Spec, "a/b.txt"));
        assert_ne!(document_id(SourceKind::Spec, "a/b.txt"), document_id(SourceKind::Code, "a/b.txt"));
        assert_eq!(document_id(SourceKind::Spec, "x").len(), 16);
    }

    #[test]
    fn code_globs_skip_other_files_and_invalid_utf8_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("lib/sub")).unwrap();
        fs::write(dir.path().join("main.cpp"), "int main() {}").unwrap();
        fs::write(dir.path().join("lib/sub/a.h"), "#pragma once").unwrap();
        fs::write(dir.path().join("README.md"), "docs").unwrap();
        fs::write(dir.path().join("lib/bad.cc"), [0xff, 0xfe, 0x00]).unwrap();
        let got = ingest_corpus(dir.path(), SourceKind::Code, &[]).unwrap();
        let paths: Vec<&str> = got.documents.iter().map(|d| d.path.as_str()).collect();
        assert_eq!(paths, ["lib/sub/a.h", "main.cpp"]);
        assert_eq!(got.errors.len(), 1);
        assert_eq!(got.errors[0].path, "lib/bad.cc");
    }

    #[test]
    fn stats_of_empty_and_small_corpora() {
        assert_eq!(corpus_stats(&[]), CorpusStats { doc_count: 0, total_words: 0, avg_words: 0.0 });
        let docs: Vec<Document> = [10usize, 20, 30]
            .iter()
            .enumerate()
            .map(|(i, n)| Document::new(SourceKind::Spec, format!("{i}.txt"), vec!["w"; *n].join(" ")))
            .collect();
        assert_eq!(corpus_stats(&docs), CorpusStats { doc_count: 3, total_words: 60, avg_words: 20.0 });
    }

    #[test]
    fn chunk_record_resolves_against_its_document() {
        let d = Document::new(SourceKind::Spec, "d.txt", "first part. second part.".into());
        let chunks = recursive_split(&d, ChunkKind::Rag, 3, &DEFAULT_SEPARATORS, &RegexTokenCounter);
        for c in &chunks {
            assert_eq!(c.manifest_record().resolve(&d).as_ref(), Some(c));
        }
        let bad = ChunkRecord { byte_range: [0, 999], ..chunks[0].manifest_record() };
        assert!(bad.resolve(&d).is_none());
    }
}
