//! Recursive separator-hierarchy splitter.
//!
//! Each separator stays attached to the end of the piece it terminates, so
//! concatenating the emitted spans in order reproduces the source exactly.
//! Pieces are merged greedily up to the token budget; a piece still over
//! budget is split with the next separator, and once separators run out the
//! span is hard-cut at token boundaries.

use std::ops::Range;

use super::tokens::TokenCounter;
use super::{Chunk, ChunkKind, Document};

/// Paragraph break, line break, sentence end, single space.
pub const DEFAULT_SEPARATORS: [&str; 4] = ["\n\n", "\n", ". ", " "];

pub const DEFAULT_RAG_TOKENS: usize = 1024;
pub const DEFAULT_LTG_TOKENS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Span {
    pub range: Range<usize>,
    pub hard_cut: bool,
}

/// Splits `doc` into chunks of at most `max_tokens` tokens each.
///
/// Never fails: an empty `separators` list means every over-budget span is
/// hard-cut, and `max_tokens == 0` is treated as 1.
pub fn recursive_split(
    doc: &Document,
    kind: ChunkKind,
    max_tokens: usize,
    separators: &[&str],
    counter: &dyn TokenCounter,
) -> Vec<Chunk> {
    let max_tokens = max_tokens.max(1);
    let spans = split_spans(&doc.text, 0..doc.text.len(), separators, counter, max_tokens);
    spans
        .into_iter()
        .enumerate()
        .map(|(seq, span)| {
            let text = doc.text[span.range.clone()].to_string();
            Chunk {
                doc_id: doc.id.clone(),
                kind,
                seq,
                token_count: counter.count(&text),
                byte_range: span.range,
                hard_cut: span.hard_cut,
                text,
            }
        })
        .collect()
}

/// The single chunk used for corpora that are not split (code files).
pub fn whole_file_chunk(doc: &Document, counter: &dyn TokenCounter) -> Chunk {
    Chunk {
        doc_id: doc.id.clone(),
        kind: ChunkKind::WholeFile,
        seq: 0,
        text: doc.text.clone(),
        token_count: counter.count(&doc.text),
        byte_range: 0..doc.text.len(),
        hard_cut: false,
    }
}

pub(crate) fn split_spans(
    text: &str,
    range: Range<usize>,
    separators: &[&str],
    counter: &dyn TokenCounter,
    max_tokens: usize,
) -> Vec<Span> {
    if counter.count(&text[range.clone()]) <= max_tokens {
        return vec![Span { range, hard_cut: false }];
    }
    let Some((sep, rest)) = separators.split_first() else {
        return hard_cut(text, range, counter, max_tokens);
    };
    let pieces = pieces_at(text, range.clone(), sep);
    if pieces.len() < 2 {
        return split_spans(text, range, rest, counter, max_tokens);
    }

    let mut out = Vec::new();
    let mut current: Option<(Range<usize>, usize)> = None;
    for piece in pieces {
        let piece_tokens = counter.count(&text[piece.clone()]);
        if piece_tokens > max_tokens {
            if let Some((cur, _)) = current.take() {
                out.push(Span { range: cur, hard_cut: false });
            }
            out.extend(split_spans(text, piece, rest, counter, max_tokens));
            continue;
        }
        current = match current.take() {
            None => Some((piece, piece_tokens)),
            Some((cur, cur_tokens)) => {
                let merged = cur.start..piece.end;
                let merged_tokens = if counter.is_subadditive() && cur_tokens + piece_tokens <= max_tokens {
                    Some(cur_tokens + piece_tokens)
                } else {
                    let n = counter.count(&text[merged.clone()]);
                    (n <= max_tokens).then_some(n)
                };
                match merged_tokens {
                    Some(n) => Some((merged, n)),
                    None => {
                        out.push(Span { range: cur, hard_cut: false });
                        Some((piece, piece_tokens))
                    }
                }
            }
        };
    }
    if let Some((cur, _)) = current {
        out.push(Span { range: cur, hard_cut: false });
    }
    out
}

/// Splits `range` after each occurrence of `sep`, keeping the separator on
/// the left piece.
fn pieces_at(text: &str, range: Range<usize>, sep: &str) -> Vec<Range<usize>> {
    if sep.is_empty() {
        return vec![range];
    }
    let slice = &text[range.clone()];
    let mut pieces = Vec::new();
    let mut start = 0;
    for (idx, _) in slice.match_indices(sep) {
        let end = idx + sep.len();
        if end > start {
            pieces.push(range.start + start..range.start + end);
            start = end;
        }
    }
    if start < slice.len() {
        pieces.push(range.start + start..range.end);
    }
    pieces
}

fn hard_cut(text: &str, range: Range<usize>, counter: &dyn TokenCounter, max_tokens: usize) -> Vec<Span> {
    let spans = counter.token_spans(&text[range.clone()]);
    let mut out = Vec::new();
    let mut start = range.start;
    let mut i = max_tokens;
    while i < spans.len() {
        let cut = range.start + spans[i].start;
        out.push(Span { range: start..cut, hard_cut: true });
        start = cut;
        i += max_tokens;
    }
    out.push(Span { range: start..range.end, hard_cut: true });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokens::RegexTokenCounter;
    use crate::corpus::SourceKind;

    fn doc(text: &str) -> Document {
        Document::new(SourceKind::Spec, "t.txt", text.to_string())
    }

    fn reassemble(chunks: &[Chunk]) -> String {
        chunks.iter().map(|c| c.text.as_str()).collect()
    }

    #[test]
    fn short_document_is_one_chunk() {
        let d = doc("Short text. Still short.");
        let chunks = recursive_split(&d, ChunkKind::Rag, 1024, &DEFAULT_SEPARATORS, &RegexTokenCounter);
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, d.text);
        assert!(!chunks[0].hard_cut);
    }

    #[test]
    fn empty_document_yields_one_empty_chunk() {
        let d = doc("");
        let chunks = recursive_split(&d, ChunkKind::Rag, 8, &DEFAULT_SEPARATORS, &RegexTokenCounter);
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].token_count, 0);
    }

    #[test]
    fn prefers_paragraph_boundaries() {
        let d = doc("alpha beta gamma\n\ndelta epsilon zeta\n\neta theta iota");
        let chunks = recursive_split(&d, ChunkKind::Rag, 5, &DEFAULT_SEPARATORS, &RegexTokenCounter);
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[0].text, "alpha beta gamma\n\n");
        assert_eq!(reassemble(&chunks), d.text);
        assert!(chunks.iter().enumerate().all(|(i, c)| c.seq == i));
    }

    #[test]
    fn unsplittable_span_is_hard_cut_and_flagged() {
        let d = doc("a-b-c-d-e-f-g-h");
        let chunks = recursive_split(&d, ChunkKind::Rag, 4, &DEFAULT_SEPARATORS, &RegexTokenCounter);
        assert!(chunks.iter().all(|c| c.hard_cut));
        assert!(chunks.iter().all(|c| c.token_count <= 4));
        assert_eq!(reassemble(&chunks), d.text);
    }

    #[test]
    fn no_separators_means_hard_cut() {
        let d = doc("one two three four five");
        let chunks = recursive_split(&d, ChunkKind::Ltg, 2, &[], &RegexTokenCounter);
        assert_eq!(chunks.len(), 3);
        assert_eq!(reassemble(&chunks), d.text);
    }

    #[test]
    fn zero_budget_is_clamped() {
        let d = doc("x y");
        let chunks = recursive_split(&d, ChunkKind::Rag, 0, &DEFAULT_SEPARATORS, &RegexTokenCounter);
        assert_eq!(chunks.len(), 2);
    }

    #[test]
    fn whole_file_chunk_is_the_document() {
        let d = doc("int main() { return 0; }");
        let c = whole_file_chunk(&d, &RegexTokenCounter);
        assert_eq!(c.seq, 0);
        assert_eq!(c.text, d.text);
        assert_eq!(c.kind, ChunkKind::WholeFile);
    }
}
