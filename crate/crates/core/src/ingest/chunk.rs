use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{Document, IngestError, SourceRef};
use crate::embed::Tokenizer;

/// Sliding-window parameters, in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub chunk_tokens: usize,
    pub overlap_tokens: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            chunk_tokens: 256,
            overlap_tokens: 32,
        }
    }
}

impl ChunkConfig {
    pub fn new(chunk_tokens: usize, overlap_tokens: usize) -> Result<Self, IngestError> {
        if chunk_tokens == 0 || overlap_tokens >= chunk_tokens {
            return Err(IngestError::InvalidArgument(format!(
                "need chunk_tokens >= 1 and overlap < chunk_tokens (got {chunk_tokens}/{overlap_tokens})"
            )));
        }
        Ok(Self {
            chunk_tokens,
            overlap_tokens,
        })
    }

    pub fn stride(&self) -> usize {
        self.chunk_tokens - self.overlap_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_source: SourceRef,
    pub seq: usize,
    pub text: String,
    pub token_count: usize,
    /// Byte range of `text` inside the document text.
    pub span: Range<usize>,
    /// Token indices covered by this chunk.
    pub tokens: Range<usize>,
}

/// Splits a document into overlapping token windows.
///
/// A window covering tokens `[a, b)` spans the bytes from the start of token
/// `a` up to the start of token `b`; the first window starts at byte 0 and the
/// last runs to the end of the text, so the windows tile the whole document.
pub fn chunk_document(
    doc: &Document,
    tokenizer: &dyn Tokenizer,
    config: ChunkConfig,
) -> Vec<Chunk> {
    let spans = tokenizer.spans(&doc.text);
    let n = spans.len();
    let byte_at = |token: usize, is_start: bool| -> usize {
        if is_start && token == 0 {
            0
        } else if token >= n {
            doc.text.len()
        } else {
            spans[token].start
        }
    };

    let mut chunks = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + config.chunk_tokens).min(n);
        let span = byte_at(start, true)..byte_at(end, false);
        chunks.push(Chunk {
            doc_source: doc.source.clone(),
            seq: chunks.len(),
            text: doc.text[span.clone()].to_string(),
            token_count: end - start,
            span,
            tokens: start..end,
        });
        if end == n {
            break;
        }
        start += config.stride();
    }
    chunks
}

/// Reassembles a document's text from its chunks, dropping the overlaps.
pub fn reconstruct(chunks: &[Chunk]) -> String {
    let mut out = String::new();
    let mut covered = 0usize;
    for chunk in chunks {
        let skip = covered.saturating_sub(chunk.span.start);
        out.push_str(&chunk.text[skip.min(chunk.text.len())..]);
        covered = covered.max(chunk.span.end);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::WordTokenizer;
    use proptest::prelude::*;

    fn doc(text: &str) -> Document {
        Document::new(SourceRef::store_record("t", None), text.to_string()).unwrap()
    }

    fn words(n: usize) -> String {
        (0..n)
            .map(|i| format!("w{i}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn ten_tokens_four_wide_overlap_one() {
        let chunks = chunk_document(
            &doc(&words(10)),
            &WordTokenizer,
            ChunkConfig::new(4, 1).unwrap(),
        );
        let spans: Vec<_> = chunks.iter().map(|c| c.tokens.clone()).collect();
        assert_eq!(spans, [0..4, 3..7, 6..10]);
        assert_eq!(chunks[1].text, "w3 w4 w5 w6 ");
    }

    #[test]
    fn short_document_single_chunk() {
        let chunks = chunk_document(
            &doc("Fed holds rates"),
            &WordTokenizer,
            ChunkConfig::default(),
        );
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].token_count, 3);
        assert_eq!(chunks[0].text, "Fed holds rates");
    }

    #[test]
    fn exact_tiling() {
        let chunks = chunk_document(
            &doc(&words(8)),
            &WordTokenizer,
            ChunkConfig::new(4, 0).unwrap(),
        );
        assert_eq!(chunks.len(), 2);
        assert!(chunks.iter().all(|c| c.token_count == 4));
    }

    #[test]
    fn invalid_windows_rejected() {
        assert!(ChunkConfig::new(0, 0).is_err());
        assert!(ChunkConfig::new(4, 4).is_err());
    }

    proptest! {
        #[test]
        fn windows_cover_and_reconstruct(
            text in "[ -~\\n]{1,300}",
            chunk in 1usize..12,
            overlap_frac in 0.0f64..1.0,
        ) {
            prop_assume!(!text.trim().is_empty());
            let overlap = ((chunk as f64) * overlap_frac) as usize;
            let overlap = overlap.min(chunk - 1);
            let d = doc(&text);
            let chunks = chunk_document(&d, &WordTokenizer, ChunkConfig::new(chunk, overlap).unwrap());
            let n = WordTokenizer.count(&text);
            let mut covered = vec![false; n];
            for (i, c) in chunks.iter().enumerate() {
                prop_assert_eq!(c.seq, i);
                prop_assert!(c.token_count >= 1);
                prop_assert_eq!(c.token_count, WordTokenizer.count(&c.text));
                for t in c.tokens.clone() { covered[t] = true; }
            }
            prop_assert!(covered.iter().all(|c| *c));
            if n > 0 {
                prop_assert_eq!(reconstruct(&chunks), text);
            }
        }
    }
}
