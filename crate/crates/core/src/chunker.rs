//! Overlapping fixed-size token windows and the sentence-to-chunk map.

use serde::{Deserialize, Serialize};

use crate::corpus::SentenceSpan;
use crate::error::{Error, Result};
use crate::tokenizer::{Token, SPECIAL};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub doc_id: String,
    pub index: usize,
    /// Exactly `c` ids; positions `n_real..` hold the pad id.
    pub token_ids: Vec<u32>,
    /// Position of `token_ids[0]` in the document token stream.
    pub token_offset: usize,
    pub n_real: usize,
}

impl Chunk {
    pub fn real_tokens(&self) -> &[u32] {
        &self.token_ids[..self.n_real]
    }

    /// Copy of this chunk with the in-chunk token range replaced by the pad id.
    /// `n_real` is unchanged, so the occluded positions stay in the sequence.
    pub fn occluded(&self, range: std::ops::Range<usize>) -> Chunk {
        let mut out = self.clone();
        let end = range.end.min(self.n_real);
        for id in &mut out.token_ids[range.start.min(end)..end] {
            *id = SPECIAL.pad_id;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkSet {
    pub doc_id: String,
    pub chunk_size: usize,
    pub overlap: usize,
    pub chunks: Vec<Chunk>,
}

impl ChunkSet {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn stride(&self) -> usize {
        self.chunk_size - self.overlap
    }

    /// Real tokens with overlaps removed; equals the chunked token stream.
    pub fn deoverlapped(&self) -> Vec<u32> {
        let mut out = Vec::new();
        let mut covered = 0usize;
        for ch in &self.chunks {
            let skip = covered.saturating_sub(ch.token_offset).min(ch.n_real);
            out.extend_from_slice(&ch.real_tokens()[skip..]);
            covered = covered.max(ch.token_offset + ch.n_real);
        }
        out
    }
}

/// Number of windows for a stream of `len` tokens: 1 when it fits in one
/// window, otherwise `ceil(len / (c - o))`.
pub fn chunk_count(len: usize, c: usize, o: usize) -> usize {
    if len <= c {
        1
    } else {
        len.div_ceil(c - o)
    }
}

pub fn validate_window(c: usize, o: usize) -> Result<()> {
    if c < 2 {
        return Err(Error::config(format!("chunk_size must be at least 2, got {c}")));
    }
    if o >= c {
        return Err(Error::config(format!("chunk_overlap {o} must be smaller than chunk_size {c}")));
    }
    Ok(())
}

pub fn chunk_ids(doc_id: &str, ids: &[u32], c: usize, o: usize) -> Result<ChunkSet> {
    validate_window(c, o)?;
    if ids.is_empty() {
        return Err(Error::validation(format!("document {doc_id:?} has no tokens to chunk")));
    }
    let stride = c - o;
    let n = chunk_count(ids.len(), c, o);
    let chunks = (0..n)
        .map(|i| {
            let start = i * stride;
            let end = (start + c).min(ids.len());
            let mut token_ids = Vec::with_capacity(c);
            token_ids.extend_from_slice(&ids[start..end]);
            token_ids.resize(c, SPECIAL.pad_id);
            Chunk {
                doc_id: doc_id.to_string(),
                index: i,
                token_ids,
                token_offset: start,
                n_real: end - start,
            }
        })
        .collect();
    Ok(ChunkSet {
        doc_id: doc_id.to_string(),
        chunk_size: c,
        overlap: o,
        chunks,
    })
}

pub fn chunk(doc_id: &str, tokens: &[Token], c: usize, o: usize) -> Result<ChunkSet> {
    let ids: Vec<u32> = tokens.iter().map(|t| t.id).collect();
    chunk_ids(doc_id, &ids, c, o)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceAssignment {
    /// Document-level sentence index.
    pub sentence: usize,
    pub chunk: usize,
    /// In-chunk token range `[start, end)`.
    pub start: usize,
    pub end: usize,
}

/// Map every sentence with at least one token to the latest-starting chunk
/// that contains its first token; the range is clipped to that chunk.
pub fn assign_sentences(chunk_set: &ChunkSet, tokens: &[Token], spans: &[SentenceSpan]) -> Vec<SentenceAssignment> {
    let stride = chunk_set.stride();
    let last = chunk_set.len().saturating_sub(1);
    let mut out = Vec::with_capacity(spans.len());
    let mut t = 0;
    for span in spans {
        while t < tokens.len() && tokens[t].char_start < span.char_start {
            t += 1;
        }
        let first = t;
        while t < tokens.len() && tokens[t].char_end <= span.char_end {
            t += 1;
        }
        if first == t {
            log::warn!("{}: sentence {} has no tokens, skipped", chunk_set.doc_id, span.index);
            continue;
        }
        let ci = (first / stride).min(last);
        let ch = &chunk_set.chunks[ci];
        let start = first - ch.token_offset;
        let end = (t - ch.token_offset).min(ch.n_real);
        out.push(SentenceAssignment {
            sentence: span.index,
            chunk: ci,
            start,
            end,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::split_sentences;
    use crate::tokenizer::tokenize;

    fn ids(n: usize) -> Vec<u32> {
        (0..n as u32).map(|i| 8 + i).collect()
    }

    /// Windows by enumeration: slide a c-wide window by c-o until the
    /// stream's last token has been emitted by the formula's count.
    fn brute_windows(len: usize, c: usize, o: usize) -> Vec<(usize, usize)> {
        let n = if len <= c { 1 } else { len.div_ceil(c - o) };
        let mut out = Vec::new();
        let mut start = 0;
        while out.len() < n {
            out.push((start, (start + c).min(len)));
            start += c - o;
        }
        out
    }

    #[test]
    fn formula_examples() {
        assert_eq!(chunk_ids("d", &ids(1000), 512, 90).unwrap().len(), 3);
        let one = chunk_ids("d", &ids(422), 512, 90).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.chunks[0].n_real, 422);
        assert_eq!(one.chunks[0].token_ids.len(), 512);
        assert!(one.chunks[0].token_ids[422..].iter().all(|&t| t == SPECIAL.pad_id));
    }

    #[test]
    fn overlap_region_matches_enumeration() {
        // 845 / 422 is just above 2, so the formula yields a third, one-token window.
        let stream = ids(845);
        let set = chunk_ids("d", &stream, 512, 90).unwrap();
        assert_eq!(brute_windows(845, 512, 90), vec![(0, 512), (422, 845), (844, 845)]);
        assert_eq!(set.len(), 3);
        assert_eq!(set.chunks[2].n_real, 1);
        assert_eq!(chunk_ids("d", &ids(844), 512, 90).unwrap().len(), 2);
        assert_eq!(set.chunks[1].token_offset, 422);
        for pos in 422..512 {
            assert_eq!(set.chunks[0].token_ids[pos], stream[pos]);
            assert_eq!(set.chunks[1].token_ids[pos - 422], stream[pos]);
        }
        assert_eq!(set.deoverlapped(), stream);
    }

    #[test]
    fn config_errors() {
        assert!(matches!(chunk_ids("d", &ids(5), 4, 4), Err(Error::Config(_))));
        assert!(matches!(chunk_ids("d", &ids(5), 1, 0), Err(Error::Config(_))));
        assert!(chunk_ids("d", &[], 4, 1).is_err());
    }

    #[test]
    fn sentence_after_overlap_start_goes_to_next_chunk() {
        // 430 one-token words, then a sentence starting at token 430.
        let mut text = String::new();
        for _ in 0..428 {
            text.push_str("w ");
        }
        text.push_str("w. Next");
        for _ in 0..200 {
            text.push_str(" v");
        }
        text.push('.');
        let toks = tokenize(&text, 32_768);
        let spans = split_sentences(&text);
        assert_eq!(spans.len(), 2);
        let set = chunk("d", &toks, 512, 90).unwrap();
        let map = assign_sentences(&set, &toks, &spans);
        assert_eq!(map[0].chunk, 0);
        assert_eq!((map[0].start, map[0].end), (0, 430));
        assert_eq!(map[1].chunk, 1);
        assert_eq!(map[1].start, 430 - 422);
        assert_eq!(map[1].end, set.chunks[1].n_real);
    }

    #[test]
    fn single_sentence_covers_chunk() {
        let text = "only one sentence in this document";
        let toks = tokenize(text, 32_768);
        let set = chunk("d", &toks, 16, 4).unwrap();
        let map = assign_sentences(&set, &toks, &split_sentences(text));
        assert_eq!(map, vec![SentenceAssignment { sentence: 0, chunk: 0, start: 0, end: 6 }]);
    }

    #[test]
    fn occlusion_keeps_length() {
        let set = chunk_ids("d", &ids(10), 16, 4).unwrap();
        let occ = set.chunks[0].occluded(2..5);
        assert_eq!(occ.n_real, 10);
        assert_eq!(&occ.token_ids[2..5], &[SPECIAL.pad_id; 3]);
        assert_eq!(occ.token_ids[5], set.chunks[0].token_ids[5]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn chunking_law(len in 1usize..3000, c in 2usize..600, o_frac in 0.0f64..1.0) {
                let o = ((c as f64) * o_frac) as usize % c;
                let stream = ids(len);
                let set = chunk_ids("d", &stream, c, o).unwrap();
                let expected = if len <= c { 1 } else { (len + c - o - 1) / (c - o) };
                prop_assert_eq!(set.len(), expected);
                prop_assert_eq!(set.deoverlapped(), stream);
                for pair in set.chunks.windows(2) {
                    let prev_end = pair[0].token_offset + pair[0].n_real;
                    // Full windows overlap their successor by exactly o tokens.
                    if pair[0].n_real == c {
                        prop_assert_eq!(prev_end - pair[1].token_offset, o);
                    }
                }
            }
        }
    }
}
