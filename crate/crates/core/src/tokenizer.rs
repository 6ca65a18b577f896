//! Word-boundary tokenization with hashed vocabulary ids.
//!
//! Alphanumeric runs form one token each; every other non-whitespace
//! character is a token of its own. Surface forms are mapped into
//! `[RESERVED_IDS, vocab_size)` with 64-bit FNV-1a, so the embedding table has a
//! fixed size while the vocabulary stays open. Two distinct surface forms
//! collide with probability about `1 / (vocab_size - 8)`.

use serde::{Deserialize, Serialize};

/// Ids below this value are never produced by text tokenization.
pub const RESERVED_IDS: u32 = 8;

/// Smallest accepted vocabulary: 256 hashed buckets plus the reserved block.
pub const MIN_VOCAB_SIZE: u32 = 256 + RESERVED_IDS;

pub const DEFAULT_VOCAB_SIZE: u32 = 32_768;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad_id: u32,
    pub cls_id: u32,
    pub sep_id: u32,
    pub mask_id: u32,
}

impl Default for SpecialIds {
    fn default() -> Self {
        SPECIAL
    }
}

pub const SPECIAL: SpecialIds = SpecialIds {
    pad_id: 0,
    cls_id: 1,
    sep_id: 2,
    mask_id: 3,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    /// Byte offsets into the source text.
    pub char_start: usize,
    pub char_end: usize,
}

/// 64-bit FNV-1a.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

pub fn hash_id(surface: &str, vocab_size: u32) -> u32 {
    assert!(vocab_size >= MIN_VOCAB_SIZE, "vocab_size below {MIN_VOCAB_SIZE}");
    let buckets = u64::from(vocab_size - RESERVED_IDS);
    RESERVED_IDS + (stable_hash(surface.as_bytes()) % buckets) as u32
}

/// Byte spans of the word-boundary tokens of `text`, in order.
pub fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut run_start: Option<usize> = None;
    for (pos, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            if run_start.is_none() {
                run_start = Some(pos);
            }
            continue;
        }
        if let Some(start) = run_start.take() {
            spans.push((start, pos));
        }
        if !ch.is_whitespace() {
            spans.push((pos, pos + ch.len_utf8()));
        }
    }
    if let Some(start) = run_start {
        spans.push((start, text.len()));
    }
    spans
}

/// Word-boundary tokens of `text`, lowercased. Used by the overlap metrics.
pub fn words_lowercase(text: &str) -> Vec<String> {
    word_spans(text)
        .into_iter()
        .map(|(s, e)| text[s..e].to_lowercase())
        .collect()
}

pub fn tokenize(text: &str, vocab_size: u32) -> Vec<Token> {
    word_spans(text)
        .into_iter()
        .map(|(s, e)| Token {
            id: hash_id(&text[s..e], vocab_size),
            char_start: s,
            char_end: e,
        })
        .collect()
}

pub fn token_count(text: &str) -> usize {
    word_spans(text).len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeated_word_shares_id() {
        let toks = tokenize("a a a", DEFAULT_VOCAB_SIZE);
        assert_eq!(toks.len(), 3);
        assert!(toks.iter().all(|t| t.id == toks[0].id));
        assert_eq!(toks[1].char_start, 2);
    }

    #[test]
    fn empty_text_has_no_tokens() {
        assert!(tokenize("", DEFAULT_VOCAB_SIZE).is_empty());
        assert!(tokenize("  \n\t", DEFAULT_VOCAB_SIZE).is_empty());
    }

    #[test]
    fn case_sensitive_ids() {
        let toks = tokenize("court Court", DEFAULT_VOCAB_SIZE);
        assert_eq!(toks.len(), 2);
        assert_ne!(toks[0].id, toks[1].id);
        assert_ne!(stable_hash(b"court"), stable_hash(b"Court"));
    }

    #[test]
    fn punctuation_is_split() {
        let text = "Sec. 302, IPC!";
        let surfaces: Vec<&str> = word_spans(text).iter().map(|&(s, e)| &text[s..e]).collect();
        assert_eq!(surfaces, ["Sec", ".", "302", ",", "IPC", "!"]);
    }

    #[test]
    fn ids_avoid_reserved_block() {
        for t in tokenize("the quick brown fox . , ; ü ß 42", MIN_VOCAB_SIZE) {
            assert!(t.id >= RESERVED_IDS && t.id < MIN_VOCAB_SIZE);
        }
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(stable_hash(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(stable_hash(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn unicode_offsets_are_char_boundaries() {
        let text = "Ärger über Öl.";
        for (s, e) in word_spans(text) {
            assert!(text.is_char_boundary(s) && text.is_char_boundary(e));
        }
        assert_eq!(token_count(text), 4);
    }
}
