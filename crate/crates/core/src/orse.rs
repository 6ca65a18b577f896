//! Occlusion-sensitivity ranking: score chunks by the head's loss shift when
//! each is zeroed, then score sentences by the probe's loss shift when their
//! tokens are padded out, weighted by the chunk score.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chunker::{ChunkSet, SentenceAssignment};
use crate::corpus::{SentenceSpan, Task};
use crate::encoder::ChunkEncoder;
use crate::error::{Error, Result};
use crate::head::{predict, Head};
use crate::nn::Mat;
use crate::trainer::loss;

/// Smallest admissible shifted impact.
pub const EPSILON: f64 = 1e-6;

/// Loss of `o` against the fixed reference prediction `p`.
pub fn impact(o: &[f64], p: &[usize], task: Task) -> Result<f64> {
    Ok(loss(o, p, task)?.value)
}

/// Shift making every `delta + raw` at least `EPSILON`.
pub fn shift(raw: &[f64]) -> f64 {
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    if min < EPSILON {
        EPSILON - min
    } else {
        EPSILON
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkScore {
    pub chunk: usize,
    pub score: f64,
    /// Unshifted impact shift.
    pub raw: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub chunk: usize,
    pub sentence: usize,
    pub score: f64,
    pub raw: f64,
    pub weight: f64,
    pub delta: f64,
}

/// Stable descending sort by score; equal scores keep their input order.
fn sort_desc<T>(items: &mut [T], score: impl Fn(&T) -> f64) {
    items.sort_by(|a, b| score(b).total_cmp(&score(a)));
}

/// Reference prediction and chunk scores sorted by decreasing score.
pub fn rank_chunks(head: &Head, x: &Mat, structure: Option<&[i32]>) -> Result<(Vec<usize>, Vec<ChunkScore>)> {
    let task = head.config.task;
    let p = predict(&head.forward_doc(x, structure)?.o, task);
    let raw: Vec<f64> = (0..x.nrows())
        .into_par_iter()
        .map(|i| impact(&head.forward_masked(x, structure, i)?.o, &p, task))
        .collect::<Result<_>>()?;
    let delta = shift(&raw);
    let mut scores: Vec<ChunkScore> = raw
        .iter()
        .enumerate()
        .map(|(chunk, &r)| ChunkScore {
            chunk,
            score: r + delta,
            raw: r,
            delta,
        })
        .collect();
    sort_desc(&mut scores, |c| c.score);
    Ok((p, scores))
}

/// Sentence scores in ranked-chunk order, sentences in document order
/// within each chunk.
pub fn rank_sentences(
    encoder: &dyn ChunkEncoder,
    chunk_set: &ChunkSet,
    ranked: &[ChunkScore],
    assignments: &[SentenceAssignment],
    p: &[usize],
) -> Result<Vec<SentenceScore>> {
    if !encoder.supports_occlusion() {
        return Err(Error::Unsupported(format!(
            "{:?} backend cannot score occluded sentences",
            encoder.backend()
        )));
    }
    let task = encoder.task();
    // (chunk weight, sentence, raw shift) per sentence.
    let mut raw: Vec<(usize, f64, usize, f64)> = Vec::with_capacity(assignments.len());
    for cs in ranked {
        let chunk = chunk_set
            .chunks
            .get(cs.chunk)
            .ok_or_else(|| Error::validation(format!("ranked chunk {} out of range", cs.chunk)))?;
        let mine: Vec<&SentenceAssignment> = assignments.iter().filter(|a| a.chunk == cs.chunk).collect();
        if mine.is_empty() {
            continue;
        }
        let reference = impact(&encoder.classify_chunk(chunk)?.probs, p, task)?;
        let shifts: Vec<f64> = mine
            .par_iter()
            .map(|a| Ok(impact(&encoder.classify_chunk(&chunk.occluded(a.start..a.end))?.probs, p, task)? - reference))
            .collect::<Result<_>>()?;
        for (a, s) in mine.iter().zip(shifts) {
            raw.push((cs.chunk, cs.score, a.sentence, s));
        }
    }
    let delta = shift(&raw.iter().map(|r| r.3).collect::<Vec<_>>());
    Ok(raw
        .into_iter()
        .map(|(chunk, weight, sentence, r)| SentenceScore {
            chunk,
            sentence,
            score: weight * (r + delta),
            raw: r,
            weight,
            delta,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationEntry {
    pub chunk: usize,
    pub index: usize,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub doc_id: String,
    pub k: f64,
    pub sentences: Vec<ExplanationEntry>,
}

impl Explanation {
    pub fn text(&self) -> String {
        self.sentences.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" ")
    }
}

pub fn check_k(k: f64) -> Result<()> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::config(format!("k = {k} must lie in (0, 1]")));
    }
    Ok(())
}

/// `ceil(k * n)`, ignoring floating-point excess such as `0.3 * 10 = 3.0000000000000004`.
pub fn top_count(k: f64, n: usize) -> usize {
    let x = k * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Keeps the top `ceil(k * n_sentences)` scores and restores document order.
pub fn extract(
    doc_id: &str,
    text: &str,
    spans: &[SentenceSpan],
    scores: &[SentenceScore],
    k: f64,
) -> Result<Explanation> {
    check_k(k)?;
    let mut sorted = scores.to_vec();
    sort_desc(&mut sorted, |s| s.score);
    sorted.truncate(top_count(k, spans.len()).min(sorted.len()));
    sorted.sort_by_key(|s| (s.chunk, s.sentence));
    let sentences = sorted
        .into_iter()
        .map(|s| {
            let span = spans
                .iter()
                .find(|sp| sp.index == s.sentence)
                .ok_or_else(|| Error::validation(format!("sentence {} has no span", s.sentence)))?;
            Ok(ExplanationEntry {
                chunk: s.chunk,
                index: s.sentence,
                text: span.text(text).to_string(),
                score: s.score,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Explanation {
        doc_id: doc_id.to_string(),
        k,
        sentences,
    })
}

/// Everything needed to explain one document.
pub struct DocumentInput<'a> {
    pub doc_id: &'a str,
    pub text: &'a str,
    pub spans: &'a [SentenceSpan],
    pub chunk_set: &'a ChunkSet,
    pub assignments: &'a [SentenceAssignment],
    pub rows: &'a Mat,
    pub structure: Option<&'a [i32]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub prediction: Vec<usize>,
    pub chunks: Vec<ChunkScore>,
    pub sentences: Vec<SentenceScore>,
}

/// Full chunk-then-sentence ranking of one document.
pub fn rank_document(head: &Head, encoder: &dyn ChunkEncoder, doc: &DocumentInput) -> Result<Ranking> {
    if encoder.task() != head.config.task || encoder.num_labels() != head.config.num_labels {
        return Err(Error::config("encoder probe and head disagree on the label space"));
    }
    let (prediction, chunks) = rank_chunks(head, doc.rows, doc.structure)?;
    let sentences = rank_sentences(encoder, doc.chunk_set, &chunks, doc.assignments, &prediction)?;
    Ok(Ranking {
        prediction,
        chunks,
        sentences,
    })
}

/// Explanations for several `k` from one ranking.
pub fn explain_document(head: &Head, encoder: &dyn ChunkEncoder, doc: &DocumentInput, ks: &[f64]) -> Result<Vec<Explanation>> {
    for &k in ks {
        check_k(k)?;
    }
    let ranking = rank_document(head, encoder, doc)?;
    ks.iter()
        .map(|&k| extract(doc.doc_id, doc.text, doc.spans, &ranking.sentences, k))
        .collect()
}
