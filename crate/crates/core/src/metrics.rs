//! Classification metrics, explanation-overlap metrics and the
//! per-annotator evaluation grid.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::ExpertExplanation;
use crate::error::{Error, Result};
use crate::tokenizer::words_lowercase;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub label: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClsReport {
    /// Exact-match accuracy for multi-label tasks.
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn f1(tp: f64, fp: f64, fn_: f64) -> f64 {
    ratio(2.0 * tp, 2.0 * tp + fp + fn_)
}

/// Macro-F1 averages all `num_labels` classes; empty classes score 0.
pub fn classification_report(preds: &[Vec<usize>], golds: &[Vec<usize>], num_labels: usize) -> Result<ClsReport> {
    if preds.len() != golds.len() {
        return Err(Error::validation(format!(
            "{} predictions for {} gold label sets",
            preds.len(),
            golds.len()
        )));
    }
    let mut tp = vec![0usize; num_labels];
    let mut fp = vec![0usize; num_labels];
    let mut fn_ = vec![0usize; num_labels];
    let mut exact = 0;
    for (p, g) in preds.iter().zip(golds) {
        let ps: HashSet<usize> = p.iter().copied().collect();
        let gs: HashSet<usize> = g.iter().copied().collect();
        if let Some(&bad) = ps.iter().chain(&gs).find(|&&l| l >= num_labels) {
            return Err(Error::validation(format!("label {bad} outside 0..{num_labels}")));
        }
        if ps == gs {
            exact += 1;
        }
        for l in 0..num_labels {
            match (ps.contains(&l), gs.contains(&l)) {
                (true, true) => tp[l] += 1,
                (true, false) => fp[l] += 1,
                (false, true) => fn_[l] += 1,
                (false, false) => {}
            }
        }
    }
    let per_class: Vec<ClassScores> = (0..num_labels)
        .map(|l| {
            let (t, p, n) = (tp[l] as f64, fp[l] as f64, fn_[l] as f64);
            ClassScores {
                label: l,
                precision: ratio(t, t + p),
                recall: ratio(t, t + n),
                f1: f1(t, p, n),
                support: tp[l] + fn_[l],
            }
        })
        .collect();
    let sum = |v: &[usize]| v.iter().sum::<usize>() as f64;
    Ok(ClsReport {
        accuracy: ratio(exact as f64, preds.len() as f64),
        micro_f1: f1(sum(&tp), sum(&fp), sum(&fn_)),
        macro_f1: ratio(per_class.iter().map(|c| c.f1).sum(), num_labels as f64),
        per_class,
    })
}

/// Adjusted Rand index between two labelings (noise is an ordinary label).
pub fn adjusted_rand_index(a: &[i32], b: &[i32]) -> f64 {
    let n = a.len();
    let comb2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut table: HashMap<(i32, i32), usize> = HashMap::new();
    let mut rows: HashMap<i32, usize> = HashMap::new();
    let mut cols: HashMap<i32, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&v| comb2(v)).sum();
    let sa: f64 = rows.values().map(|&v| comb2(v)).sum();
    let sb: f64 = cols.values().map(|&v| comb2(v)).sum();
    let expected = sa * sb / comb2(n).max(1.0);
    let max = (sa + sb) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w).or_insert(0) += 1;
    }
    out
}

fn clipped_overlap(h: &HashMap<&[String], usize>, r: &HashMap<&[String], usize>) -> usize {
    h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf(overlap: f64, hyp_total: f64, ref_total: f64) -> Prf {
    let precision = ratio(overlap, hyp_total);
    let recall = ratio(overlap, ref_total);
    Prf {
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
    }
}

/// ROUGE-N precision, recall and F1 over lowercase word tokens.
pub fn rouge_n_scores(hyp: &str, reference: &str, n: usize) -> Prf {
    let (h, r) = (words_lowercase(hyp), words_lowercase(reference));
    let (hg, rg) = (ngrams(&h, n), ngrams(&r, n));
    let total = |g: &HashMap<&[String], usize>| g.values().sum::<usize>() as f64;
    prf(clipped_overlap(&hg, &rg) as f64, total(&hg), total(&rg))
}

pub fn rouge_n(hyp: &str, reference: &str, n: usize) -> f64 {
    rouge_n_scores(hyp, reference, n).f1
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l(hyp: &str, reference: &str) -> f64 {
    let (h, r) = (words_lowercase(hyp), words_lowercase(reference));
    prf(lcs_len(&h, &r) as f64, h.len() as f64, r.len() as f64).f1
}

/// Jaccard similarity of the unique lowercase token sets.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let sa: HashSet<String> = words_lowercase(a).into_iter().collect();
    let sb: HashSet<String> = words_lowercase(b).into_iter().collect();
    let inter = sa.intersection(&sb).count() as f64;
    ratio(inter, (sa.len() + sb.len()) as f64 - inter)
}

pub const BLEU_SMOOTHING: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default)]
struct BleuStats {
    matches: [f64; 4],
    totals: [f64; 4],
    hyp_len: usize,
    ref_len: usize,
}

fn bleu_stats(hyp: &[String], reference: &[String]) -> BleuStats {
    let mut s = BleuStats {
        hyp_len: hyp.len(),
        ref_len: reference.len(),
        ..BleuStats::default()
    };
    for n in 1..=4 {
        let (h, r) = (ngrams(hyp, n), ngrams(reference, n));
        s.matches[n - 1] = clipped_overlap(&h, &r) as f64;
        s.totals[n - 1] = h.values().sum::<usize>() as f64;
    }
    s
}

fn bleu_from(s: &BleuStats) -> f64 {
    if s.hyp_len == 0 || s.matches[0] == 0.0 {
        return 0.0;
    }
    // Orders with no hypothesis n-grams at all are left out.
    let order = s.totals.iter().take_while(|&&t| t > 0.0).count();
    let log_p: f64 = (0..order)
        .map(|i| {
            let m = if s.matches[i] == 0.0 { BLEU_SMOOTHING } else { s.matches[i] };
            (m / s.totals[i]).ln()
        })
        .sum::<f64>()
        / order as f64;
    let bp = if s.hyp_len > s.ref_len {
        1.0
    } else {
        (1.0 - s.ref_len as f64 / s.hyp_len as f64).exp()
    };
    bp * log_p.exp()
}

/// BLEU with uniform weights up to `min(4, hyp length)`, brevity penalty
/// and add-epsilon smoothing of empty higher-order matches.
pub fn bleu(hyp: &str, reference: &str) -> f64 {
    bleu_from(&bleu_stats(&words_lowercase(hyp), &words_lowercase(reference)))
}

/// Corpus BLEU: n-gram statistics pooled over all pairs.
pub fn corpus_bleu(pairs: &[(&str, &str)]) -> f64 {
    let mut total = BleuStats::default();
    for (h, r) in pairs {
        let s = bleu_stats(&words_lowercase(h), &words_lowercase(r));
        for i in 0..4 {
            total.matches[i] += s.matches[i];
            total.totals[i] += s.totals[i];
        }
        total.hyp_len += s.hyp_len;
        total.ref_len += s.ref_len;
    }
    bleu_from(&total)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OverlapScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bleu: f64,
    pub jaccard: f64,
}

impl OverlapScores {
    pub fn compute(hyp: &str, reference: &str) -> Self {
        OverlapScores {
            rouge1: rouge_n(hyp, reference, 1),
            rouge2: rouge_n(hyp, reference, 2),
            rouge_l: rouge_l(hyp, reference),
            bleu: bleu(hyp, reference),
            jaccard: jaccard(hyp, reference),
        }
    }

    fn add(&mut self, o: &OverlapScores) {
        self.rouge1 += o.rouge1;
        self.rouge2 += o.rouge2;
        self.rouge_l += o.rouge_l;
        self.bleu += o.bleu;
        self.jaccard += o.jaccard;
    }

    fn scaled(mut self, f: f64) -> Self {
        self.rouge1 *= f;
        self.rouge2 *= f;
        self.rouge_l *= f;
        self.bleu *= f;
        self.jaccard *= f;
        self
    }
}

pub const ANNOTATORS: std::ops::RangeInclusive<u8> = 1..=5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorScores {
    pub annotator: u8,
    pub documents: usize,
    pub scores: OverlapScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplReport {
    pub rows: Vec<AnnotatorScores>,
}

/// Per-annotator mean of the overlap metrics over documents. `explanations`
/// maps doc id to extracted text. Documents nobody annotated are ignored;
/// an annotated document missing one annotator's gold is skipped with a warning.
pub fn explanation_report(explanations: &BTreeMap<String, String>, golds: &[ExpertExplanation]) -> ExplReport {
    let rows = ANNOTATORS
        .map(|a| {
            let mut sum = OverlapScores::default();
            let mut n = 0;
            for (doc, hyp) in explanations {
                match golds.iter().find(|g| g.annotator == a && &g.doc_id == doc) {
                    Some(g) => {
                        sum.add(&OverlapScores::compute(hyp, &g.gold_text));
                        n += 1;
                    }
                    None if golds.iter().any(|g| &g.doc_id == doc) => {
                        log::warn!("no gold from annotator {a} for {doc}; skipped")
                    }
                    None => {}
                }
            }
            AnnotatorScores {
                annotator: a,
                documents: n,
                scores: if n == 0 { sum } else { sum.scaled(1.0 / n as f64) },
            }
        })
        .collect();
    ExplReport { rows }
}

impl ExplReport {
    /// Metrics as rows, annotators as columns; `-` marks annotators with no documents.
    pub fn grid(&self, decimals: usize) -> String {
        let metrics: [(&str, fn(&OverlapScores) -> f64); 5] = [
            ("ROUGE-1", |s| s.rouge1),
            ("ROUGE-2", |s| s.rouge2),
            ("ROUGE-L", |s| s.rouge_l),
            ("BLEU", |s| s.bleu),
            ("Jaccard", |s| s.jaccard),
        ];
        let width = decimals + 3;
        let mut out = format!("{:<10}", "Expert");
        for r in &self.rows {
            out.push_str(&format!(" {:>width$}", r.annotator));
        }
        out.push('\n');
        for (name, get) in metrics {
            out.push_str(&format!("{name:<10}"));
            for r in &self.rows {
                if r.documents == 0 {
                    out.push_str(&format!(" {:>width$}", "-"));
                } else {
                    out.push_str(&format!(" {:>width$.decimals$}", get(&r.scores)));
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(v: &[usize]) -> Vec<Vec<usize>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn binary_confusion_example() {
        let r = classification_report(&sets(&[0, 1, 1, 1]), &sets(&[0, 0, 1, 1]), 2).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.micro_f1, 0.75);
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class[1].f1 - 0.8).abs() < 1e-12);
        assert!((r.macro_f1 - 0.733_333_333_333).abs() < 1e-9);
    }

    #[test]
    fn perfect_and_empty_multilabel() {
        let g = vec![vec![0, 2], vec![1]];
        let r = classification_report(&g, &g, 3).unwrap();
        assert_eq!((r.accuracy, r.micro_f1, r.macro_f1), (1.0, 1.0, 1.0));
        let r = classification_report(&[vec![], vec![]], &g, 3).unwrap();
        assert_eq!(r.micro_f1, 0.0);
        assert!(classification_report(&g[..1], &g, 3).is_err());
    }

    #[test]
    fn macro_f1_bounded_by_best_class() {
        let r = classification_report(&sets(&[0, 0, 2, 1]), &sets(&[0, 1, 2, 2]), 4).unwrap();
        let best = r.per_class.iter().map(|c| c.f1).fold(0.0, f64::max);
        assert!(r.macro_f1 <= best);
    }

    #[test]
    fn overlap_golden_values() {
        let r1 = rouge_n_scores("the cat", "the cat sat", 1);
        assert_eq!(r1.precision, 1.0);
        assert!((r1.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((r1.f1 - 0.8).abs() < 1e-12);
        assert!((jaccard("the cat", "the cat sat") - 2.0 / 3.0).abs() < 1e-12);
        let s = OverlapScores::compute("The court held so.", "the court held so .");
        assert_eq!(s, OverlapScores { rouge1: 1.0, rouge2: 1.0, rouge_l: 1.0, bleu: 1.0, jaccard: 1.0 });
        assert_eq!(OverlapScores::compute("alpha beta", "gamma delta"), OverlapScores::default());
        assert_eq!(OverlapScores::compute("", "gamma delta"), OverlapScores::default());
    }

    #[test]
    fn directionality() {
        assert_eq!(jaccard("a b c", "a"), jaccard("a", "a b c"));
        assert_ne!(bleu("a", "a b c d"), bleu("a b c d", "a"));
        let (fwd, back) = (rouge_n_scores("a", "a b c d", 1), rouge_n_scores("a b c d", "a", 1));
        assert_ne!(fwd.precision, back.precision);
        assert_eq!(fwd.precision, back.recall);
    }

    #[test]
    fn bleu_smoothing_and_brevity() {
        let b = bleu("the cat sat on", "the cat sat on the mat");
        assert!((b - (1.0f64 - 6.0 / 4.0).exp()).abs() < 1e-12);
        let smoothed = bleu("the dog sat down", "the cat sat down");
        assert!(smoothed > 0.0 && smoothed < 1.0);
        assert_eq!(corpus_bleu(&[("a b", "a b"), ("c d", "c d")]), 1.0);
    }

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 7, 7]), 1.0);
        assert!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]) < 0.0);
    }

    #[test]
    fn grid_prints_annotator_columns() {
        let mut ex = BTreeMap::new();
        ex.insert("d".to_string(), "the cat".to_string());
        let golds: Vec<ExpertExplanation> = ANNOTATORS
            .map(|a| ExpertExplanation { doc_id: "d".into(), annotator: a, gold_text: "the cat".into() })
            .collect();
        let rep = explanation_report(&ex, &golds);
        assert!(rep.rows.iter().all(|r| r.scores.rouge1 == 1.0));
        let empty = explanation_report(&BTreeMap::new(), &golds);
        assert!(empty.rows.iter().all(|r| r.scores == OverlapScores::default()));
        let grid = rep.grid(3);
        assert!(grid.lines().nth(1).unwrap().starts_with("ROUGE-1"));
        assert!(grid.contains("1.000"));
    }
}
