//! Planted-structure corpus generator.
//!
//! A document is a shuffled sequence of paragraphs, each drawn from the
//! vocabulary of one part type. Exactly one paragraph of the pattern part type
//! is written in the pattern vocabulary of the document's label; its sentences
//! are the rationale. The label is the highest label with a pattern sentence
//! in the text, or 0 when there is none.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DocumentRecord, ExpertExplanation, LoadOptions, Split, Task};
use crate::error::{Error, Result};
use crate::tokenizer::words_lowercase;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_docs: usize,
    pub n_labels: usize,
    pub part_types: usize,
    pub words_per_part: usize,
    /// Size of each label's pattern vocabulary.
    pub pattern_vocab: usize,
    /// Part type of the pattern paragraph.
    pub pattern_part: usize,
    /// Approximate word count per document.
    pub target_tokens: usize,
    pub sentence_words: (usize, usize),
    pub paragraph_sentences: (usize, usize),
    pub train_fraction: f64,
    pub validation_fraction: f64,
    /// Share of documents in the expert split, which carries annotator golds.
    pub expert_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_docs: 500,
            n_labels: 2,
            part_types: 3,
            words_per_part: 80,
            pattern_vocab: 12,
            pattern_part: 2,
            target_tokens: 3000,
            sentence_words: (8, 14),
            paragraph_sentences: (3, 7),
            train_fraction: 0.6,
            validation_fraction: 0.1,
            expert_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_docs == 0 {
            return Err(Error::config("n_docs must be positive"));
        }
        if self.n_labels < 2 {
            return Err(Error::config("n_labels must be at least 2"));
        }
        if self.n_labels > self.part_types {
            return Err(Error::config(format!(
                "{} labels need as many patterns but only {} part types are available",
                self.n_labels, self.part_types
            )));
        }
        if self.pattern_part >= self.part_types {
            return Err(Error::config("pattern_part out of range"));
        }
        let (a, b) = self.sentence_words;
        let (c, d) = self.paragraph_sentences;
        if a < 2 || a > b || c == 0 || c > d || self.pattern_vocab < 2 || self.words_per_part < 2 {
            return Err(Error::config("length ranges must be non-empty and lengths positive"));
        }
        let (t, v, x) = (self.train_fraction, self.validation_fraction, self.expert_fraction);
        if !(t > 0.0 && v >= 0.0 && x >= 0.0 && t + v + x < 1.0) {
            return Err(Error::config("split fractions must leave a non-empty test share"));
        }
        Ok(())
    }

    pub fn task(&self) -> Task {
        if self.n_labels == 2 {
            Task::Binary
        } else {
            Task::Multiclass
        }
    }
}

/// Ground truth for one generated document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub doc_id: String,
    pub label: usize,
    /// Part type of every paragraph, in order.
    pub paragraph_parts: Vec<usize>,
    /// Part type of every sentence, in order.
    pub sentence_parts: Vec<usize>,
    /// Sentence indices of the pattern paragraph.
    pub rationale: Vec<usize>,
    /// The pattern paragraph.
    pub rationale_text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub truth: Vec<SyntheticTruth>,
    pub lexicon: Lexicon,
}

impl SyntheticCorpus {
    /// Annotator-1 golds equal to the pattern paragraph, for expert-split documents.
    pub fn expert_golds(&self) -> Vec<ExpertExplanation> {
        self.truth
            .iter()
            .zip(&self.corpus.documents)
            .filter(|(_, d)| d.split == Split::Expert)
            .map(|(t, _)| ExpertExplanation {
                doc_id: t.doc_id.clone(),
                annotator: 1,
                gold_text: t.rationale_text.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub parts: Vec<Vec<String>>,
    /// One pattern vocabulary per label.
    pub patterns: Vec<Vec<String>>,
}

impl Lexicon {
    fn build(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Lexicon {
        let mut seen = std::collections::HashSet::new();
        let mut word = |rng: &mut ChaCha8Rng| loop {
            let syllables = rng.random_range(2..=3);
            let w: String = (0..syllables)
                .flat_map(|_| {
                    [
                        CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char,
                        VOWELS[rng.random_range(0..VOWELS.len())] as char,
                    ]
                })
                .collect();
            if seen.insert(w.clone()) {
                return w;
            }
        };
        let parts = (0..spec.part_types)
            .map(|_| (0..spec.words_per_part).map(|_| word(rng)).collect())
            .collect();
        let patterns = (0..spec.n_labels)
            .map(|_| (0..spec.pattern_vocab).map(|_| word(rng)).collect())
            .collect();
        Lexicon { parts, patterns }
    }
}

fn sentence(words: &[String]) -> String {
    let mut s = String::new();
    for (i, w) in words.iter().enumerate() {
        if i == 0 {
            let mut cs = w.chars();
            if let Some(f) = cs.next() {
                s.extend(f.to_uppercase());
                s.push_str(cs.as_str());
            }
        } else {
            s.push(' ');
            s.push_str(w);
        }
    }
    s.push('.');
    s
}

/// The generator's labeling rule applied to arbitrary text: a sentence is a
/// pattern sentence of label `l` when every word is in `l`'s pattern vocabulary.
pub fn label_of(text: &str, lexicon: &Lexicon) -> usize {
    let sentences: Vec<Vec<String>> = crate::corpus::split_sentences(text)
        .iter()
        .map(|s| words_lowercase(s.text(text)).into_iter().filter(|w| w != ".").collect())
        .collect();
    (0..lexicon.patterns.len())
        .rev()
        .find(|&l| {
            let vocab = &lexicon.patterns[l];
            sentences.iter().any(|s| !s.is_empty() && s.iter().all(|w| vocab.contains(w)))
        })
        .unwrap_or(0)
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lexicon = Lexicon::build(spec, &mut rng);
    let n_train = ((spec.n_docs as f64) * spec.train_fraction).round() as usize;
    let n_val = ((spec.n_docs as f64) * spec.validation_fraction).round() as usize;
    let n_expert = ((spec.n_docs as f64) * spec.expert_fraction).round() as usize;

    let mut records = Vec::with_capacity(spec.n_docs);
    let mut truth = Vec::with_capacity(spec.n_docs);
    for i in 0..spec.n_docs {
        let label = i % spec.n_labels;
        let doc_id = format!("synth-{i:05}");
        let (text, t) = document(spec, &lexicon, &mut rng, &doc_id, label);
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Validation
        } else if i < n_train + n_val + n_expert {
            Split::Expert
        } else {
            Split::Test
        };
        records.push(DocumentRecord {
            id: doc_id,
            text,
            labels: vec![label as i64],
            split,
        });
        truth.push(t);
    }
    let opts = LoadOptions {
        num_labels: Some(spec.n_labels),
        ..LoadOptions::default()
    };
    let corpus = Corpus::from_records(records, spec.task(), &opts)?;
    Ok(SyntheticCorpus { corpus, truth, lexicon })
}

fn document(
    spec: &SyntheticSpec,
    lex: &Lexicon,
    rng: &mut ChaCha8Rng,
    doc_id: &str,
    label: usize,
) -> (String, SyntheticTruth) {
    // Paragraph plan: part types cycled until the word budget is met, then shuffled.
    let mean_para =
        (spec.sentence_words.0 + spec.sentence_words.1) * (spec.paragraph_sentences.0 + spec.paragraph_sentences.1) / 4;
    let n_para = (spec.target_tokens / mean_para.max(1)).max(spec.part_types);
    let mut parts: Vec<usize> = (0..n_para).map(|j| j % spec.part_types).collect();
    parts.shuffle(rng);
    let hosts: Vec<usize> = (0..n_para).filter(|&j| parts[j] == spec.pattern_part).collect();
    let host = hosts[rng.random_range(0..hosts.len())];

    let mut paragraphs = Vec::with_capacity(n_para);
    let mut sentence_parts = Vec::new();
    let mut rationale = Vec::new();
    let mut rationale_text = String::new();
    for (j, &part) in parts.iter().enumerate() {
        let vocab = if j == host { &lex.patterns[label] } else { &lex.parts[part] };
        let n_sent = rng.random_range(spec.paragraph_sentences.0..=spec.paragraph_sentences.1);
        let sentences: Vec<String> = (0..n_sent)
            .map(|_| {
                let len = rng.random_range(spec.sentence_words.0..=spec.sentence_words.1);
                let words: Vec<String> = (0..len).map(|_| vocab[rng.random_range(0..vocab.len())].clone()).collect();
                sentence(&words)
            })
            .collect();
        if j == host {
            rationale.extend(sentence_parts.len()..sentence_parts.len() + n_sent);
            rationale_text = sentences.join(" ");
        }
        sentence_parts.extend(std::iter::repeat_n(part, n_sent));
        paragraphs.push(sentences.join(" "));
    }
    let truth = SyntheticTruth {
        doc_id: doc_id.to_string(),
        label,
        paragraph_parts: parts,
        sentence_parts,
        rationale,
        rationale_text,
    };
    (paragraphs.join("\n\n"), truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::split_sentences;
    use crate::tokenizer::token_count;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_docs: 6,
            target_tokens: 400,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate(&SyntheticSpec { n_docs: 2, seed: 7, ..small(7) }).unwrap();
        let b = generate(&SyntheticSpec { n_docs: 2, seed: 7, ..small(7) }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.corpus, generate(&small(8)).unwrap().corpus);
    }

    #[test]
    fn truth_matches_text() {
        let g = generate(&small(3)).unwrap();
        for (doc, t) in g.corpus.documents.iter().zip(&g.truth) {
            let spans = split_sentences(&doc.text);
            assert_eq!(spans.len(), t.sentence_parts.len());
            let joined: Vec<&str> = t.rationale.iter().map(|&i| spans[i].text(&doc.text)).collect();
            assert_eq!(joined.join(" "), t.rationale_text);
            assert_eq!(label_of(&doc.text, &g.lexicon), t.label);
            assert_eq!(doc.labels, vec![t.label]);
            assert!(t.paragraph_parts.iter().all(|&p| p < 3));
            assert!(t.rationale.iter().all(|&i| t.sentence_parts[i] == 2));
            let n = token_count(&doc.text);
            assert!(n > 250 && n < 700, "{n} tokens");
        }
    }

    #[test]
    fn removing_the_pattern_flips_the_label() {
        let g = generate(&small(4)).unwrap();
        let (doc, t) = g.corpus.documents.iter().zip(&g.truth).find(|(_, t)| t.label == 1).unwrap();
        let stripped = doc.text.replacen(&t.rationale_text, "", 1);
        assert_eq!(label_of(&stripped, &g.lexicon), 0);
    }

    #[test]
    fn full_size_documents_are_near_target() {
        let g = generate(&SyntheticSpec { n_docs: 4, ..SyntheticSpec::default() }).unwrap();
        for d in &g.corpus.documents {
            let n = token_count(&d.text);
            assert!((2400..3600).contains(&n), "{n} tokens");
        }
    }

    #[test]
    fn rejects_more_labels_than_patterns() {
        let spec = SyntheticSpec { n_labels: 4, ..SyntheticSpec::default() };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }
}
