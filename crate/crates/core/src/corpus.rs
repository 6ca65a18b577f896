//! Labeled long-document corpora: JSONL loading, validation, sentence spans,
//! and adapters for ILDC-style CSV and LexGLUE-style JSONL exports.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer;

/// Documents longer than this many tokens are rejected at load time.
pub const DEFAULT_MAX_TOKENS: usize = 600_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Binary,
    #[serde(alias = "multi-class")]
    Multiclass,
    #[serde(alias = "multi-label")]
    Multilabel,
}

impl Task {
    pub fn is_multilabel(self) -> bool {
        matches!(self, Task::Multilabel)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Binary => "binary",
            Task::Multiclass => "multiclass",
            Task::Multilabel => "multilabel",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Task::Binary),
            "multiclass" | "multi-class" => Ok(Task::Multiclass),
            "multilabel" | "multi-label" => Ok(Task::Multilabel),
            other => Err(Error::config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    Expert,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Validation, Split::Test, Split::Expert];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Expert => "expert",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "dev" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            "expert" => Ok(Split::Expert),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

/// One line of the corpus JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentRecord {
    pub id: String,
    pub text: String,
    pub labels: Vec<i64>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub text: String,
    /// Sorted, deduplicated label ids.
    pub labels: Vec<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub task: Task,
    pub num_labels: usize,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Label count; inferred from the data (2 for binary) when `None`.
    pub num_labels: Option<usize>,
    pub max_tokens: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            num_labels: None,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

impl Corpus {
    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for doc in &self.documents {
            *counts.entry(doc.split).or_insert(0) += 1;
        }
        counts
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Document> + '_ {
        self.documents.iter().filter(move |d| d.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    /// Build a corpus from records, enforcing every document and task invariant.
    pub fn from_records(records: Vec<DocumentRecord>, task: Task, opts: &LoadOptions) -> Result<Corpus> {
        if records.is_empty() {
            return Err(Error::validation("no documents"));
        }
        let max_label = records.iter().flat_map(|r| r.labels.iter().copied()).max().unwrap_or(0);
        let num_labels = match (task, opts.num_labels) {
            (Task::Binary, Some(u)) if u != 2 => {
                return Err(Error::validation(format!("binary task requires 2 labels, got {u}")))
            }
            (Task::Binary, _) => 2,
            (_, Some(u)) => u,
            (_, None) => usize::try_from(max_label.max(0)).unwrap_or(0) + 1,
        };
        if num_labels < 2 {
            return Err(Error::validation("label space must have at least 2 labels"));
        }

        let mut seen = HashSet::with_capacity(records.len());
        let mut documents = Vec::with_capacity(records.len());
        for rec in records {
            if rec.text.trim().is_empty() {
                return Err(Error::validation(format!("document {:?} has empty text", rec.id)));
            }
            if !seen.insert(rec.id.clone()) {
                return Err(Error::validation(format!("duplicate document id {:?}", rec.id)));
            }
            let mut labels = BTreeSet::new();
            for &l in &rec.labels {
                if l < 0 || l as u64 >= num_labels as u64 {
                    return Err(Error::validation(format!(
                        "document {:?}: label {l} out of range 0..{num_labels}",
                        rec.id
                    )));
                }
                labels.insert(l as usize);
            }
            match (task, labels.len()) {
                (_, 0) => {
                    return Err(Error::validation(format!("document {:?} has no labels", rec.id)))
                }
                (Task::Binary | Task::Multiclass, n) if n > 1 => {
                    return Err(Error::validation(format!(
                        "document {:?}: {task} task needs exactly one label, got {n}",
                        rec.id
                    )))
                }
                _ => {}
            }
            let n_tokens = tokenizer::token_count(&rec.text);
            if n_tokens > opts.max_tokens {
                return Err(Error::validation(format!(
                    "document {:?} has {n_tokens} tokens (limit {})",
                    rec.id, opts.max_tokens
                )));
            }
            documents.push(Document {
                id: rec.id,
                text: rec.text,
                labels: labels.into_iter().collect(),
                split: rec.split,
            });
        }
        Ok(Corpus {
            documents,
            task,
            num_labels,
        })
    }

    pub fn to_records(&self) -> Vec<DocumentRecord> {
        self.documents
            .iter()
            .map(|d| DocumentRecord {
                id: d.id.clone(),
                text: d.text.clone(),
                labels: d.labels.iter().map(|&l| l as i64).collect(),
                split: d.split,
            })
            .collect()
    }
}

/// Label-space arity rules shared by every component that takes `(task, u)`.
pub fn check_label_count(task: Task, u: usize) -> Result<()> {
    match task {
        Task::Binary if u != 2 => Err(Error::config(format!("binary task requires 2 labels, got {u}"))),
        _ if u < 2 => Err(Error::config(format!("label space must have at least 2 labels, got {u}"))),
        _ => Ok(()),
    }
}

fn read_jsonl<T, R>(reader: R) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    R: BufRead,
{
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Parse corpus JSONL from any reader.
pub fn parse_corpus<R: Read>(reader: R, task: Task, opts: &LoadOptions) -> Result<Corpus> {
    let records = read_jsonl(BufReader::new(reader))?;
    Corpus::from_records(records, task, opts)
}

pub fn load_corpus(path: impl AsRef<Path>, task: Task) -> Result<Corpus> {
    load_corpus_with(path, task, &LoadOptions::default())
}

pub fn load_corpus_with(path: impl AsRef<Path>, task: Task, opts: &LoadOptions) -> Result<Corpus> {
    let corpus = parse_corpus(File::open(path)?, task, opts)?;
    for (split, n) in corpus.split_counts() {
        log::info!("loaded {n} {split} documents");
    }
    Ok(corpus)
}

pub fn write_corpus<W: Write>(corpus: &Corpus, writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for rec in corpus.to_records() {
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    write_corpus(corpus, File::create(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertExplanation {
    pub doc_id: String,
    pub annotator: u8,
    pub gold_text: String,
}

pub fn parse_expert<R: Read>(reader: R, corpus: &Corpus) -> Result<Vec<ExpertExplanation>> {
    let golds: Vec<ExpertExplanation> = read_jsonl(BufReader::new(reader))?;
    for g in &golds {
        if !(1..=5).contains(&g.annotator) {
            return Err(Error::validation(format!("annotator {} outside 1..5", g.annotator)));
        }
        match corpus.get(&g.doc_id) {
            Some(d) if d.split == Split::Expert => {}
            Some(_) => {
                return Err(Error::validation(format!("document {:?} is not in the expert split", g.doc_id)))
            }
            None => return Err(Error::validation(format!("unknown document {:?}", g.doc_id))),
        }
    }
    Ok(golds)
}

pub fn load_expert(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Vec<ExpertExplanation>> {
    parse_expert(File::open(path)?, corpus)
}

pub fn save_expert(golds: &[ExpertExplanation], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for g in golds {
        serde_json::to_writer(&mut w, g)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// ILDC CSV export: columns `name`, `text`, `label`, `split` (`train|dev|test`).
pub fn read_ildc_csv<R: Read>(reader: R) -> Result<Vec<DocumentRecord>> {
    #[derive(Deserialize)]
    struct Row {
        name: String,
        text: String,
        label: i64,
        split: String,
    }
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (idx, row) in rdr.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: idx + 2,
            message: e.to_string(),
        })?;
        out.push(DocumentRecord {
            id: row.name,
            text: row.text,
            labels: vec![row.label],
            split: row.split.parse()?,
        });
    }
    Ok(out)
}

/// LexGLUE-style JSONL (one split per file): `text` is a string or a list of
/// paragraphs, labels come from `labels` (list) or `label` (int).
pub fn read_lexglue_jsonl<R: Read>(reader: R, split: Split, id_prefix: &str) -> Result<Vec<DocumentRecord>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Text {
        Whole(String),
        Paragraphs(Vec<String>),
    }
    #[derive(Deserialize)]
    struct Row {
        id: Option<String>,
        text: Text,
        labels: Option<Vec<i64>>,
        label: Option<i64>,
    }
    let rows: Vec<Row> = read_jsonl(BufReader::new(reader))?;
    rows.into_iter()
        .enumerate()
        .map(|(i, row)| {
            let labels = match (row.labels, row.label) {
                (Some(ls), _) => ls,
                (None, Some(l)) => vec![l],
                (None, None) => {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: "record has neither `labels` nor `label`".into(),
                    })
                }
            };
            let text = match row.text {
                Text::Whole(t) => t,
                Text::Paragraphs(ps) => ps.join("\n"),
            };
            Ok(DocumentRecord {
                id: row.id.unwrap_or_else(|| format!("{id_prefix}{i}")),
                text,
                labels,
                split,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub index: usize,
    /// Byte offsets into the document text.
    pub char_start: usize,
    pub char_end: usize,
}

impl SentenceSpan {
    pub fn text<'a>(&self, doc_text: &'a str) -> &'a str {
        &doc_text[self.char_start..self.char_end]
    }
}

const ABBREVIATIONS: [&str; 5] = ["No", "vs", "Sec", "Art", "Hon"];

/// Deterministic rule-based sentence segmentation.
///
/// A boundary follows `.`, `?` or `!` when the next non-whitespace character
/// (after at least one whitespace) is uppercase or a digit. A period does not
/// end a sentence after `No`, `vs`, `Sec`, `Art`, `Hon`, or after a single
/// capital letter that is not itself the first word of the sentence. Spans are
/// trimmed of surrounding whitespace.
pub fn split_sentences(text: &str) -> Vec<SentenceSpan> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let push = |s: usize, e: usize, spans: &mut Vec<SentenceSpan>| {
        spans.push(SentenceSpan {
            index: spans.len(),
            char_start: s,
            char_end: e,
        });
    };

    let mut i = 0;
    while i < chars.len() {
        let (pos, ch) = chars[i];
        if start.is_none() && !ch.is_whitespace() {
            start = Some(pos);
        }
        if matches!(ch, '.' | '?' | '!') && is_boundary(text, &chars, i, start.unwrap_or(pos)) {
            let end = pos + ch.len_utf8();
            push(start.take().unwrap_or(pos), end, &mut spans);
        }
        i += 1;
    }
    if let Some(s) = start {
        let end = text.trim_end().len();
        if end > s {
            push(s, end, &mut spans);
        }
    }
    spans
}

fn is_boundary(text: &str, chars: &[(usize, char)], i: usize, sentence_start: usize) -> bool {
    // Needs whitespace, then an uppercase letter or digit.
    let mut j = i + 1;
    if j >= chars.len() || !chars[j].1.is_whitespace() {
        return false;
    }
    while j < chars.len() && chars[j].1.is_whitespace() {
        j += 1;
    }
    match chars.get(j) {
        Some(&(_, c)) if c.is_uppercase() || c.is_ascii_digit() => {}
        _ => return false,
    }
    if chars[i].1 != '.' {
        return true;
    }
    let period = chars[i].0;
    let word_start = text[..period]
        .char_indices()
        .rev()
        .take_while(|(_, c)| c.is_alphanumeric())
        .last()
        .map(|(p, _)| p)
        .unwrap_or(period);
    let word = &text[word_start..period];
    if ABBREVIATIONS.contains(&word) {
        return false;
    }
    let mut wc = word.chars();
    if let (Some(c), None) = (wc.next(), wc.next()) {
        if c.is_uppercase() && word_start != sentence_start {
            return false;
        }
    }
    true
}
