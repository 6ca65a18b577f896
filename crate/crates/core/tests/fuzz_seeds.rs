//! Replays the checked-in fuzz seed corpora through the parser entry points,
//! plus truncated and bit-flipped variants of every seed.

use std::path::PathBuf;

use mesc::chunker::{assign_sentences, chunk};
use mesc::config::RunConfig;
use mesc::corpus::{parse_corpus, parse_expert, read_ildc_csv, read_lexglue_jsonl, split_sentences, LoadOptions, Split, Task};
use mesc::embedder::documents_from_store;
use mesc::encoder::{ToyEncoder, ENCODER_MAGIC};
use mesc::head::{Head, HEAD_MAGIC};
use mesc::store::{Checkpoint, EmbeddingStore};
use mesc::structurer::{ClusterModel, CLUSTER_MAGIC};
use mesc::tokenizer::tokenize;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// The seed itself plus damaged copies.
fn variants(data: &[u8]) -> Vec<Vec<u8>> {
    let mut v = vec![data.to_vec()];
    for cut in [0, 1, 4, 9, 17, data.len() / 2, data.len().saturating_sub(1)] {
        v.push(data[..cut.min(data.len())].to_vec());
    }
    for pos in [0, 4, 8, 12, 16, 20, 31, data.len() / 3, data.len() / 2] {
        if pos < data.len() {
            let mut d = data.to_vec();
            d[pos] ^= 0xFF;
            v.push(d);
        }
    }
    v
}

fn corpus_jsonl(data: &[u8]) -> bool {
    let (corpus, expert) = match data.iter().position(|&b| b == 0) {
        Some(i) => (&data[..i], &data[i + 1..]),
        None => (data, &[][..]),
    };
    let mut ok = false;
    for task in [Task::Binary, Task::Multiclass, Task::Multilabel] {
        if let Ok(c) = parse_corpus(corpus, task, &LoadOptions::default()) {
            ok = true;
            let _ = parse_expert(expert, &c);
        }
    }
    ok
}

#[test]
fn corpus_seeds() {
    for (name, data) in seeds("corpus_jsonl") {
        assert!(corpus_jsonl(&data), "{name} should parse");
        for v in variants(&data) {
            corpus_jsonl(&v);
        }
    }
}

#[test]
fn dataset_import_seeds() {
    for (name, data) in seeds("dataset_import") {
        let parsed = read_ildc_csv(&data[..]).is_ok() || read_lexglue_jsonl(&data[..], Split::Train, "doc").is_ok();
        assert!(parsed, "{name} should parse");
        for v in variants(&data) {
            let _ = read_ildc_csv(&v[..]);
            let _ = read_lexglue_jsonl(&v[..], Split::Test, "doc");
        }
    }
}

#[test]
fn embedding_store_seeds() {
    for (name, data) in seeds("embedding_store") {
        let store = EmbeddingStore::from_bytes(&data).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(store.to_bytes(), data);
        documents_from_store(&store).unwrap();
        for v in variants(&data) {
            if let Ok(s) = EmbeddingStore::from_bytes(&v) {
                let _ = documents_from_store(&s);
            }
        }
    }
}

fn decode_checkpoint(data: &[u8]) -> usize {
    let mut decoded = 0;
    if let Ok(ck) = Checkpoint::from_bytes(data, HEAD_MAGIC) {
        decoded += Head::from_checkpoint(&ck).is_ok() as usize;
    }
    if let Ok(ck) = Checkpoint::from_bytes(data, ENCODER_MAGIC) {
        decoded += ToyEncoder::from_checkpoint(&ck).is_ok() as usize;
    }
    if let Ok(ck) = Checkpoint::from_bytes(data, CLUSTER_MAGIC) {
        decoded += ClusterModel::from_checkpoint(&ck).is_ok() as usize;
    }
    decoded
}

#[test]
fn checkpoint_seeds() {
    for (name, data) in seeds("checkpoint") {
        assert_eq!(decode_checkpoint(&data), 1, "{name} should decode as exactly one model");
        for v in variants(&data) {
            decode_checkpoint(&v);
        }
    }
}

#[test]
fn run_config_seeds() {
    for (name, data) in seeds("run_config") {
        let text = std::str::from_utf8(&data).unwrap();
        let cfg = RunConfig::from_json(text).unwrap_or_else(|e| panic!("{name}: {e}"));
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap().hash(), cfg.hash());
        for v in variants(&data) {
            if let Ok(t) = std::str::from_utf8(&v) {
                if let Ok(c) = RunConfig::from_json(t) {
                    let _ = c.validate();
                }
            }
        }
    }
}

#[test]
fn text_seeds() {
    for (_, data) in seeds("text") {
        for v in variants(&data) {
            let text = String::from_utf8_lossy(&v);
            let spans = split_sentences(&text);
            let tokens = tokenize(&text, 4096);
            if let Ok(set) = chunk("doc", &tokens, 16, 4) {
                let ids: Vec<u32> = tokens.iter().map(|t| t.id).collect();
                assert_eq!(set.deoverlapped(), ids);
                let _ = assign_sentences(&set, &tokens, &spans);
            }
        }
    }
}
