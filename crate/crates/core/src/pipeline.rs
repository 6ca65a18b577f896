//! Stage orchestration over a directory of versioned artifacts.
//!
//! Every artifact `name` is paired with `name.meta.json`, which records the
//! config hash that produced it, the SHA-256 of its bytes and the digests of
//! the artifacts it was built from. A stage refuses inputs written under a
//! different config hash unless forced, and `run` skips stages whose outputs
//! are already up to date.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chunker::{assign_sentences, chunk, ChunkSet};
use crate::config::{DataConfig, RunConfig};
use crate::corpus::{
    load_corpus_with, parse_corpus, parse_expert, save_expert, write_corpus, Corpus, Document, ExpertExplanation,
    LoadOptions, Split,
};
use crate::corpus::split_sentences;
use crate::embedder::{documents_from_store, extract_document, push_to_store, DocEmbedding};
use crate::encoder::{
    finetune_batches, Backend, ChunkEncoder, HashEncoder, HashEncoderConfig, ToyEncoder,
    ENCODER_MAGIC, EXTRACTED_LAYERS,
};
use crate::error::{Error, Result};
use crate::head::{predict, Head, HeadExample, HEAD_MAGIC};
use crate::metrics::{classification_report, explanation_report, ClsReport, ExplReport};
use crate::nn::Mat;
use crate::orse::{explain_document, DocumentInput, Explanation};
use crate::store::{write_atomic, Checkpoint, EmbeddingStore};
use crate::structurer::{encode_for_head, ClusterModel, StructureLabels, CLUSTER_MAGIC};
use crate::synth::generate;
use crate::tokenizer::tokenize;
use crate::trainer::{self, HistoryRecord};

pub const FORMAT_VERSION: u32 = 1;

pub const CORPUS: &str = "corpus.jsonl";
pub const EXPERT: &str = "expert.jsonl";
pub const TRUTH: &str = "synth_truth.jsonl";
pub const ENCODER: &str = "encoder.ckpt";
pub const FINETUNE_HISTORY: &str = "finetune_history.jsonl";
pub const EMBEDDINGS: &str = "embeddings.store";
pub const CLUSTER: &str = "cluster.model";
pub const STRUCTURE: &str = "structure.jsonl";
pub const HEAD: &str = "head.ckpt";
pub const HEAD_HISTORY: &str = "head_history.jsonl";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const EXPLANATIONS: &str = "explanations.jsonl";
pub const CLS_REPORT: &str = "cls_report.json";
pub const CLS_TABLE: &str = "cls_report.txt";
pub const EXPL_REPORT: &str = "expl_report.json";
pub const EXPL_TABLE: &str = "expl_report.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Corpus,
    Finetune,
    Embed,
    Cluster,
    Train,
    Predict,
    Explain,
    EvalCls,
    EvalExpl,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Corpus,
        Stage::Finetune,
        Stage::Embed,
        Stage::Cluster,
        Stage::Train,
        Stage::Predict,
        Stage::Explain,
        Stage::EvalCls,
        Stage::EvalExpl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Finetune => "finetune",
            Stage::Embed => "embed",
            Stage::Cluster => "cluster",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Explain => "explain",
            Stage::EvalCls => "eval-cls",
            Stage::EvalExpl => "eval-expl",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown stage {s:?}")))
    }
}

/// Sidecar describing one artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub artifact: String,
    pub format_version: u32,
    pub config_hash: String,
    pub sha256: String,
    /// Input artifact name to its digest at build time.
    pub inputs: BTreeMap<String, String>,
}

fn meta_name(name: &str) -> String {
    format!("{name}.meta.json")
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn producer(name: &str) -> Stage {
    match name {
        CORPUS | EXPERT | TRUTH => Stage::Corpus,
        ENCODER | FINETUNE_HISTORY => Stage::Finetune,
        EMBEDDINGS => Stage::Embed,
        CLUSTER | STRUCTURE => Stage::Cluster,
        HEAD | HEAD_HISTORY => Stage::Train,
        PREDICTIONS => Stage::Predict,
        EXPLANATIONS => Stage::Explain,
        CLS_REPORT | CLS_TABLE => Stage::EvalCls,
        _ => Stage::EvalExpl,
    }
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub doc_id: String,
    pub split: Split,
    pub gold: Vec<usize>,
    pub predicted: Vec<usize>,
    pub probs: Vec<f64>,
}

/// Everything the head consumes for one document.
#[derive(Debug, Clone)]
pub struct DocInputs {
    pub doc_id: String,
    pub split: Split,
    pub labels: Vec<usize>,
    pub rows: Mat,
    pub structure: Option<Vec<i32>>,
}

impl DocInputs {
    pub fn example(&self, k_cap: usize) -> HeadExample {
        let s_vec = match &self.structure {
            Some(l) => encode_for_head(l, k_cap),
            None => vec![0.0; k_cap + 1],
        };
        HeadExample {
            x: self.rows.clone(),
            s_vec,
            target: self.labels.clone(),
        }
    }
}

/// Trains a fresh head; history covers the train split and, if non-empty, validation.
pub fn train_head(cfg: &RunConfig, train: &[DocInputs], validation: &[DocInputs]) -> Result<(Head, Vec<HistoryRecord>)> {
    let k_cap = cfg.structure.k_cap;
    let mut head = Head::new(cfg.head_config(k_cap))?;
    let train_ex: Vec<HeadExample> = train.iter().map(|d| d.example(k_cap)).collect();
    let val_ex: Vec<HeadExample> = validation.iter().map(|d| d.example(k_cap)).collect();
    let history = trainer::train(&mut head, &train_ex, &cfg.head_train_config(), |epoch, loss, model| {
        let mut out = vec![history_record(epoch, "train", loss, &evaluate_head(model, &train_ex)?.0)];
        if !val_ex.is_empty() {
            let (report, vloss) = evaluate_head(model, &val_ex)?;
            out.push(history_record(epoch, "validation", vloss, &report));
        }
        Ok(out)
    })?;
    Ok((head, history))
}

fn history_record(epoch: usize, split: &str, loss: f64, r: &ClsReport) -> HistoryRecord {
    HistoryRecord {
        epoch,
        split: split.to_string(),
        loss,
        micro_f1: r.micro_f1,
        macro_f1: r.macro_f1,
        accuracy: r.accuracy,
    }
}

/// Classification report and mean loss of `head` on `examples`.
pub fn evaluate_head(head: &Head, examples: &[HeadExample]) -> Result<(ClsReport, f64)> {
    let task = head.config.task;
    let outs: Vec<(Vec<usize>, f64)> = examples
        .par_iter()
        .map(|ex| {
            let o = head.forward(&ex.x, &ex.s_vec, None)?.o;
            Ok((predict(&o, task), trainer::loss(&o, &ex.target, task)?.value))
        })
        .collect::<Result<_>>()?;
    let preds: Vec<Vec<usize>> = outs.iter().map(|o| o.0.clone()).collect();
    let golds: Vec<Vec<usize>> = examples.iter().map(|e| e.target.clone()).collect();
    let mean = outs.iter().map(|o| o.1).sum::<f64>() / outs.len().max(1) as f64;
    Ok((classification_report(&preds, &golds, head.config.num_labels)?, mean))
}

fn to_jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn from_jsonl<T: for<'de> Deserialize<'de>>(bytes: &[u8], name: &str) -> Result<Vec<T>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::format(format!("{name}: {e}")))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("{name}: {e}"),
            })
        })
        .collect()
}

pub struct Pipeline {
    pub config: RunConfig,
    hash: String,
    dir: PathBuf,
    force: bool,
}

impl Pipeline {
    /// Validates the config and prepares the artifact directory.
    pub fn new(config: RunConfig, dir: impl Into<PathBuf>, force: bool) -> Result<Pipeline> {
        config.validate()?;
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let hash = config.hash();
        write_atomic(&dir.join("config.json"), config.to_json().as_bytes())?;
        Ok(Pipeline {
            config,
            hash,
            dir,
            force,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn has_expert(&self) -> bool {
        match &self.config.data {
            DataConfig::Synthetic(_) => true,
            DataConfig::Corpus { expert, .. } => expert.is_some(),
        }
    }

    /// Whether `stage` does anything under the current config.
    pub fn applies(&self, stage: Stage) -> bool {
        let cfg = &self.config;
        let explains = cfg.encoder.backend != Backend::Precomputed && !cfg.orse.ks.is_empty() && !cfg.orse.splits.is_empty();
        match stage {
            Stage::Finetune => cfg.encoder.backend == Backend::Toy,
            Stage::Cluster => cfg.structure.enabled,
            Stage::Explain => explains,
            Stage::EvalExpl => explains && self.has_expert(),
            _ => true,
        }
    }

    pub fn outputs(&self, stage: Stage) -> Vec<&'static str> {
        if !self.applies(stage) {
            return Vec::new();
        }
        match stage {
            Stage::Corpus => match &self.config.data {
                DataConfig::Synthetic(_) => vec![CORPUS, EXPERT, TRUTH],
                DataConfig::Corpus { expert: Some(_), .. } => vec![CORPUS, EXPERT],
                DataConfig::Corpus { .. } => vec![CORPUS],
            },
            Stage::Finetune => vec![ENCODER, FINETUNE_HISTORY],
            Stage::Embed => vec![EMBEDDINGS],
            Stage::Cluster => vec![CLUSTER, STRUCTURE],
            Stage::Train => vec![HEAD, HEAD_HISTORY],
            Stage::Predict => vec![PREDICTIONS],
            Stage::Explain => vec![EXPLANATIONS],
            Stage::EvalCls => vec![CLS_REPORT, CLS_TABLE],
            Stage::EvalExpl => vec![EXPL_REPORT, EXPL_TABLE],
        }
    }

    pub fn inputs(&self, stage: Stage) -> Vec<&'static str> {
        let toy = self.config.encoder.backend == Backend::Toy;
        let structure = self.config.structure.enabled;
        let mut v = Vec::new();
        match stage {
            Stage::Corpus => {}
            Stage::Finetune => v.push(CORPUS),
            Stage::Embed => {
                v.push(CORPUS);
                if toy {
                    v.push(ENCODER);
                }
            }
            Stage::Cluster => v.extend([CORPUS, EMBEDDINGS]),
            Stage::Train | Stage::Predict | Stage::Explain => {
                v.extend([CORPUS, EMBEDDINGS]);
                if structure {
                    v.push(STRUCTURE);
                }
                if stage != Stage::Train {
                    v.push(HEAD);
                }
                if stage == Stage::Explain {
                    v.push(PREDICTIONS);
                    if toy {
                        v.push(ENCODER);
                    }
                }
            }
            Stage::EvalCls => v.extend([CORPUS, PREDICTIONS]),
            Stage::EvalExpl => v.extend([CORPUS, EXPERT, EXPLANATIONS]),
        }
        v
    }

    fn read_meta(&self, name: &str) -> Result<Option<ArtifactMeta>> {
        let p = self.path(&meta_name(name));
        if !p.exists() {
            return Ok(None);
        }
        let meta: ArtifactMeta = serde_json::from_slice(&std::fs::read(&p)?)
            .map_err(|e| Error::format(format!("{}: {e}", p.display())))?;
        Ok(Some(meta))
    }

    /// Reads an input artifact after checking provenance and integrity.
    pub fn read(&self, name: &str) -> Result<Vec<u8>> {
        let path = self.path(name);
        let missing = || {
            Error::Dependency(format!(
                "missing artifact {name} in {}; run `{}` first",
                self.dir.display(),
                producer(name)
            ))
        };
        if !path.exists() {
            return Err(missing());
        }
        let meta = self.read_meta(name)?.ok_or_else(missing)?;
        if meta.config_hash != self.hash {
            let msg = format!(
                "{name} was produced under config {} but the current config is {}",
                &meta.config_hash[..meta.config_hash.len().min(12)],
                &self.hash[..12]
            );
            if !self.force {
                return Err(Error::Dependency(format!("{msg}; pass --force to mix artifacts")));
            }
            log::warn!("{msg}; continuing because of --force");
        }
        let bytes = std::fs::read(&path)?;
        if digest(&bytes) != meta.sha256 {
            return Err(Error::format(format!("{name} does not match the digest in its metadata")));
        }
        Ok(bytes)
    }

    fn write(&self, stage: Stage, name: &str, bytes: &[u8]) -> Result<()> {
        let mut inputs = BTreeMap::new();
        for input in self.inputs(stage) {
            if let Some(m) = self.read_meta(input)? {
                inputs.insert(input.to_string(), m.sha256);
            }
        }
        write_atomic(&self.path(name), bytes)?;
        let meta = ArtifactMeta {
            artifact: name.to_string(),
            format_version: FORMAT_VERSION,
            config_hash: self.hash.clone(),
            sha256: digest(bytes),
            inputs,
        };
        let mut json = serde_json::to_vec_pretty(&meta)?;
        json.push(b'\n');
        write_atomic(&self.path(&meta_name(name)), &json)
    }

    /// True when every output of `stage` exists, is intact, was built under
    /// this config and from the current versions of its inputs.
    pub fn is_fresh(&self, stage: Stage) -> Result<bool> {
        let outputs = self.outputs(stage);
        for out in &outputs {
            let Some(meta) = self.read_meta(out)? else { return Ok(false) };
            let Ok(bytes) = std::fs::read(self.path(out)) else { return Ok(false) };
            if meta.config_hash != self.hash || meta.sha256 != digest(&bytes) {
                return Ok(false);
            }
            for input in self.inputs(stage) {
                let current = self.read_meta(input)?.map(|m| m.sha256);
                if current.as_ref() != meta.inputs.get(input) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// Runs every applicable stage in order, skipping up-to-date ones.
    /// Returns the stages that were executed.
    pub fn run(&self) -> Result<Vec<Stage>> {
        let mut ran = Vec::new();
        for stage in Stage::ALL {
            if !self.applies(stage) {
                continue;
            }
            if self.is_fresh(stage)? {
                log::info!("{stage}: up to date");
                continue;
            }
            self.execute(stage)?;
            ran.push(stage);
        }
        Ok(ran)
    }

    pub fn execute(&self, stage: Stage) -> Result<()> {
        if !self.applies(stage) {
            log::warn!("{stage}: not applicable under this config, skipped");
            return Ok(());
        }
        log::info!("{stage}: running");
        match stage {
            Stage::Corpus => self.stage_corpus(),
            Stage::Finetune => self.stage_finetune(),
            Stage::Embed => self.stage_embed(),
            Stage::Cluster => self.stage_cluster(),
            Stage::Train => self.stage_train(),
            Stage::Predict => self.stage_predict(),
            Stage::Explain => self.stage_explain(),
            Stage::EvalCls => self.stage_eval_cls(),
            Stage::EvalExpl => self.stage_eval_expl(),
        }
    }

    fn load_options(&self) -> LoadOptions {
        LoadOptions {
            num_labels: Some(self.config.num_labels),
            ..LoadOptions::default()
        }
    }

    fn stage_corpus(&self) -> Result<()> {
        let (corpus, expert) = match &self.config.data {
            DataConfig::Synthetic(spec) => {
                let g = generate(spec)?;
                self.write(Stage::Corpus, TRUTH, &to_jsonl(&g.truth)?)?;
                let golds = g.expert_golds();
                (g.corpus, Some(golds))
            }
            DataConfig::Corpus { path, expert } => {
                let corpus = load_corpus_with(path, self.config.task, &self.load_options())?;
                let golds = match expert {
                    Some(p) => Some(crate::corpus::load_expert(p, &corpus)?),
                    None => None,
                };
                (corpus, golds)
            }
        };
        let mut buf = Vec::new();
        write_corpus(&corpus, &mut buf)?;
        self.write(Stage::Corpus, CORPUS, &buf)?;
        if let Some(golds) = expert {
            let tmp = self.dir.join(".expert.tmp");
            save_expert(&golds, &tmp)?;
            let bytes = std::fs::read(&tmp)?;
            std::fs::remove_file(&tmp)?;
            self.write(Stage::Corpus, EXPERT, &bytes)?;
        }
        log::info!("corpus: {:?}", corpus.split_counts());
        Ok(())
    }

    pub fn corpus(&self) -> Result<Corpus> {
        parse_corpus(&self.read(CORPUS)?[..], self.config.task, &self.load_options())
    }

    pub fn expert(&self, corpus: &Corpus) -> Result<Vec<ExpertExplanation>> {
        parse_expert(&self.read(EXPERT)?[..], corpus)
    }

    pub fn chunk_document(&self, doc: &Document) -> Result<ChunkSet> {
        let tokens = tokenize(&doc.text, self.config.vocab_size);
        chunk(&doc.id, &tokens, self.config.chunk_size, self.config.chunk_overlap)
    }

    fn stage_finetune(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let batches = |split: Split| -> Result<_> {
            let docs: Vec<&Document> = corpus.split(split).collect();
            let sets = docs.par_iter().map(|d| self.chunk_document(d)).collect::<Result<Vec<_>>>()?;
            let labels: Vec<Vec<usize>> = docs.iter().map(|d| d.labels.clone()).collect();
            Ok(finetune_batches(&sets, &labels))
        };
        let train = batches(Split::Train)?;
        let validation = batches(Split::Validation)?;
        let mut enc = ToyEncoder::new(self.config.toy_encoder_config())?;
        let history = enc.finetune(&train, &validation, &self.config.train_config("encoder"))?;
        self.write(Stage::Finetune, ENCODER, &enc.to_checkpoint()?.to_bytes())?;
        self.write(Stage::Finetune, FINETUNE_HISTORY, &to_jsonl(&history)?)
    }

    pub fn toy_encoder(&self) -> Result<ToyEncoder> {
        let ck = Checkpoint::from_bytes(&self.read(ENCODER)?, ENCODER_MAGIC)?;
        let enc = ToyEncoder::from_checkpoint(&ck)?;
        if enc.config != self.config.toy_encoder_config() {
            return Err(Error::Dependency(format!("{ENCODER} does not match the encoder config")));
        }
        Ok(enc)
    }

    /// Encoder answering chunk queries, or `None` for the precomputed backend.
    pub fn live_encoder(&self) -> Result<Option<Box<dyn ChunkEncoder>>> {
        Ok(match self.config.encoder.backend {
            Backend::Toy => Some(Box::new(self.toy_encoder()?)),
            Backend::Hash => Some(Box::new(HashEncoder::new(HashEncoderConfig {
                dim: self.config.encoder.dim,
                num_labels: self.config.num_labels,
                task: self.config.task,
                seed: crate::config::derive_seed(self.config.seed, "encoder"),
            })?)),
            Backend::Precomputed => None,
        })
    }

    fn stage_embed(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let store = match self.live_encoder()? {
            Some(enc) => {
                let docs = corpus
                    .documents
                    .par_iter()
                    .map(|d| extract_document(&self.chunk_document(d)?, enc.as_ref()))
                    .collect::<Result<Vec<_>>>()?;
                let mut store = EmbeddingStore::new(enc.dim() as u32, enc.layers() as u32, enc.num_labels() as u32);
                for d in &docs {
                    push_to_store(&mut store, d)?;
                }
                store
            }
            None => self.import_store(&corpus)?,
        };
        self.write(Stage::Embed, EMBEDDINGS, &store.to_bytes())
    }

    /// Checks an external store against the corpus chunking and label space.
    fn import_store(&self, corpus: &Corpus) -> Result<EmbeddingStore> {
        let path = self.config.encoder.store.as_ref().ok_or_else(|| Error::config("encoder.store is not set"))?;
        let store = EmbeddingStore::load(path)?;
        if store.layers as usize != EXTRACTED_LAYERS || store.num_labels as usize != self.config.num_labels {
            return Err(Error::format(format!(
                "store has l = {}, u = {}; expected l = {EXTRACTED_LAYERS}, u = {}",
                store.layers, store.num_labels, self.config.num_labels
            )));
        }
        if store.dim as usize != self.config.encoder.dim {
            return Err(Error::format(format!("store dim {} differs from encoder.dim {}", store.dim, self.config.encoder.dim)));
        }
        let grouped = documents_from_store(&store)?;
        for d in &corpus.documents {
            let want = self.chunk_document(d)?.len();
            let got = grouped.get(&d.id).map_or(0, DocEmbedding::num_chunks);
            if got != want {
                return Err(Error::Lookup(format!("store holds {got} chunks for {:?}, chunking gives {want}", d.id)));
            }
        }
        Ok(store)
    }

    pub fn embeddings(&self) -> Result<BTreeMap<String, DocEmbedding>> {
        documents_from_store(&EmbeddingStore::from_bytes(&self.read(EMBEDDINGS)?)?)
    }

    fn rows(&self, emb: &BTreeMap<String, DocEmbedding>, doc_id: &str) -> Result<Mat> {
        emb.get(doc_id)
            .ok_or_else(|| Error::Lookup(format!("no embeddings for document {doc_id:?}")))?
            .rows(self.config.p(), self.config.combine)
    }

    fn stage_cluster(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let emb = self.embeddings()?;
        let train: Vec<Mat> = corpus
            .split(Split::Train)
            .map(|d| self.rows(&emb, &d.id))
            .collect::<Result<_>>()?;
        if train.is_empty() {
            return Err(Error::validation("no training documents to cluster"));
        }
        let views: Vec<_> = train.iter().map(|m| m.view()).collect();
        let stacked = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::validation(e.to_string()))?;
        let model = ClusterModel::fit(&stacked, &self.config.structurer_config())?;
        let labels = corpus
            .documents
            .iter()
            .map(|d| model.assign(&d.id, &self.rows(&emb, &d.id)?))
            .collect::<Result<Vec<_>>>()?;
        self.write(Stage::Cluster, CLUSTER, &model.to_checkpoint()?.to_bytes())?;
        self.write(Stage::Cluster, STRUCTURE, &to_jsonl(&labels)?)
    }

    pub fn cluster_model(&self) -> Result<ClusterModel> {
        ClusterModel::from_checkpoint(&Checkpoint::from_bytes(&self.read(CLUSTER)?, CLUSTER_MAGIC)?)
    }

    pub fn structure(&self) -> Result<Option<BTreeMap<String, Vec<i32>>>> {
        if !self.config.structure.enabled {
            return Ok(None);
        }
        let recs: Vec<StructureLabels> = from_jsonl(&self.read(STRUCTURE)?, STRUCTURE)?;
        Ok(Some(recs.into_iter().map(|r| (r.doc_id, r.labels)).collect()))
    }

    /// Head inputs for every document, in corpus order.
    pub fn documents(&self, corpus: &Corpus) -> Result<Vec<DocInputs>> {
        let emb = self.embeddings()?;
        let structure = self.structure()?;
        corpus
            .documents
            .iter()
            .map(|d| {
                let rows = self.rows(&emb, &d.id)?;
                let labels = match &structure {
                    Some(map) => {
                        let l = map
                            .get(&d.id)
                            .ok_or_else(|| Error::Lookup(format!("no structure labels for {:?}", d.id)))?;
                        if l.len() != rows.nrows() {
                            return Err(Error::format(format!("structure labels of {:?} do not match its chunks", d.id)));
                        }
                        Some(l.clone())
                    }
                    None => None,
                };
                Ok(DocInputs {
                    doc_id: d.id.clone(),
                    split: d.split,
                    labels: d.labels.clone(),
                    rows,
                    structure: labels,
                })
            })
            .collect()
    }

    fn stage_train(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let docs = self.documents(&corpus)?;
        let pick = |s: Split| docs.iter().filter(|d| d.split == s).cloned().collect::<Vec<_>>();
        let (head, history) = train_head(&self.config, &pick(Split::Train), &pick(Split::Validation))?;
        self.write(Stage::Train, HEAD, &head.to_checkpoint()?.to_bytes())?;
        self.write(Stage::Train, HEAD_HISTORY, &to_jsonl(&history)?)
    }

    pub fn head(&self) -> Result<Head> {
        let head = Head::from_checkpoint(&Checkpoint::from_bytes(&self.read(HEAD)?, HEAD_MAGIC)?)?;
        if head.config != self.config.head_config(self.config.structure.k_cap) {
            return Err(Error::Dependency(format!("{HEAD} does not match the head config")));
        }
        Ok(head)
    }

    fn stage_predict(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let docs = self.documents(&corpus)?;
        let head = self.head()?;
        let k_cap = head.config.k_cap;
        let records = docs
            .par_iter()
            .map(|d| {
                let ex = d.example(k_cap);
                let o = head.forward(&ex.x, &ex.s_vec, None)?.o;
                Ok(PredictionRecord {
                    doc_id: d.doc_id.clone(),
                    split: d.split,
                    gold: d.labels.clone(),
                    predicted: predict(&o, head.config.task),
                    probs: o,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.write(Stage::Predict, PREDICTIONS, &to_jsonl(&records)?)
    }

    pub fn predictions(&self) -> Result<Vec<PredictionRecord>> {
        from_jsonl(&self.read(PREDICTIONS)?, PREDICTIONS)
    }

    fn stage_explain(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let docs = self.documents(&corpus)?;
        let head = self.head()?;
        let encoder = self
            .live_encoder()?
            .ok_or_else(|| Error::Unsupported("sentence occlusion needs a live encoder".into()))?;
        let preds: BTreeMap<String, PredictionRecord> =
            self.predictions()?.into_iter().map(|p| (p.doc_id.clone(), p)).collect();
        let orse = &self.config.orse;
        let selected: Vec<(&Document, &DocInputs)> = corpus
            .documents
            .iter()
            .zip(&docs)
            .filter(|(d, _)| orse.splits.contains(&d.split))
            .filter(|(d, _)| !orse.correct_only || preds.get(&d.id).is_some_and(|p| p.predicted == p.gold))
            .collect();
        let per_doc = selected
            .par_iter()
            .map(|(doc, inputs)| {
                let tokens = tokenize(&doc.text, self.config.vocab_size);
                let set = chunk(&doc.id, &tokens, self.config.chunk_size, self.config.chunk_overlap)?;
                let spans = split_sentences(&doc.text);
                let assignments = assign_sentences(&set, &tokens, &spans);
                let input = DocumentInput {
                    doc_id: &doc.id,
                    text: &doc.text,
                    spans: &spans,
                    chunk_set: &set,
                    assignments: &assignments,
                    rows: &inputs.rows,
                    structure: inputs.structure.as_deref(),
                };
                explain_document(&head, encoder.as_ref(), &input, &orse.ks)
            })
            .collect::<Result<Vec<_>>>()?;
        let all: Vec<Explanation> = per_doc.into_iter().flatten().collect();
        self.write(Stage::Explain, EXPLANATIONS, &to_jsonl(&all)?)
    }

    pub fn explanations(&self) -> Result<Vec<Explanation>> {
        from_jsonl(&self.read(EXPLANATIONS)?, EXPLANATIONS)
    }

    fn stage_eval_cls(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let report = cls_reports(&self.predictions()?, corpus.num_labels)?;
        let mut json = serde_json::to_vec_pretty(&report)?;
        json.push(b'\n');
        self.write(Stage::EvalCls, CLS_REPORT, &json)?;
        self.write(Stage::EvalCls, CLS_TABLE, cls_table(&report).as_bytes())
    }

    pub fn cls_report(&self) -> Result<BTreeMap<Split, ClsReport>> {
        Ok(serde_json::from_slice(&self.read(CLS_REPORT)?)?)
    }

    fn stage_eval_expl(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let golds = self.expert(&corpus)?;
        let reports = expl_reports(&self.explanations()?, &golds);
        let mut json = serde_json::to_vec_pretty(&reports)?;
        json.push(b'\n');
        self.write(Stage::EvalExpl, EXPL_REPORT, &json)?;
        let mut table = String::new();
        for (k, r) in &reports {
            table.push_str(&format!("k = {k}\n{}\n", r.grid(3)));
        }
        self.write(Stage::EvalExpl, EXPL_TABLE, table.as_bytes())
    }
}

/// Per-split classification reports from prediction records.
pub fn cls_reports(preds: &[PredictionRecord], num_labels: usize) -> Result<BTreeMap<Split, ClsReport>> {
    let mut out = BTreeMap::new();
    for split in Split::ALL {
        let rows: Vec<&PredictionRecord> = preds.iter().filter(|p| p.split == split).collect();
        if rows.is_empty() {
            continue;
        }
        let p: Vec<Vec<usize>> = rows.iter().map(|r| r.predicted.clone()).collect();
        let g: Vec<Vec<usize>> = rows.iter().map(|r| r.gold.clone()).collect();
        out.insert(split, classification_report(&p, &g, num_labels)?);
    }
    Ok(out)
}

pub fn cls_table(reports: &BTreeMap<Split, ClsReport>) -> String {
    let mut s = format!("{:<12}{:>10}{:>10}{:>10}\n", "split", "accuracy", "micro-F1", "macro-F1");
    for (split, r) in reports {
        s.push_str(&format!(
            "{:<12}{:>10.4}{:>10.4}{:>10.4}\n",
            split.to_string(),
            r.accuracy,
            r.micro_f1,
            r.macro_f1
        ));
    }
    s
}

/// One overlap report per `k`, keyed by its decimal form.
pub fn expl_reports(explanations: &[Explanation], golds: &[ExpertExplanation]) -> BTreeMap<String, ExplReport> {
    let mut by_k: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    for e in explanations {
        by_k.entry(format!("{}", e.k)).or_default().insert(e.doc_id.clone(), e.text());
    }
    by_k.into_iter().map(|(k, m)| (k, explanation_report(&m, golds))).collect()
}
