//! Chunk encoders: a trainable toy transformer, a deterministic hash
//! embedder and a loader for precomputed embeddings.
//!
//! Every backend returns the representation-token vector from each of the
//! last [`EXTRACTED_LAYERS`] hidden states plus a class-probability probe.
//! For the toy transformer the hidden states are the residual stream after
//! each sublayer, so two layers give four states.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chunker::{Chunk, ChunkSet};
use crate::corpus::Task;
use crate::error::{Error, Result};
use crate::metrics::{classification_report, ClsReport};
use crate::nn::{Graph, LayerNorm, Linear, Mat, ParamId, ParamSet, TransformerLayer, Var};
use crate::store::{Checkpoint, EmbeddingStore};
use crate::tokenizer::{stable_hash, SPECIAL};
use crate::trainer::{self, graph_loss, HistoryRecord, TrainConfig, Trainable};

pub const EXTRACTED_LAYERS: usize = 4;
pub const ENCODER_MAGIC: &[u8; 4] = b"MSEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Bidirectional,
    Causal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Toy,
    Hash,
    Precomputed,
}

impl std::str::FromStr for Backend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Backend::Toy),
            "hash" => Ok(Backend::Hash),
            "precomputed" => Ok(Backend::Precomputed),
            _ => Err(Error::config(format!("unknown encoder backend {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerEmbeddings {
    pub doc_id: String,
    pub chunk_index: usize,
    /// `l x d`; row `l - 1` is the top layer.
    pub matrix: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkProbe {
    pub probs: Vec<f64>,
}

pub trait ChunkEncoder: Sync {
    fn backend(&self) -> Backend;
    fn dim(&self) -> usize;
    fn layers(&self) -> usize {
        EXTRACTED_LAYERS
    }
    fn num_labels(&self) -> usize;
    fn task(&self) -> Task;
    fn encode_chunk(&self, chunk: &Chunk) -> Result<LayerEmbeddings>;
    fn classify_chunk(&self, chunk: &Chunk) -> Result<ChunkProbe>;

    fn encode_and_classify(&self, chunk: &Chunk) -> Result<(LayerEmbeddings, ChunkProbe)> {
        Ok((self.encode_chunk(chunk)?, self.classify_chunk(chunk)?))
    }

    /// Whether `classify_chunk` reflects token-level edits to a chunk.
    fn supports_occlusion(&self) -> bool {
        true
    }
}

fn require_tokens(chunk: &Chunk) -> Result<()> {
    if chunk.n_real == 0 {
        return Err(Error::validation(format!(
            "chunk {} of {:?} holds only padding",
            chunk.index, chunk.doc_id
        )));
    }
    Ok(())
}

fn probe_activation(g: &mut Graph, logits: Var, task: Task) -> Var {
    match task {
        Task::Multilabel => g.sigmoid(logits),
        Task::Binary | Task::Multiclass => g.softmax_rows(logits),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyEncoderConfig {
    pub vocab_size: u32,
    /// Token window `c`; bidirectional mode adds two positions for [CLS] and [SEP].
    pub chunk_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub mode: AttentionMode,
    pub num_labels: usize,
    pub task: Task,
    pub seed: u64,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        ToyEncoderConfig {
            vocab_size: crate::tokenizer::DEFAULT_VOCAB_SIZE,
            chunk_size: 512,
            dim: 64,
            heads: 4,
            layers: 2,
            ffn_mult: 4,
            mode: AttentionMode::Bidirectional,
            num_labels: 2,
            task: Task::Binary,
            seed: 0,
        }
    }
}

impl ToyEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < crate::tokenizer::MIN_VOCAB_SIZE {
            return Err(Error::config(format!("vocab_size {} too small", self.vocab_size)));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if 2 * self.layers < EXTRACTED_LAYERS {
            return Err(Error::config(format!(
                "{} layers expose fewer than {EXTRACTED_LAYERS} hidden states",
                self.layers
            )));
        }
        if self.chunk_size < 2 || self.ffn_mult == 0 {
            return Err(Error::config("chunk_size must be at least 2 and ffn_mult positive"));
        }
        crate::corpus::check_label_count(self.task, self.num_labels)?;
        Ok(())
    }

    fn positions(&self) -> usize {
        match self.mode {
            AttentionMode::Bidirectional => self.chunk_size + 2,
            AttentionMode::Causal => self.chunk_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    pub config: ToyEncoderConfig,
    params: ParamSet,
    token_embedding: ParamId,
    position_embedding: ParamId,
    embedding_norm: LayerNorm,
    blocks: Vec<TransformerLayer>,
    probe: Linear,
}

/// One chunk of a fine-tuning pass, labeled with its document's label.
#[derive(Debug, Clone)]
pub struct FinetuneBatch {
    pub doc_id: String,
    pub chunks: Vec<Chunk>,
    pub label: Vec<usize>,
}

impl ToyEncoder {
    pub fn new(config: ToyEncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let d = config.dim;
        let token_embedding = params.normal(&mut rng, "embed.token", config.vocab_size as usize, d, 0.02);
        let position_embedding = params.normal(&mut rng, "embed.position", config.positions(), d, 0.02);
        let embedding_norm = LayerNorm::new(&mut params, "embed.norm", d);
        let blocks = (0..config.layers)
            .map(|i| TransformerLayer::new(&mut params, &mut rng, &format!("layer{i}"), d, config.heads, d * config.ffn_mult))
            .collect();
        // Zero weights give uniform probabilities before fine-tuning.
        let probe = Linear::zeros(&mut params, "probe", d, config.num_labels);
        Ok(ToyEncoder {
            config,
            params,
            token_embedding,
            position_embedding,
            embedding_norm,
            blocks,
            probe,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Token ids fed to the transformer and the row holding the representation.
    fn sequence(&self, chunk: &Chunk) -> Result<(Vec<usize>, usize)> {
        require_tokens(chunk)?;
        let real = chunk.real_tokens();
        let vocab = self.config.vocab_size;
        if real.len() > self.config.chunk_size {
            return Err(Error::validation(format!(
                "chunk of {} tokens exceeds chunk_size {}",
                real.len(),
                self.config.chunk_size
            )));
        }
        if let Some(bad) = real.iter().find(|&&t| t >= vocab) {
            return Err(Error::validation(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        Ok(match self.config.mode {
            AttentionMode::Bidirectional => {
                let mut ids = Vec::with_capacity(real.len() + 2);
                ids.push(SPECIAL.cls_id as usize);
                ids.extend(real.iter().map(|&t| t as usize));
                ids.push(SPECIAL.sep_id as usize);
                (ids, 0)
            }
            AttentionMode::Causal => {
                let ids: Vec<usize> = real.iter().map(|&t| t as usize).collect();
                let rep = real.iter().rposition(|&t| t != SPECIAL.pad_id).unwrap_or(real.len() - 1);
                (ids, rep)
            }
        })
    }

    /// Records the forward pass; returns the `l x d` representation node and the probe output.
    fn forward(&self, g: &mut Graph, chunk: &Chunk) -> Result<(Var, Var)> {
        let (ids, rep) = self.sequence(chunk)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = g.param(self.token_embedding);
        let tok = g.gather_rows(tok, &ids);
        let pos = g.param(self.position_embedding);
        let pos = g.gather_rows(pos, &positions);
        let x = g.add(tok, pos);
        let mut x = self.embedding_norm.forward(g, x);
        let causal = self.config.mode == AttentionMode::Causal;
        let mut states = Vec::with_capacity(2 * self.blocks.len());
        for block in &self.blocks {
            let s = block.forward(g, x, causal);
            states.push(s.after_attention);
            states.push(s.output);
            x = s.output;
        }
        let rows: Vec<Var> = states[states.len() - EXTRACTED_LAYERS..]
            .iter()
            .map(|&s| g.select_row(s, rep))
            .collect();
        let top = rows[EXTRACTED_LAYERS - 1];
        let matrix = g.stack_rows(&rows);
        let logits = self.probe.forward(g, top);
        let probs = probe_activation(g, logits, self.config.task);
        Ok((matrix, probs))
    }

    /// Stage-1 fine-tuning: every chunk carries its document's label. Returns
    /// per-epoch chunk-level history on `train` and, if given, `validation`.
    pub fn finetune(
        &mut self,
        train: &[FinetuneBatch],
        validation: &[FinetuneBatch],
        cfg: &TrainConfig,
    ) -> Result<Vec<HistoryRecord>> {
        trainer::train(self, train, cfg, |epoch, loss, model| {
            let mut out = vec![chunk_record(epoch, "train", loss, &model.chunk_report(train)?.0)];
            if !validation.is_empty() {
                let (report, vloss) = model.chunk_report(validation)?;
                out.push(chunk_record(epoch, "validation", vloss, &report));
            }
            Ok(out)
        })
    }

    /// Chunk-level classification report and mean loss against the document labels.
    pub fn chunk_report(&self, batches: &[FinetuneBatch]) -> Result<(ClsReport, f64)> {
        let per_doc = batches
            .par_iter()
            .map(|b| {
                b.chunks
                    .iter()
                    .map(|ch| {
                        let p = self.classify_chunk(ch)?;
                        let l = trainer::loss(&p.probs, &b.label, self.config.task)?.value;
                        Ok((crate::head::predict(&p.probs, self.config.task), l))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let (mut preds, mut golds, mut loss) = (Vec::new(), Vec::new(), 0.0);
        for (b, outs) in batches.iter().zip(per_doc) {
            for (p, l) in outs {
                preds.push(p);
                golds.push(b.label.clone());
                loss += l;
            }
        }
        let report = classification_report(&preds, &golds, self.config.num_labels)?;
        Ok((report, loss / preds.len().max(1) as f64))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            magic: *ENCODER_MAGIC,
            meta: serde_json::to_string(&self.config)?,
            tensors: self
                .params
                .iter()
                .map(|(n, m)| (n.to_string(), m.clone()))
                .collect(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ToyEncoderConfig = serde_json::from_str(&ck.meta)?;
        let mut enc = ToyEncoder::new(config)?;
        load_tensors(&mut enc.params, ck)?;
        Ok(enc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, ENCODER_MAGIC)?)
    }
}

fn chunk_record(epoch: usize, split: &str, loss: f64, r: &ClsReport) -> HistoryRecord {
    HistoryRecord {
        epoch,
        split: split.into(),
        loss,
        micro_f1: r.micro_f1,
        macro_f1: r.macro_f1,
        accuracy: r.accuracy,
    }
}

/// Copies checkpoint tensors into `params`, matching names and shapes.
pub(crate) fn load_tensors(params: &mut ParamSet, ck: &Checkpoint) -> Result<()> {
    if ck.tensors.len() != params.len() {
        return Err(Error::format(format!(
            "checkpoint holds {} tensors, model expects {}",
            ck.tensors.len(),
            params.len()
        )));
    }
    let mut values = Vec::with_capacity(params.len());
    for ((name, want), (got_name, got)) in params.iter().zip(&ck.tensors) {
        if name != got_name || want.dim() != got.dim() {
            return Err(Error::format(format!(
                "tensor {got_name:?} {:?} does not match {name:?} {:?}",
                got.dim(),
                want.dim()
            )));
        }
        values.push(got.clone());
    }
    params.load_values(values).map_err(Error::Format)
}

impl Trainable for ToyEncoder {
    type Example = FinetuneBatch;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn example_loss(&self, g: &mut Graph, ex: &FinetuneBatch) -> Result<Var> {
        if ex.chunks.is_empty() {
            return Err(Error::validation(format!("document {:?} has no chunks", ex.doc_id)));
        }
        let mut losses = Vec::with_capacity(ex.chunks.len());
        for ch in &ex.chunks {
            let (_, probs) = self.forward(g, ch)?;
            losses.push(graph_loss(g, probs, &ex.label, self.config.task)?);
        }
        Ok(g.mean(&losses))
    }
}

impl ChunkEncoder for ToyEncoder {
    fn backend(&self) -> Backend {
        Backend::Toy
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn num_labels(&self) -> usize {
        self.config.num_labels
    }

    fn task(&self) -> Task {
        self.config.task
    }

    fn encode_chunk(&self, chunk: &Chunk) -> Result<LayerEmbeddings> {
        Ok(self.encode_and_classify(chunk)?.0)
    }

    fn classify_chunk(&self, chunk: &Chunk) -> Result<ChunkProbe> {
        Ok(self.encode_and_classify(chunk)?.1)
    }

    fn encode_and_classify(&self, chunk: &Chunk) -> Result<(LayerEmbeddings, ChunkProbe)> {
        let mut g = Graph::new(&self.params);
        let (matrix, probs) = self.forward(&mut g, chunk)?;
        Ok((
            LayerEmbeddings {
                doc_id: chunk.doc_id.clone(),
                chunk_index: chunk.index,
                matrix: g.value(matrix).clone(),
            },
            ChunkProbe {
                probs: g.value(probs).row(0).to_vec(),
            },
        ))
    }
}

/// Fine-tuning examples for a set of chunked documents and their labels.
pub fn finetune_batches(sets: &[ChunkSet], labels: &[Vec<usize>]) -> Vec<FinetuneBatch> {
    sets.iter()
        .zip(labels)
        .map(|(s, l)| FinetuneBatch {
            doc_id: s.doc_id.clone(),
            chunks: s.chunks.clone(),
            label: l.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HashEncoderConfig {
    pub dim: usize,
    pub num_labels: usize,
    pub task: Task,
    pub seed: u64,
}

impl Default for HashEncoderConfig {
    fn default() -> Self {
        HashEncoderConfig {
            dim: 64,
            num_labels: 2,
            task: Task::Binary,
            seed: 0,
        }
    }
}

/// Bag of hashed random token vectors; layer `j` uses its own hash stream.
/// The probe is uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct HashEncoder {
    pub config: HashEncoderConfig,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl HashEncoder {
    pub fn new(config: HashEncoderConfig) -> Result<Self> {
        if config.dim == 0 {
            return Err(Error::config("hash encoder dim must be positive"));
        }
        crate::corpus::check_label_count(config.task, config.num_labels)?;
        Ok(HashEncoder { config })
    }

    fn coordinate(&self, token: u32, layer: usize, k: usize) -> f64 {
        let key = stable_hash(&[self.config.seed.to_le_bytes(), u64::from(token).to_le_bytes()].concat());
        let h = splitmix(key ^ splitmix(((layer as u64) << 32) | k as u64));
        (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }
}

impl ChunkEncoder for HashEncoder {
    fn backend(&self) -> Backend {
        Backend::Hash
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn num_labels(&self) -> usize {
        self.config.num_labels
    }

    fn task(&self) -> Task {
        self.config.task
    }

    fn encode_chunk(&self, chunk: &Chunk) -> Result<LayerEmbeddings> {
        require_tokens(chunk)?;
        let d = self.config.dim;
        let mut matrix = Mat::zeros((EXTRACTED_LAYERS, d));
        let tokens: Vec<u32> = chunk.real_tokens().iter().copied().filter(|&t| t != SPECIAL.pad_id).collect();
        for &t in &tokens {
            for j in 0..EXTRACTED_LAYERS {
                for k in 0..d {
                    matrix[[j, k]] += self.coordinate(t, j, k);
                }
            }
        }
        if !tokens.is_empty() {
            matrix /= tokens.len() as f64;
        }
        Ok(LayerEmbeddings {
            doc_id: chunk.doc_id.clone(),
            chunk_index: chunk.index,
            matrix,
        })
    }

    fn classify_chunk(&self, chunk: &Chunk) -> Result<ChunkProbe> {
        require_tokens(chunk)?;
        let u = self.config.num_labels;
        let p = match self.config.task {
            Task::Multilabel => 0.5,
            _ => 1.0 / u as f64,
        };
        Ok(ChunkProbe { probs: vec![p; u] })
    }
}

/// Serves embeddings and probes from an [`EmbeddingStore`], keyed by
/// `(doc_id, chunk index)`. Token edits are invisible to it.
#[derive(Debug, Clone)]
pub struct PrecomputedEncoder {
    store: EmbeddingStore,
    index: HashMap<(String, usize), usize>,
    task: Task,
}

impl PrecomputedEncoder {
    pub fn new(store: EmbeddingStore, task: Task) -> Result<Self> {
        if store.dim == 0 || store.layers == 0 {
            return Err(Error::format("embedding store has zero dim or layers"));
        }
        crate::corpus::check_label_count(task, store.num_labels as usize)?;
        let mut index = HashMap::with_capacity(store.records.len());
        for (i, r) in store.records.iter().enumerate() {
            if index.insert((r.doc_id.clone(), r.chunk_index as usize), i).is_some() {
                return Err(Error::format(format!(
                    "duplicate store record {}#{}",
                    r.doc_id, r.chunk_index
                )));
            }
        }
        Ok(PrecomputedEncoder { store, index, task })
    }

    pub fn load(path: impl AsRef<Path>, task: Task) -> Result<Self> {
        Self::new(EmbeddingStore::load(path)?, task)
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    fn record(&self, chunk: &Chunk) -> Result<&crate::store::EmbeddingRecord> {
        self.index
            .get(&(chunk.doc_id.clone(), chunk.index))
            .map(|&i| &self.store.records[i])
            .ok_or_else(|| Error::Lookup(format!("no stored embedding for {}#{}", chunk.doc_id, chunk.index)))
    }
}

impl ChunkEncoder for PrecomputedEncoder {
    fn backend(&self) -> Backend {
        Backend::Precomputed
    }

    fn dim(&self) -> usize {
        self.store.dim as usize
    }

    fn layers(&self) -> usize {
        self.store.layers as usize
    }

    fn num_labels(&self) -> usize {
        self.store.num_labels as usize
    }

    fn task(&self) -> Task {
        self.task
    }

    fn encode_chunk(&self, chunk: &Chunk) -> Result<LayerEmbeddings> {
        let r = self.record(chunk)?;
        let shape = (self.layers(), self.dim());
        let matrix = Mat::from_shape_vec(shape, r.embeddings.iter().map(|&x| f64::from(x)).collect())
            .map_err(|e| Error::format(e.to_string()))?;
        Ok(LayerEmbeddings {
            doc_id: chunk.doc_id.clone(),
            chunk_index: chunk.index,
            matrix,
        })
    }

    fn classify_chunk(&self, chunk: &Chunk) -> Result<ChunkProbe> {
        let r = self.record(chunk)?;
        Ok(ChunkProbe {
            probs: r.probe.iter().map(|&x| f64::from(x)).collect(),
        })
    }

    fn supports_occlusion(&self) -> bool {
        false
    }
}
