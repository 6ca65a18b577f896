//! Run configuration shared by every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chunker::validate_window;
use crate::corpus::{check_label_count, Split, Task};
use crate::embedder::LayerCombine;
use crate::encoder::{AttentionMode, Backend, ToyEncoderConfig, EXTRACTED_LAYERS};
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::orse::check_k;
use crate::structurer::StructurerConfig;
use crate::synth::SyntheticSpec;
use crate::trainer::TrainConfig;

/// Environment variable overriding `seed`.
pub const SEED_ENV: &str = "MESC_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    Corpus {
        path: PathBuf,
        #[serde(default)]
        expert: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub backend: Backend,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub mode: AttentionMode,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Embedding store read by the precomputed backend.
    pub store: Option<PathBuf>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            backend: Backend::Toy,
            dim: 64,
            heads: 4,
            layers: 2,
            ffn_mult: 4,
            mode: AttentionMode::Bidirectional,
            epochs: 4,
            lr: 3.5e-6,
            batch_size: 1,
            store: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructureSection {
    pub enabled: bool,
    pub min_cluster_size: usize,
    pub min_samples: Option<usize>,
    pub reduced_dim: usize,
    pub k_cap: usize,
    pub max_fit_points: Option<usize>,
}

impl Default for StructureSection {
    fn default() -> Self {
        StructureSection {
            enabled: true,
            min_cluster_size: 15,
            min_samples: None,
            reduced_dim: 64,
            k_cap: 32,
            max_fit_points: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    /// Transformer layers `e`.
    pub layers: usize,
    /// Attention heads `h`.
    pub heads: usize,
    pub ffn_t_width: usize,
    pub ffn_i_width: usize,
    pub max_positions: usize,
    pub use_positions: bool,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for HeadSection {
    fn default() -> Self {
        HeadSection {
            layers: 2,
            heads: 8,
            ffn_t_width: 128,
            ffn_i_width: 32,
            max_positions: 512,
            use_positions: true,
            epochs: 5,
            lr: 3.5e-6,
            batch_size: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrseSection {
    pub ks: Vec<f64>,
    /// Splits whose documents are explained.
    pub splits: Vec<Split>,
    /// Explain only documents whose prediction matches the gold label.
    pub correct_only: bool,
}

impl Default for OrseSection {
    fn default() -> Self {
        OrseSection {
            ks: vec![0.2, 0.3, 0.4],
            splits: vec![Split::Test, Split::Expert],
            correct_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub num_labels: usize,
    pub data: DataConfig,
    pub vocab_size: u32,
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    pub encoder: EncoderSection,
    /// Layers concatenated per chunk; defaults to 4 (bidirectional) or 2 (causal).
    pub p: Option<usize>,
    pub combine: LayerCombine,
    pub structure: StructureSection,
    pub head: HeadSection,
    pub orse: OrseSection,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Binary,
            num_labels: 2,
            data: DataConfig::Synthetic(SyntheticSpec::default()),
            vocab_size: crate::tokenizer::DEFAULT_VOCAB_SIZE,
            chunk_size: 512,
            chunk_overlap: 90,
            encoder: EncoderSection::default(),
            p: None,
            combine: LayerCombine::Concat,
            structure: StructureSection::default(),
            head: HeadSection::default(),
            orse: OrseSection::default(),
            seed: 0,
        }
    }
}

/// Independent stream seed for one component.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        Ok(cfg)
    }

    /// Reads a JSON config and applies the `MESC_SEED` override.
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_json(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn p(&self) -> usize {
        self.p.unwrap_or(match self.encoder.mode {
            AttentionMode::Bidirectional => 4,
            AttentionMode::Causal => 2,
        })
    }

    pub fn row_dim(&self) -> usize {
        match self.combine {
            LayerCombine::Concat => self.p() * self.encoder.dim,
            LayerCombine::Sum => self.encoder.dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_label_count(self.task, self.num_labels)?;
        validate_window(self.chunk_size, self.chunk_overlap)?;
        if let DataConfig::Synthetic(spec) = &self.data {
            spec.validate()?;
            if spec.n_labels != self.num_labels || spec.task() != self.task {
                return Err(Error::config("synthetic spec disagrees with task/num_labels"));
            }
        }
        let p = self.p();
        if p == 0 || p > EXTRACTED_LAYERS {
            return Err(Error::config(format!("p = {p} must lie in 1..={EXTRACTED_LAYERS}")));
        }
        match self.encoder.backend {
            Backend::Toy => self.toy_encoder_config().validate()?,
            Backend::Hash => {
                if self.encoder.dim == 0 {
                    return Err(Error::config("encoder dim must be positive"));
                }
            }
            Backend::Precomputed => {
                if self.encoder.store.is_none() {
                    return Err(Error::config("precomputed backend needs encoder.store"));
                }
            }
        }
        self.train_config("encoder").validate()?;
        self.head_train_config().validate()?;
        self.head_config(self.structure.k_cap).validate()?;
        if self.structure.enabled {
            if self.structure.reduced_dim == 0 || self.structure.reduced_dim >= self.row_dim() {
                return Err(Error::config(format!(
                    "reduced_dim {} must lie in 1..{}",
                    self.structure.reduced_dim,
                    self.row_dim()
                )));
            }
            if self.structure.min_cluster_size < 2 || self.structure.min_samples == Some(0) {
                return Err(Error::config("min_cluster_size must be at least 2 and min_samples positive"));
            }
        }
        for &k in &self.orse.ks {
            check_k(k)?;
        }
        Ok(())
    }

    pub fn toy_encoder_config(&self) -> ToyEncoderConfig {
        ToyEncoderConfig {
            vocab_size: self.vocab_size,
            chunk_size: self.chunk_size,
            dim: self.encoder.dim,
            heads: self.encoder.heads,
            layers: self.encoder.layers,
            ffn_mult: self.encoder.ffn_mult,
            mode: self.encoder.mode,
            num_labels: self.num_labels,
            task: self.task,
            seed: derive_seed(self.seed, "encoder"),
        }
    }

    pub fn structurer_config(&self) -> StructurerConfig {
        StructurerConfig {
            min_cluster_size: self.structure.min_cluster_size,
            min_samples: self.structure.min_samples,
            reduced_dim: self.structure.reduced_dim,
            k_cap: self.structure.k_cap,
            max_fit_points: self.structure.max_fit_points,
            seed: derive_seed(self.seed, "structure"),
        }
    }

    pub fn head_config(&self, k_cap: usize) -> HeadConfig {
        HeadConfig {
            input_dim: self.row_dim(),
            layers: self.head.layers,
            heads: self.head.heads,
            ffn_t_width: self.head.ffn_t_width,
            ffn_i_width: self.head.ffn_i_width,
            num_labels: self.num_labels,
            task: self.task,
            max_positions: self.head.max_positions,
            k_cap,
            use_positions: self.head.use_positions,
            bypass_attention: false,
            seed: derive_seed(self.seed, "head"),
        }
    }

    pub fn train_config(&self, stream: &str) -> TrainConfig {
        TrainConfig {
            epochs: self.encoder.epochs,
            lr: self.encoder.lr,
            seed: derive_seed(self.seed, &format!("{stream}.shuffle")),
            batch_size: self.encoder.batch_size,
            ..TrainConfig::default()
        }
    }

    pub fn head_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.head.epochs,
            lr: self.head.lr,
            seed: derive_seed(self.seed, "head.shuffle"),
            batch_size: self.head.batch_size,
            ..TrainConfig::default()
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        Ok(())
    }
}
