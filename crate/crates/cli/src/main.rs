use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mesc::config::{DataConfig, RunConfig};
use mesc::corpus::{parse_corpus, read_ildc_csv, read_lexglue_jsonl, save_corpus, Corpus, LoadOptions, Split, Task};
use mesc::encoder::Backend;
use mesc::pipeline::{Pipeline, Stage};
use mesc::synth::SyntheticSpec;
use mesc::{Error, Result};

#[derive(Parser)]
#[command(name = "mesc", version, about = "Hierarchical long-document classification and explanation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed (and MESC_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory holding every artifact.
    #[arg(long, default_value = "mesc-run")]
    out: PathBuf,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long)]
    threads: Option<usize>,
    /// Accept artifacts produced under a different config.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Ildc,
    Lexglue,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Binary,
    Multiclass,
    Multilabel,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Binary => Task::Binary,
            TaskArg::Multiclass => Task::Multiclass,
            TaskArg::Multilabel => Task::Multilabel,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Toy,
    Hash,
    Precomputed,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raw dataset file to corpus JSONL, or load the configured corpus into the run directory.
    Ingest {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: Format,
        #[arg(long, value_enum, default_value = "binary")]
        task: TaskArg,
        /// Split assigned to every record of a LexGLUE file.
        #[arg(long, default_value = "train")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Generate the synthetic planted-structure corpus into the run directory.
    Synth {
        #[arg(long)]
        n_docs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune the toy chunk encoder.
    Finetune {
        #[command(flatten)]
        common: Common,
    },
    /// Extract per-chunk layer embeddings.
    Embed {
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
        /// Embedding store for the precomputed backend.
        #[arg(long)]
        store: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit the chunk clusterer and label every document.
    Cluster {
        #[command(flatten)]
        common: Common,
    },
    /// Train the document head.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Predict labels for every document.
    Predict {
        #[command(flatten)]
        common: Common,
    },
    /// Rank chunks and sentences and write extractive explanations.
    Explain {
        /// Fractions of sentences to keep; repeatable.
        #[arg(long = "k")]
        ks: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Classification report per split.
    EvalCls {
        #[command(flatten)]
        common: Common,
    },
    /// Overlap scores of explanations against expert annotations.
    EvalExpl {
        #[command(flatten)]
        common: Common,
    },
    /// Every stage in order, skipping those already up to date.
    Run {
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Validation(_) | Error::Parse { .. } | Error::Unsupported(_) => 2,
        Error::Dependency(_) => 3,
        Error::Numerical(_) => 4,
        _ => 1,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_env()?;
            cfg
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn set_threads(common: &Common) -> Result<()> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::config("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

/// Runs one stage in the run directory and prints the artifacts it wrote.
fn stage(common: &Common, cfg: RunConfig, stage: Stage) -> Result<Pipeline> {
    set_threads(common)?;
    let p = Pipeline::new(cfg, &common.out, common.force)?;
    p.execute(stage)?;
    for name in p.outputs(stage) {
        println!("{}", p.path(name).display());
    }
    Ok(p)
}

fn ingest_file(input: &Path, format: Format, task: Task, split: &str, out: &Path) -> Result<()> {
    let file = std::fs::File::open(input)?;
    let reader = std::io::BufReader::new(file);
    let opts = LoadOptions::default();
    let corpus = match format {
        Format::Jsonl => parse_corpus(reader, task, &opts)?,
        Format::Ildc => Corpus::from_records(read_ildc_csv(reader)?, task, &opts)?,
        Format::Lexglue => {
            let split: Split = serde_json::from_value(serde_json::Value::String(split.to_string()))
                .map_err(|_| Error::config(format!("unknown split {split:?}")))?;
            let prefix = input.file_stem().and_then(|s| s.to_str()).unwrap_or("doc");
            Corpus::from_records(read_lexglue_jsonl(reader, split, prefix)?, task, &opts)?
        }
    };
    save_corpus(&corpus, out)?;
    eprintln!("{} documents, {} labels: {:?}", corpus.documents.len(), corpus.num_labels, corpus.split_counts());
    println!("{}", out.display());
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest {
            input: Some(input),
            format,
            task,
            split,
            common,
        } => ingest_file(&input, format, task.into(), &split, &common.out),
        Command::Ingest { input: None, common, .. } => {
            let cfg = load_config(&common)?;
            stage(&common, cfg, Stage::Corpus).map(drop)
        }
        Command::Synth { n_docs, common } => {
            let mut cfg = load_config(&common)?;
            if common.config.is_none() {
                cfg.data = DataConfig::Synthetic(SyntheticSpec::default());
            }
            match &mut cfg.data {
                DataConfig::Synthetic(spec) => {
                    if let Some(n) = n_docs {
                        spec.n_docs = n;
                    }
                }
                DataConfig::Corpus { .. } => return Err(Error::config("synth needs a synthetic data source")),
            }
            stage(&common, cfg, Stage::Corpus).map(drop)
        }
        Command::Finetune { common } => {
            let cfg = load_config(&common)?;
            stage(&common, cfg, Stage::Finetune).map(drop)
        }
        Command::Embed { backend, store, common } => {
            let mut cfg = load_config(&common)?;
            if let Some(b) = backend {
                cfg.encoder.backend = match b {
                    BackendArg::Toy => Backend::Toy,
                    BackendArg::Hash => Backend::Hash,
                    BackendArg::Precomputed => Backend::Precomputed,
                };
            }
            if store.is_some() {
                cfg.encoder.store = store;
            }
            stage(&common, cfg, Stage::Embed).map(drop)
        }
        Command::Cluster { common } => {
            let cfg = load_config(&common)?;
            stage(&common, cfg, Stage::Cluster).map(drop)
        }
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            stage(&common, cfg, Stage::Train).map(drop)
        }
        Command::Predict { common } => {
            let cfg = load_config(&common)?;
            stage(&common, cfg, Stage::Predict).map(drop)
        }
        Command::Explain { ks, common } => {
            let mut cfg = load_config(&common)?;
            if !ks.is_empty() {
                cfg.orse.ks = ks;
            }
            stage(&common, cfg, Stage::Explain).map(drop)
        }
        Command::EvalCls { common } => {
            let cfg = load_config(&common)?;
            let p = stage(&common, cfg, Stage::EvalCls)?;
            print!("{}", String::from_utf8_lossy(&p.read(mesc::pipeline::CLS_TABLE)?));
            Ok(())
        }
        Command::EvalExpl { common } => {
            let cfg = load_config(&common)?;
            stage(&common, cfg, Stage::EvalExpl).map(drop)
        }
        Command::Run { common } => {
            set_threads(&common)?;
            let p = Pipeline::new(load_config(&common)?, &common.out, common.force)?;
            let ran = p.run()?;
            let names: Vec<&str> = ran.iter().map(|s| s.name()).collect();
            eprintln!("ran: {}", if names.is_empty() { "nothing (up to date)".to_string() } else { names.join(", ") });
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
