//! Command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde_json::json;

use crate::config::{load_config, ConfigError, ExperimentConfig};
use crate::corpus::{self, Vocabulary};
use crate::embeddings::{self, ReductionMethod};
use crate::federation::{self, RoundReport, RunSettings};
use crate::metrics::{self, evaluate};
use crate::model::{init_params, load_checkpoint, save_checkpoint, ModelParameters};
use crate::seed;
use crate::warmstart::{self, PretrainSettings};

/// Environment fallback for `--threads`.
pub const THREADS_ENV: &str = "FEDTEXT_THREADS";

/// Header of the per-round curves file.
pub const CURVES_HEADER: &str = "round,split,loss,accuracy,accuracy_no_oov_no_eos";

#[derive(Debug, Parser)]
#[command(
    name = "fedtext",
    version,
    about = "Federated next-word prediction experiments"
)]
pub struct Cli {
    /// Worker threads for client updates (falls back to FEDTEXT_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a frequency-ranked vocabulary file from a corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        num_words: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align pretrained vectors to a vocabulary and reduce them.
    ReduceEmbeddings {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// pca | ppa | pp_pca_pp
        #[arg(long)]
        method: String,
        /// Output dimension (not used by ppa).
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, default_value_t = embeddings::DEFAULT_PPA_D)]
        ppa_d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Centrally pretrain a model.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Run federated training.
    Federate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint and print metrics as JSON.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Vocabulary file; defaults to the config's data.vocab.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Runtime(#[from] crate::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Runtime(crate::Error::Config(_)) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime<E: Into<crate::Error>>(e: E) -> CliError {
    CliError::Runtime(e.into())
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| {
        CliError::Runtime(crate::Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )))
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            v.trim().parse().map(Some).map_err(|_| {
                CliError::Usage(format!("{THREADS_ENV} must be an integer, got {v:?}"))
            })
        }
        Err(_) => Ok(None),
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let threads = thread_count(cli.threads)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::BuildVocab {
            corpus,
            num_words,
            out,
        } => cmd_build_vocab(&corpus, num_words, &out),
        Command::ReduceEmbeddings {
            embeddings,
            vocab,
            method,
            dim,
            ppa_d,
            seed,
            out,
        } => cmd_reduce_embeddings(&embeddings, &vocab, &method, dim, ppa_d, seed, &out),
        Command::Pretrain { config, out_dir } => cmd_pretrain(&config, &out_dir),
        Command::Federate { config, out_dir } => cmd_federate(&config, &out_dir),
        Command::Evaluate {
            checkpoint,
            corpus,
            config,
            vocab,
        } => {
            let result = cmd_evaluate(&checkpoint, &corpus, &config, vocab.as_deref())?;
            println!(
                "{}",
                serde_json::to_string_pretty(&result).expect("serializes")
            );
            Ok(())
        }
    })
}

pub fn cmd_build_vocab(corpus_path: &Path, num_words: usize, out: &Path) -> Result<(), CliError> {
    if num_words == 0 {
        return Err(CliError::Usage("--num-words must be >= 1".into()));
    }
    let vocab = corpus::build_vocab(corpus_path, num_words).map_err(runtime)?;
    vocab.save(out).map_err(runtime)?;
    println!("vocab_size {}", vocab.len());
    Ok(())
}

/// Coverage and output shape of a reduction run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReduceSummary {
    pub coverage: f64,
    pub rows: usize,
    pub dim: usize,
}

pub fn reduce_embeddings(
    embeddings_path: &Path,
    vocab_path: &Path,
    method: &str,
    dim: Option<usize>,
    ppa_d: usize,
    rng_seed: u64,
    out: &Path,
) -> Result<ReduceSummary, CliError> {
    let method: ReductionMethod = method
        .parse()
        .map_err(|e: embeddings::EmbeddingError| CliError::Usage(e.to_string()))?;
    let dim = match (method, dim) {
        (ReductionMethod::Ppa, _) => 0,
        (_, Some(d)) => d,
        (_, None) => return Err(CliError::Usage(format!("--dim is required for {method:?}"))),
    };
    let vocab = Vocabulary::load(vocab_path).map_err(runtime)?;
    let table = embeddings::load_embedding_table(embeddings_path).map_err(runtime)?;
    let aligned = embeddings::build_embedding_matrix(&vocab, &table, table.dim(), rng_seed)
        .map_err(runtime)?;
    let reduced = embeddings::reduce(&aligned.matrix, method, dim, ppa_d)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    reduced.write_text(out, &vocab).map_err(runtime)?;
    Ok(ReduceSummary {
        coverage: aligned.coverage,
        rows: reduced.vocab_size(),
        dim: reduced.dim(),
    })
}

pub fn cmd_reduce_embeddings(
    embeddings_path: &Path,
    vocab_path: &Path,
    method: &str,
    dim: Option<usize>,
    ppa_d: usize,
    rng_seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let s = reduce_embeddings(
        embeddings_path,
        vocab_path,
        method,
        dim,
        ppa_d,
        rng_seed,
        out,
    )?;
    println!("coverage {:.6}", s.coverage);
    println!("wrote {} x {} to {}", s.rows, s.dim, out.display());
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializes");
    fs::write(path, text + "\n").map_err(io_at(path))
}

/// Embedding initialization from `embeddings.path`, aligned to `vocab`.
fn embedding_init(
    cfg: &ExperimentConfig,
    vocab: &Vocabulary,
) -> Result<Option<embeddings::EmbeddingMatrix>, CliError> {
    let Some(path) = &cfg.embeddings_path else {
        return Ok(None);
    };
    let table = embeddings::load_embedding_table(path).map_err(runtime)?;
    if table.dim() != cfg.model.embedding_dim {
        return Err(CliError::Config(ConfigError::Invalid {
            key: "embeddings.path".into(),
            message: format!(
                "embeddings have dimension {}, model.embedding_dim is {}",
                table.dim(),
                cfg.model.embedding_dim
            ),
        }));
    }
    let seed = seed::derive(cfg.federation.rng_seed, "embedding-init", &[]);
    let aligned =
        embeddings::build_embedding_matrix(vocab, &table, table.dim(), seed).map_err(runtime)?;
    info!("pretrained embedding coverage {:.4}", aligned.coverage);
    Ok(Some(aligned.matrix))
}

pub fn cmd_pretrain(config_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let cfg = load_config(config_path)?;
    let corpus_path = cfg
        .require(&cfg.pretrain.corpus, "pretrain.corpus")?
        .to_path_buf();
    fs::create_dir_all(out_dir).map_err(io_at(out_dir))?;

    let vocab = match &cfg.data.vocab {
        Some(p) => Vocabulary::load(p).map_err(runtime)?,
        None => corpus::build_vocab(&corpus_path, cfg.pretrain.num_words).map_err(runtime)?,
    };
    let vocab_out = out_dir.join("vocab.txt");
    vocab.save(&vocab_out).map_err(runtime)?;

    let settings = PretrainSettings {
        model: cfg.model_config(vocab.len()),
        epochs: cfg.pretrain.epochs,
        batch_size: cfg.pretrain.batch_size,
        rng_seed: cfg.federation.rng_seed,
        hyper: cfg.optimizer,
        clip_norm: cfg.clip_norm,
    };
    let init = embedding_init(&cfg, &vocab)?;
    let outcome = warmstart::central_pretrain(&corpus_path, &settings, &vocab, init.as_ref())
        .map_err(runtime)?;
    let ckpt = out_dir.join("pretrained.ckpt");
    save_checkpoint(&outcome.params, &ckpt).map_err(runtime)?;

    let last = outcome.epochs.last().map(|t| {
        json!({
            "loss": t.mean_loss(),
            "accuracy": t.counts.accuracy_or_zero(metrics::MaskMode::All),
            "accuracy_no_oov_no_eos": t.counts.accuracy_or_zero(metrics::MaskMode::NoOovNoEos),
        })
    });
    write_json(
        &out_dir.join("manifest.json"),
        &json!({
            "command": "pretrain",
            "config": cfg,
            "config_hash": cfg.hash(),
            "seed": cfg.federation.rng_seed,
            "vocab_size": vocab.len(),
            "param_count": outcome.params.count_params(),
            "checkpoint": ckpt,
            "vocab": vocab_out,
            "final_epoch": last,
        }),
    )?;
    println!(
        "pretrained {} epochs; checkpoint {}",
        settings.epochs,
        ckpt.display()
    );
    Ok(())
}

/// Renders reports as the curves CSV.
pub fn curves_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for r in reports {
        let splits =
            std::iter::once(("train", &r.train)).chain(r.validation.as_ref().map(|v| ("val", v)));
        for (name, m) in splits {
            writeln!(
                out,
                "{},{name},{},{},{}",
                r.round, m.loss, m.accuracy, m.accuracy_no_oov_no_eos
            )
            .expect("write to String");
        }
    }
    out
}

/// Initial global weights: a warm start, pretrained embeddings, or `None`.
fn federated_init(
    cfg: &ExperimentConfig,
    vocab: &Vocabulary,
) -> Result<Option<ModelParameters<f32>>, CliError> {
    let model_config = cfg.model_config(vocab.len());
    if let (Some(ckpt), Some(src_vocab)) = (&cfg.pretrain.checkpoint, &cfg.pretrain.vocab) {
        let pretrained = load_checkpoint(ckpt, cfg.model.max_seq_len).map_err(runtime)?;
        let source = Vocabulary::load(src_vocab).map_err(runtime)?;
        let seed = seed::derive(cfg.federation.rng_seed, "transfer", &[]);
        let params =
            warmstart::transfer_weights(&pretrained, &source, vocab, seed).map_err(runtime)?;
        if params.config() != model_config {
            return Err(CliError::Config(ConfigError::Invalid {
                key: "pretrain.checkpoint".into(),
                message: format!(
                    "pretrained architecture {:?} does not match the configured model {:?}",
                    params.config(),
                    model_config
                ),
            }));
        }
        return Ok(Some(params));
    }
    match embedding_init(cfg, vocab)? {
        Some(m) => {
            let seed = federation::model_init_seed(cfg.federation.rng_seed);
            Ok(Some(
                init_params(&model_config, seed, Some(&m)).map_err(runtime)?,
            ))
        }
        None => Ok(None),
    }
}

pub fn cmd_federate(config_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let cfg = load_config(config_path)?;
    let train_path = cfg
        .require(&cfg.data.train_corpus, "data.train_corpus")?
        .to_path_buf();
    fs::create_dir_all(out_dir).map_err(io_at(out_dir))?;
    let fed = cfg.federation;

    let vocab = match &cfg.data.vocab {
        Some(p) => Vocabulary::load(p).map_err(runtime)?,
        None => corpus::build_vocab(&train_path, cfg.data.num_words).map_err(runtime)?,
    };
    let vocab_out = out_dir.join("vocab.txt");
    vocab.save(&vocab_out).map_err(runtime)?;

    let seq_len = cfg.model.max_seq_len;
    let clients = corpus::load_clients(
        &train_path,
        &vocab,
        seq_len,
        fed.per_client_cap,
        fed.rng_seed,
    )
    .map_err(runtime)?;
    if clients.len() < fed.clients_per_round {
        return Err(CliError::Config(ConfigError::Invalid {
            key: "federation.clients_per_round".into(),
            message: format!(
                "{} requested but the corpus has {} clients",
                fed.clients_per_round,
                clients.len()
            ),
        }));
    }
    let eval_set = match &cfg.data.eval_corpus {
        Some(p) => corpus::build_eval_set(p, &vocab, seq_len, fed.eval_samples, fed.rng_seed)
            .map_err(runtime)?,
        None => Vec::new(),
    };
    let settings = RunSettings {
        model: cfg.model_config(vocab.len()),
        federation: fed,
        hyper: cfg.optimizer,
        clip_norm: cfg.clip_norm,
    };
    let initial = federated_init(&cfg, &vocab)?;
    info!(
        "{} clients, {} eval samples, {} parameters",
        clients.len(),
        eval_set.len(),
        settings.model.param_count()
    );
    let outcome = federation::run_training(&settings, &clients, &eval_set, initial, |r| {
        info!(
            "round {} train loss {:.4} acc {:.4}{}",
            r.round,
            r.train.loss,
            r.train.accuracy,
            r.validation
                .map(|v| format!(" | val loss {:.4} acc {:.4}", v.loss, v.accuracy))
                .unwrap_or_default()
        )
    })
    .map_err(runtime)?;

    let curves = out_dir.join("curves.csv");
    fs::write(&curves, curves_csv(&outcome.reports)).map_err(io_at(&curves))?;
    let final_ckpt = out_dir.join("final.ckpt");
    save_checkpoint(&outcome.final_params, &final_ckpt).map_err(runtime)?;
    let best_ckpt = out_dir.join("best.ckpt");
    save_checkpoint(
        outcome
            .best_params
            .as_ref()
            .unwrap_or(&outcome.final_params),
        &best_ckpt,
    )
    .map_err(runtime)?;

    let last100 = metrics::summarize_last_rounds(&outcome.reports, 100).ok();
    write_json(
        &out_dir.join("manifest.json"),
        &json!({
            "command": "federate",
            "config": cfg,
            "config_hash": cfg.hash(),
            "seed": fed.rng_seed,
            "vocab_size": vocab.len(),
            "param_count": settings.model.param_count(),
            "num_clients": clients.len(),
            "eval_samples": eval_set.len(),
            "best_round": outcome.best_round,
            "final_round": outcome.reports.last(),
            "val_accuracy_no_oov_no_eos_last_100": last100,
            "outputs": {
                "curves": curves,
                "final_checkpoint": final_ckpt,
                "best_checkpoint": best_ckpt,
                "vocab": vocab_out,
            },
        }),
    )?;
    println!(
        "{} rounds; best round {:?}; outputs in {}",
        outcome.reports.len(),
        outcome.best_round,
        out_dir.display()
    );
    Ok(())
}

pub fn cmd_evaluate(
    checkpoint: &Path,
    corpus_path: &Path,
    config_path: &Path,
    vocab_override: Option<&Path>,
) -> Result<metrics::EvalResult, CliError> {
    let cfg = load_config(config_path)?;
    let vocab_path = match vocab_override {
        Some(p) => p,
        None => cfg.require(&cfg.data.vocab, "data.vocab")?,
    };
    let vocab = Vocabulary::load(vocab_path).map_err(runtime)?;
    let params = load_checkpoint(checkpoint, cfg.model.max_seq_len).map_err(runtime)?;
    if params.embedding.nrows() != vocab.len() {
        return Err(CliError::Usage(format!(
            "checkpoint vocabulary has {} rows, vocabulary file has {} entries",
            params.embedding.nrows(),
            vocab.len()
        )));
    }
    let fed = cfg.federation;
    let data = corpus::build_eval_set(
        corpus_path,
        &vocab,
        cfg.model.max_seq_len,
        fed.eval_samples,
        fed.rng_seed,
    )
    .map_err(runtime)?;
    evaluate(&params, &data, fed.eval_batch_size).map_err(runtime)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::SplitMetrics;

    #[test]
    fn csv_has_header_and_split_rows() {
        let m = SplitMetrics {
            loss: 1.5,
            accuracy: 0.25,
            accuracy_no_oov_no_eos: 0.125,
        };
        let reports = vec![
            RoundReport {
                round: 1,
                train: m,
                validation: None,
                sampled_client_ids: vec![],
            },
            RoundReport {
                round: 2,
                train: m,
                validation: Some(m),
                sampled_client_ids: vec![],
            },
        ];
        assert_eq!(
            curves_csv(&reports),
            "round,split,loss,accuracy,accuracy_no_oov_no_eos\n\
             1,train,1.5,0.25,0.125\n\
             2,train,1.5,0.25,0.125\n\
             2,val,1.5,0.25,0.125\n"
        );
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(
            run([
                "fedtext",
                "reduce-embeddings",
                "--embeddings",
                "a",
                "--vocab",
                "b",
                "--method",
                "pca"
            ]),
            2
        );
        assert_eq!(run(["fedtext", "no-such-command"]), 2);
        assert_eq!(
            run([
                "fedtext",
                "federate",
                "--config",
                "/nonexistent/config.toml"
            ]),
            2
        );
    }

    #[test]
    fn runtime_errors_exit_1() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("v.txt");
        let code = run([
            "fedtext",
            "build-vocab",
            "--corpus",
            "/nonexistent/corpus.jsonl",
            "--num-words",
            "5",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
    }
}
