//! `textrec` — drives the full experiment pipeline: synthetic data, infill
//! pretraining, parameter-efficient tuning, CTR evaluation, cached two-phase
//! serving benchmarks, dense retrieval, zero-shot ranking, generation, and
//! the compression suite (distill / prune / quantize / early exit).
//!
//! Every subcommand writes a TOML manifest under `<out>/manifests/` with the
//! resolved-config hash, the seed, model fingerprints, and its metrics;
//! rerunning with the same config and seed reproduces the manifest byte for
//! byte. Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Ctx;
use config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<textrec_core::Error> for CliError {
    fn from(e: textrec_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Parser)]
#[command(
    name = "textrec",
    version,
    about = "Text-based recommendation pipelines: pretrain, tune, serve, retrieve, compress"
)]
struct Cli {
    /// Experiment config file (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for artifacts and manifests.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world: corpus, CTR splits, retrieval pairs.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the language model on the synthetic corpus (text infilling).
    Pretrain {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Adapt the pretrained model to click scoring.
    Tune {
        /// fine | prompt | option | option-adapter
        #[arg(long)]
        method: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score the held-out CTR split and report AUC.
    EvalCtr {
        /// model | oracle (oracle scores with the generator's ground truth)
        #[arg(long, default_value = "model")]
        scorer: String,
        /// Tuning state produced by `tune`.
        #[arg(long)]
        state: Option<PathBuf>,
        /// Model file to score with (defaults to <out>/model.bin).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Per-request latency of a serving mode; timings go to CSV.
    ServeBench {
        /// monolithic | late | exit | quantized
        #[arg(long, default_value = "monolithic")]
        mode: String,
        /// Cached prefix depth L' for late mode.
        #[arg(long)]
        split: Option<usize>,
        /// Start every request with an empty cache (late mode).
        #[arg(long)]
        cold: bool,
        #[arg(long)]
        reps: Option<usize>,
        /// Exit layer for exit mode.
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Encode a catalog into a dense index (optionally train first).
    RetrieveBuild {
        /// seen | unseen
        #[arg(long, default_value = "seen")]
        catalog: String,
        /// Contrastive training steps before indexing (0 = none).
        #[arg(long)]
        train_steps: Option<usize>,
        /// Model file to encode with (defaults to <out>/model.bin).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// HitRate@K of user queries against a built index.
    RetrieveEval {
        /// seen | unseen
        #[arg(long, default_value = "seen")]
        split: String,
        #[arg(long)]
        k: Option<usize>,
        /// Model file to encode queries with (defaults to <out>/model.bin).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Rank preference pairs by length-normalized log-likelihood.
    Zeroshot {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Generate task texts for held-out records.
    Generate {
        /// explain | product | query | dialog
        #[arg(long)]
        task: String,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Dialog loop: replay a file of turns, or read stdin.
    Chat {
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Distill the model into a smaller shared-layer student.
    Distill {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Gradual magnitude pruning with continued training.
    Prune {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Int8 weight quantization plus reconstruction / drift checks.
    Quantize {},
    /// AUC from every exit layer (optionally exit-finetune first).
    ExitEval {
        #[arg(long)]
        finetune_steps: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(cli.config.as_deref())?;
    let config_bytes = cfg.canonical_bytes()?;
    std::fs::create_dir_all(&cli.out).map_err(|e| CliError::Runtime(e.into()))?;
    let ctx = Ctx { cfg, out: cli.out, config_bytes };

    match cli.command {
        Command::GenData { seed } => commands::gen_data(&ctx, seed),
        Command::Pretrain { steps, seed } => commands::cmd_pretrain(&ctx, steps, seed),
        Command::Tune { method, steps, seed } => commands::cmd_tune(&ctx, &method, steps, seed),
        Command::EvalCtr { scorer, state, model } => {
            commands::cmd_eval_ctr(&ctx, &scorer, state.as_deref(), model.as_deref())
        }
        Command::ServeBench { mode, split, cold, reps, layer } => {
            commands::cmd_serve_bench(&ctx, &mode, split, cold, reps, layer)
        }
        Command::RetrieveBuild { catalog, train_steps, model } => {
            commands::cmd_retrieve_build(&ctx, &catalog, train_steps, model.as_deref())
        }
        Command::RetrieveEval { split, k, model } => {
            commands::cmd_retrieve_eval(&ctx, &split, k, model.as_deref())
        }
        Command::Zeroshot { model } => commands::cmd_zeroshot(&ctx, model.as_deref()),
        Command::Generate { task, count } => commands::cmd_generate(&ctx, &task, count),
        Command::Chat { replay } => commands::cmd_chat(&ctx, replay.as_deref()),
        Command::Distill { steps, seed } => commands::cmd_distill(&ctx, steps, seed),
        Command::Prune { steps, seed } => commands::cmd_prune(&ctx, steps, seed),
        Command::Quantize {} => commands::cmd_quantize(&ctx),
        Command::ExitEval { finetune_steps } => commands::cmd_exit_eval(&ctx, finetune_steps),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {}", msg);
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(1)
        }
    }
}
