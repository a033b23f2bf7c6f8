use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use tracing_subscriber::EnvFilter;

use wfworld::harness::{self, Failure, RunResult};

/// Train, run and evaluate a token world model on the GridCraft environment.
#[derive(Parser)]
#[command(name = "wfworld", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file; the section named after the subcommand is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set optim.total_steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out clips, train the codebook and write token shards.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_start: Option<u64>,
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        held_out: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a causal model from scratch.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a causal checkpoint under the wavefront mask.
    FinetuneParallel {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate an episode and write its frames and a strip image.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        frames: Option<usize>,
        /// autoregressive or diagonal
        #[arg(long)]
        decoding: Option<String>,
        /// world_model or agent
        #[arg(long)]
        mode: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Score controllability and video quality on held-out clips.
    Eval {
        /// Omit to score the clips' own frames.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_clips: Option<usize>,
        /// autoregressive or diagonal
        #[arg(long)]
        decoding: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Time autoregressive against diagonal decoding.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Start the websocket session service.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Print a shard's header and token pairs.
    DumpShard {
        path: PathBuf,
        #[arg(long, default_value_t = 1)]
        max_clips: usize,
    },
}

/// Flag overrides go after `--set` ones so the explicit flag wins.
fn settings<T: DeserializeOwned + serde::Serialize + Default>(common: &Common, section: &str, flags: Vec<(&str, Option<String>)>) -> RunResult<T> {
    let mut overrides = common.set.clone();
    for (key, value) in flags {
        if let Some(v) = value {
            overrides.push(format!("{key}={}", toml_literal(&v)));
        }
    }
    harness::resolve(common.config.as_deref(), section, &overrides)
}

/// Numbers stay numbers; everything else becomes a quoted TOML string.
fn toml_literal(v: &str) -> String {
    if v.parse::<f64>().is_ok() {
        v.to_string()
    } else {
        toml::Value::String(v.to_string()).to_string()
    }
}

fn path(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn num<T: ToString>(n: Option<T>) -> Option<String> {
    n.map(|n| n.to_string())
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("summaries serialize"));
}

fn run(cli: Cli) -> RunResult<()> {
    match cli.command {
        Command::GenData {
            out,
            seed_start,
            clips,
            held_out,
            common,
        } => {
            let s: harness::GenDataSettings = settings(
                &common,
                "gen-data",
                vec![("out", path(out)), ("seed_start", num(seed_start)), ("clips", num(clips)), ("held_out", num(held_out))],
            )?;
            print_json(&harness::gen_data(&s)?);
        }
        Command::Train { data, out, steps, common } => {
            let s: harness::TrainSettings = settings(
                &common,
                "train",
                vec![("data", path(data)), ("out", path(out)), ("optim.total_steps", num(steps))],
            )?;
            print_json(&harness::train_run(&s)?);
        }
        Command::FinetuneParallel {
            checkpoint,
            data,
            out,
            steps,
            common,
        } => {
            let s: harness::FinetuneSettings = settings(
                &common,
                "finetune-parallel",
                vec![
                    ("checkpoint", path(checkpoint)),
                    ("data", path(data)),
                    ("out", path(out)),
                    ("optim.total_steps", num(steps)),
                ],
            )?;
            print_json(&harness::finetune_run(&s)?);
        }
        Command::Generate {
            checkpoint,
            codebook,
            out,
            seed,
            frames,
            decoding,
            mode,
            common,
        } => {
            let s: harness::GenerateSettings = settings(
                &common,
                "generate",
                vec![
                    ("checkpoint", path(checkpoint)),
                    ("codebook", path(codebook)),
                    ("out", path(out)),
                    ("seed", num(seed)),
                    ("frames", num(frames)),
                    ("decoding", decoding),
                    ("mode", mode),
                ],
            )?;
            print_json(&harness::generate_run(&s)?);
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            max_clips,
            decoding,
            common,
        } => {
            let s: harness::EvalSettings = settings(
                &common,
                "eval",
                vec![
                    ("checkpoint", path(checkpoint)),
                    ("data", path(data)),
                    ("out", path(out)),
                    ("max_clips", num(max_clips)),
                    ("eval.decoding", decoding),
                ],
            )?;
            print!("{}", harness::eval_run(&s)?.table());
        }
        Command::Bench {
            checkpoint,
            codebook,
            out,
            episodes,
            common,
        } => {
            let s: harness::BenchSettings = settings(
                &common,
                "bench",
                vec![
                    ("checkpoint", path(checkpoint)),
                    ("codebook", path(codebook)),
                    ("out", path(out)),
                    ("bench.episodes", num(episodes)),
                ],
            )?;
            print_json(&harness::bench_run(&s)?);
        }
        Command::Serve {
            checkpoint,
            codebook,
            bind,
            common,
        } => {
            let s: harness::ServeSettings = settings(
                &common,
                "serve",
                vec![("checkpoint", path(checkpoint)), ("codebook", path(codebook)), ("bind", bind)],
            )?;
            serve(s)?;
        }
        Command::DumpShard { path, max_clips } => print!("{}", harness::dump_shard(&path, max_clips)?),
    }
    Ok(())
}

fn serve(s: harness::ServeSettings) -> RunResult<()> {
    let checkpoint = harness::load_checkpoint(&s.checkpoint)?;
    let codebook = harness::load_codebook(&s.codebook)?;
    let bind = s.bind.clone();
    let service = Arc::new(harness::SessionService::new(checkpoint, codebook, s).map_err(|e| Failure::new("serve", e))?);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::new("starting runtime", e.into()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .map_err(|e| Failure::new(format!("binding {bind}"), wfworld::Error::config(e.to_string())))?;
        tracing::info!(address = %bind, "serving");
        harness::serve(listener, service)
            .await
            .map_err(|e| Failure::new("serving", e.into()))
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::from(harness::EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
