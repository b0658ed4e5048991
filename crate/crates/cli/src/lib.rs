//! Command-line harness: dataset generation, training, offline and
//! streaming evaluation, K sweeps and the fusion benchmark.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::Outcome;
pub use config::RunConfig;
pub use error::{CliError, CliResult};

use config::parse_assignment;
use error::usage;

#[derive(Debug, Parser)]
#[command(name = "bestow", version, about = "Cross-attention speech-LLM bridge with wait-k streaming")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Config file of `key=value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed (key `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (key `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Any config key, repeatable: `--set policy.K=6`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/test splits of a synthetic task.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Training examples (key `task.n`).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train from scratch or continue a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (key `data.dir`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to continue from, e.g. an offline model for streaming fine-tuning.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Offline or streaming quality on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// offline | stream (key `eval.mode`).
        #[arg(long)]
        mode: Option<String>,
        /// Wait-k K, required in stream mode.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Free-running streaming decode with READ/WRITE traces.
    Stream {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides `policy.K`.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Latency-quality tradeoff over a set of K.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `a..b` or `a,b,c` (key `sweep.ks`).
        #[arg(long)]
        ks: Option<String>,
    },
    /// Prepend vs cross-attention fusion timing.
    Bench {
        #[command(flatten)]
        common: Common,
        /// `LtxLa,...` (key `bench.grid`).
        #[arg(long)]
        grid: Option<String>,
    },
}

fn resolve(common: &Common, extra: &[(&str, Option<String>)]) -> CliResult<RunConfig> {
    let mut overrides = Vec::new();
    for s in &common.set {
        overrides.push(parse_assignment(s)?);
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &common.out {
        overrides.push(("out".into(), out.display().to_string()));
    }
    for (k, v) in extra {
        if let Some(v) = v {
            overrides.push((k.to_string(), v.clone()));
        }
    }
    RunConfig::resolve(common.config.as_deref(), &overrides)
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

pub fn run(cli: Cli) -> CliResult<Outcome> {
    match cli.command {
        Command::Gen { common, n } => {
            if n == Some(0) {
                return Err(usage("--n must be at least 1"));
            }
            let cfg = resolve(&common, &[("task.n", n.map(|n| n.to_string()))])?;
            commands::cmd_gen(&cfg, common.force)
        }
        Command::Train { common, data, init_from } => {
            let cfg = resolve(&common, &[("data.dir", path_str(&data))])?;
            commands::cmd_train(&cfg, init_from.as_deref(), common.force)
        }
        Command::Eval { common, data, checkpoint, mode, k } => {
            let cfg = resolve(&common, &[("data.dir", path_str(&data))])?;
            commands::cmd_eval(&cfg, &checkpoint, mode.as_deref(), k)
        }
        Command::Stream { common, data, checkpoint, k } => {
            let cfg = resolve(&common, &[("data.dir", path_str(&data))])?;
            commands::cmd_stream(&cfg, &checkpoint, k)
        }
        Command::Sweep { common, data, checkpoint, ks } => {
            let cfg = resolve(&common, &[("data.dir", path_str(&data))])?;
            commands::cmd_sweep(&cfg, &checkpoint, ks.as_deref())
        }
        Command::Bench { common, grid } => {
            let cfg = resolve(&common, &[])?;
            commands::cmd_bench(&cfg, grid.as_deref())
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_args<I, T>(args: I) -> CliResult<Outcome>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| {
        let text = e.to_string();
        usage(text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string())
    })?;
    run(cli)
}
