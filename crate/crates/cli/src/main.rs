//! `mega`: ingest corpora, build graphs, train, evaluate and query the
//! recommender from the shell.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mega_core::baselines::BaselineKind;
use mega_core::model::Ablation;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "mega", version, about = "Multi-view graph API recommender")]
struct Cli {
    /// Worker threads (1 gives bit-reproducible runs on any machine)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert methods.jsonl (+ apis.jsonl) into a corpus directory
    Ingest {
        #[arg(long)]
        methods: PathBuf,
        #[arg(long)]
        apis: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus with planted API pairs
    Synth {
        #[arg(long, default_value_t = 50)]
        methods: usize,
        #[arg(long, default_value_t = 30)]
        apis: usize,
        #[arg(long, default_value_t = 5)]
        pairs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Cap on methods carrying any one planted pair
        #[arg(long)]
        max_pair_uses: Option<usize>,
        /// Fixed position of the planted pair in each sequence
        #[arg(long)]
        pair_start: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a corpus and build the interaction, co-occurrence and hierarchy graphs
    BuildGraphs {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
        epsilon: u64,
        #[arg(long, default_value_t = 15, value_parser = clap::value_parser!(u32).range(1..))]
        buckets: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint
    Train {
        #[arg(long)]
        graphs: PathBuf,
        #[command(flatten)]
        hyper: Hyper,
        #[arg(long, default_value = "none")]
        ablate: Ablation,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch JSON lines; stdout when absent
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on the held-out split
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20", value_parser = clap::value_parser!(u64).range(1..))]
        k: Vec<u64>,
        #[arg(long)]
        report: PathBuf,
        /// CSV rows; defaults to the report path with a .csv extension
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and evaluate each ablation variant with a shared split and seed
    Ablate {
        #[arg(long)]
        graphs: PathBuf,
        #[command(flatten)]
        hyper: Hyper,
        #[arg(long, value_delimiter = ',', default_value = "none,no-hs,no-co,no-hc")]
        variants: Vec<Ablation>,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20", value_parser = clap::value_parser!(u64).range(1..))]
        k: Vec<u64>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Rank APIs for a context
    Recommend {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        graphs: PathBuf,
        /// Comma-separated qualified API names
        #[arg(long)]
        context: String,
        /// Qualified method name (`project/class/method`) anchoring the hierarchy view
        #[arg(long)]
        method: Option<String>,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
        k: u64,
    },
    /// Evaluate a count-based baseline on the held-out split
    Baseline {
        #[arg(long)]
        kind: BaselineKind,
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20", value_parser = clap::value_parser!(u64).range(1..))]
        k: Vec<u64>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct Hyper {
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    dim: u64,
    #[arg(long, default_value_t = 1)]
    hops: usize,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    set_size: u64,
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    l2: f64,
    #[arg(long, default_value_t = 1024, value_parser = clap::value_parser!(u64).range(1..))]
    batch: u64,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    /// Overridden by MEGA_SEED when set
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    neg_ratio: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.code())
        }
    }
}
