//! `vdgae` command line: splitting, training, evaluation, heuristic
//! baselines, synthetic graphs, embedding analysis and gradient checks.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error.

pub mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::*;
use crate::config::DataSource;

/// A mistake in how the program was invoked; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "vdgae", version, about = "Disentangled graph auto-encoders for link prediction")]
pub struct Cli {
    /// More log output (-v debug, -vv trace). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    /// Edge list, one "u v" pair per line, optional "N=<count>" first line.
    #[arg(long)]
    pub edges: Option<PathBuf>,
    /// Headerless CSV with one row per node; identity features when absent.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Directory with edges.txt and optionally features.csv and labels.csv.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Relabel sparse node ids densely; the mapping goes to node_map.csv.
    #[arg(long)]
    pub remap: bool,
}

impl From<GraphArgs> for DataSource {
    fn from(g: GraphArgs) -> Self {
        DataSource {
            edges: g.edges,
            features: g.features,
            dataset: g.dataset,
            remap: g.remap,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split edges into train/val/test positives with sampled negatives.
    Split {
        /// Edge list file.
        edges: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        val: f64,
        #[arg(long, default_value_t = 0.10)]
        test: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        remap: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train over one or more seeds. Takes `--config FILE` with key = value
    /// lines and any key as a `--key value` override.
    Train {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        args: Vec<String>,
    },
    /// Score a split with a saved checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Which held-out set: test or val.
        #[arg(long, default_value = "test")]
        set: String,
        /// Also rank positives against every non-edge of the graph.
        #[arg(long)]
        full_candidates: bool,
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Heuristic link-prediction baselines averaged over seeds.
    Baseline {
        /// Edge list file.
        edges: PathBuf,
        /// Comma-separated cn, jaccard, aa, ra, pa, katz, simrank, or all.
        #[arg(long, default_value = "all")]
        method: String,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        /// First seed; runs use seed, seed + 1, ...
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        val: f64,
        #[arg(long, default_value_t = 0.10)]
        test: f64,
        /// Dataset name for the CSV; defaults to the file stem.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        remap: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a stochastic-block-model graph with planted communities.
    Synth {
        #[arg(long, default_value_t = 5)]
        communities: usize,
        #[arg(long, default_value_t = 500)]
        size: usize,
        /// Within-community probabilities, one per community or a single value.
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.02,0.03,0.04,0.05")]
        p_list: Vec<f64>,
        /// Average-degree interval that q is tuned to (its midpoint).
        #[arg(long, value_delimiter = ',', default_value = "18,20", num_args = 1)]
        target_degree: Vec<f64>,
        /// Use this between-community probability instead of tuning.
        #[arg(long)]
        q: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlation between embedding dimensions of a checkpoint.
    Analyze {
        checkpoint: PathBuf,
        /// Dataset directory (edges.txt, features.csv, labels.csv).
        dataset: PathBuf,
        /// Embed on this split's message graph instead of the full graph.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of all training gradients on random instances.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 12)]
        n_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn dispatch(command: Command) -> anyhow::Result<bool> {
    match command {
        Command::Split { edges, val, test, seed, remap, out } => split(SplitOpts {
            data: DataSource { edges: Some(edges), remap, ..Default::default() },
            val,
            test,
            seed,
            out,
        })?,
        Command::Train { args } => {
            let kv = config::resolve(&args)?;
            train_cmd(config::TrainJob::from_keys(&kv)?)?
        }
        Command::Eval { checkpoint, split, set, full_candidates, graph, out } => eval(EvalOpts {
            data: graph.into(),
            checkpoint,
            split,
            set,
            full_candidates,
            out,
        })?,
        Command::Baseline { edges, method, seeds, seed, val, test, name, remap, out } => baseline(BaselineOpts {
            data: DataSource { edges: Some(edges), remap, ..Default::default() },
            methods: method,
            seeds,
            seed,
            val,
            test,
            name,
            out,
        })?,
        Command::Synth { communities, size, p_list, target_degree, q, seed, out } => {
            let [lo, hi] = target_degree[..] else {
                return Err(UsageError("--target-degree takes LO,HI".into()).into());
            };
            synth(SynthOpts {
                communities,
                size,
                p_list,
                target_degree: (lo, hi),
                q,
                seed,
                out,
            })?
        }
        Command::Analyze { checkpoint, dataset, split, out } => analyze(AnalyzeOpts {
            checkpoint,
            data: DataSource { dataset: Some(dataset), ..Default::default() },
            split,
            out,
        })?,
        Command::Gradcheck { trials, n_max, seed, out } => return gradcheck_cmd(GradcheckOpts { trials, n_max, seed, out }),
    }
    Ok(true)
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging(cli.verbose);
    match dispatch(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}
