use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

/// Settings accepted both as global flags and as keys of the `--config`
/// file. A flag given on the command line wins over the file.
macro_rules! knobs {
    ($( $(#[doc = $doc:literal])* $name:ident : $ty:ty ),* $(,)?) => {
        #[derive(Debug, Clone, Default, Args, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct Knobs {
            $(
                $(#[doc = $doc])*
                #[arg(long, global = true)]
                pub $name: Option<$ty>,
            )*
        }

        impl Knobs {
            /// Field-wise `self.or(fallback)`.
            pub fn or(self, fallback: Knobs) -> Knobs {
                Knobs { $( $name: self.$name.or(fallback.$name), )* }
            }
        }
    };
}

knobs! {
    /// Backend: mock:SPEC, mock:file:PATH, http:URL or openai:URL
    backend: String,
    /// Decoding strategy, e.g. nucleus:0.9; comma-separated for sweeps
    strategy: String,
    /// Top-level random seed
    seed: u64,
    /// Output directory
    out: PathBuf,
    /// Sequences processed concurrently (also the HTTP concurrency limit)
    parallel: usize,
    /// Prefix grid: short, long, fixed50, percentile or fixed:START:STEP
    grid: String,
    /// MCL confidence gap
    delta: f64,
    /// DaMCL thresholds, comma-separated
    epsilon: String,
    /// DaMCL metric: jsd, tvd, kl or one_minus_f1
    metric: String,
    /// LSDS classification threshold
    tau: f64,
    /// LSDS gate for boosting
    gamma: f64,
    /// LSPS gate for boosting
    boost_epsilon: f64,
    /// Boost factor (required for taboo)
    lambda: f64,
    /// CAD strength
    alpha: f64,
    /// Short suffix length: token count or fraction such as 0.1
    short_len: String,
    /// Ground-truth labeler for detect: planted, mcl or lsd_lcl
    oracle: String,
    /// tau values for the detection sweep table, comma-separated
    sweep: String,
    /// Drop samples the model does not predict confidently and correctly
    filter: bool,
    /// Share cutoffs reported by mcl/damcl, comma-separated
    share_cutoffs: String,
    /// Generation methods: vanilla, cad, taboo; comma-separated
    method: String,
    /// Generations per prompt
    n_samples: usize,
    /// Maximum new tokens per generation
    max_new: usize,
    /// Context lengths for bench, comma-separated
    lengths: String,
    /// Timing repetitions per bench length
    repeats: usize,
    /// HTTP: "full" or the number of top log-probs requested
    top_logprobs: String,
    /// HTTP request timeout
    timeout_ms: u64,
    /// HTTP: server supports attention masking (attend_last)
    masking: bool,
    /// Vocabulary size, required for openai backends
    vocab_size: usize,
    /// End-of-sequence token id
    eos: u32,
    /// Model name sent to openai backends
    model: String,
    /// Response cache capacity (0 disables)
    cache: usize,
    /// Fixed latency added to every mock call, in milliseconds
    latency_ms: f64,
    /// Per-token latency added to every mock call, in milliseconds
    latency_per_token_ms: f64,
}

#[derive(Debug, Parser)]
#[command(name = "ctxlens", version, about = "Probe how much context a language model uses")]
pub struct Cli {
    #[command(flatten)]
    pub knobs: Knobs,
    /// Flat TOML file of settings (keys are the flag names with underscores)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log progress to stderr
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Minimal context length of each sample's ground-truth next token
    Mcl {
        /// Samples JSONL
        #[arg(long)]
        samples: PathBuf,
    },
    /// Distribution-aware MCL over a strategy × threshold sweep
    Damcl {
        #[arg(long)]
        samples: PathBuf,
    },
    /// LSDS scores, predicted labels and agreement with a labeler
    Detect {
        #[arg(long)]
        samples: PathBuf,
    },
    /// Sample continuations with vanilla, CAD or TaBoo decoding
    Generate {
        /// Prompts JSONL: {"id", "prompt" | "tokens", "gold"?}
        #[arg(long)]
        prompts: PathBuf,
    },
    /// Time detection overhead against plain inference
    Bench,
    /// Score predictions against gold answers
    Score {
        /// JSONL rows {"id"?, "pred", "gold"}
        #[arg(long)]
        input: PathBuf,
    },
    /// Write synthetic sample sets
    Synth {
        #[command(subcommand)]
        kind: SynthKind,
    },
    /// Draw bucketed samples from a text corpus
    Sample {
        /// Corpus JSONL {"id", "text"}
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 10)]
        n_per_bucket: usize,
        /// Keep only documents whose token length lies in LO:HI
        #[arg(long)]
        doc_window: Option<String>,
        /// Omit the ground-truth next token
        #[arg(long)]
        no_ground_truth: bool,
        /// Directory caching tokenized documents
        #[arg(long)]
        token_cache: Option<PathBuf>,
        /// Output file (default OUT/samples.jsonl)
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Serve the configured backend over the next-logprobs HTTP protocol
    ServeMock {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum SynthKind {
    /// Marker-copy sequences for `--backend mock:marker`, with known MCL
    Planted {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 600)]
        seq_len: usize,
        /// Fraction of samples whose dependency fits in the window
        #[arg(long, default_value_t = 0.8)]
        short_share: f64,
        #[arg(long, default_value_t = 32)]
        window: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Needle-in-a-haystack prompts
    Niah {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 600)]
        total_len: usize,
        #[arg(long, default_value_t = 32)]
        window: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Register-retrieval prompts
    Longeval {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 50)]
        lines: usize,
        #[arg(long, default_value_t = 32)]
        window: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

pub fn load_config(path: &Path) -> CliResult<Knobs> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
}

/// Splits a comma-separated list and parses each item.
pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| CliError::usage(format!("invalid {what} `{p}`: {e}"))))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(CliError::usage(format!("empty {what} list")));
    }
    Ok(items)
}

pub fn parse_one<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    s.trim()
        .parse()
        .map_err(|e| CliError::usage(format!("invalid {what} `{s}`: {e}")))
}
