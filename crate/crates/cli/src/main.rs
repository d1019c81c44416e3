//! `attnshift`: attention-shift predictors of reading times from GPT-2.

mod commands;
mod tsv;

use std::path::PathBuf;
use std::process::ExitCode;

use attnshift::model::{LayerSelector, LogBase};
use attnshift::predictors::{EmdMethod, HeadAggregation};
use attnshift::selftest::Corruption;
use attnshift::stats::eval::Partition;
use attnshift::{Formulation, Measure, Precision};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "attnshift",
    version,
    about = "Attention-shift predictors of reading times from GPT-2"
)]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores). 1 runs sequentially.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Split documents into GPT-2 tokens and show their word alignment.
    Tokenize(TokenizeArgs),
    /// Compute per-word attention predictors and surprisal for a corpus.
    Predictors(PredictorArgs),
    /// Compute per-word surprisal only.
    Surprisal(PredictorArgs),
    /// Fit baseline and full regressions against reading times.
    Eval(EvalArgs),
    /// Pearson correlations between table columns.
    Corr(CorrArgs),
    /// Count and mean of a column per group label.
    Groupby(GroupbyArgs),
    /// Run the invariant suite on seeded random models.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
pub struct VocabArgs {
    /// Directory with vocab.json and merges.txt (defaults to the model directory).
    #[arg(long)]
    pub vocab_dir: Option<PathBuf>,
    #[arg(long, requires = "merges")]
    pub vocab: Option<PathBuf>,
    #[arg(long, requires = "vocab")]
    pub merges: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CorpusArgs {
    /// TSV of `doc_id<TAB>path` lines; one sentence per line in each file.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Text files; the document id is the file stem.
    pub files: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TokenizeArgs {
    #[command(flatten)]
    pub vocab: VocabArgs,
    /// Model directory, used only to locate the vocabulary.
    #[arg(long, env = "ATTNSHIFT_MODEL_DIR")]
    pub model_dir: Option<PathBuf>,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Args, Debug)]
pub struct PredictorArgs {
    /// Directory with config.json and model.safetensors.
    #[arg(long, env = "ATTNSHIFT_MODEL_DIR")]
    pub model_dir: PathBuf,
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Context window in tokens; must be even.
    #[arg(long, default_value_t = 1024)]
    pub window: usize,
    /// `top` or a zero-based layer index.
    #[arg(long, default_value = "top")]
    pub layer: LayerSelector,
    #[arg(long, value_delimiter = ',', default_value = "w,n,rln")]
    pub formulations: Vec<Formulation>,
    #[arg(long, value_delimiter = ',', default_value = "nae,dnae,md,emd")]
    pub measures: Vec<Measure>,
    /// How per-head values combine: `mean` or `sum`.
    #[arg(long, default_value = "mean")]
    pub aggregation: HeadAggregation,
    /// Surprisal log base: `2` or `e`.
    #[arg(long, default_value = "2")]
    pub log_base: LogBase,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: PrecisionArg,
    /// `simplex` or the equivalent closed-form `cdf`.
    #[arg(long, default_value = "simplex")]
    pub emd_method: EmdMethod,
    /// Skip the reconstruction residuals in the health line.
    #[arg(long)]
    pub no_verify: bool,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predictor table written by `predictors`.
    #[arg(long)]
    pub table: PathBuf,
    /// Reading times: subject, doc_id, word_index, duration_ms.
    #[arg(long)]
    pub rt: PathBuf,
    /// Predictors of interest for one full model; repeat for more models,
    /// comma-separate to fit several jointly.
    #[arg(long, required = true)]
    pub interest: Vec<String>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "word_len,word_index,surprisal"
    )]
    pub baseline: Vec<String>,
    /// Preceding words whose predictor-of-interest values are added.
    #[arg(long, default_value_t = 0)]
    pub lags: usize,
    /// `all`, `exploratory` or `heldout`.
    #[arg(long, default_value = "all")]
    pub partition: Partition,
    #[arg(long, default_value_t = 10_000)]
    pub permutations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub keep_initial: bool,
    #[arg(long)]
    pub keep_final: bool,
    #[arg(long, default_value_t = 100.0)]
    pub min_ms: f64,
    #[arg(long, default_value_t = 3000.0)]
    pub max_ms: f64,
    #[arg(long)]
    pub no_duration_filter: bool,
    /// Center predictors without dividing by their standard deviation.
    #[arg(long)]
    pub no_scale: bool,
    #[arg(long)]
    pub no_center_subjects: bool,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CorrArgs {
    /// Any TSV with a header row; `NA` marks missing values.
    #[arg(long)]
    pub table: PathBuf,
    /// Columns to correlate (default: surprisal and every attn_* column).
    #[arg(long, value_delimiter = ',')]
    pub columns: Vec<String>,
    /// Drop rows with any missing value instead of per pair.
    #[arg(long)]
    pub complete_case: bool,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GroupbyArgs {
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub by: String,
    #[arg(long)]
    pub value: String,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CorruptArg {
    Value,
    LnScale,
}

impl From<CorruptArg> for Corruption {
    fn from(c: CorruptArg) -> Self {
        match c {
            CorruptArg::Value => Corruption::ValueVector,
            CorruptArg::LnScale => Corruption::LayerNormScale,
        }
    }
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: PrecisionArg,
    #[arg(long, default_value_t = 8)]
    pub models: usize,
    #[arg(long, default_value_t = 500)]
    pub pairs: usize,
    #[arg(long, default_value_t = 500)]
    pub strings: usize,
    /// Damage the trace first; the matching check must then fail.
    #[arg(long, value_enum, hide = true)]
    pub corrupt: Option<CorruptArg>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
