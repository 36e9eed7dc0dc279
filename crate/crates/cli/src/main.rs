use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod run;

use run::Failure;

#[derive(Parser, Debug)]
#[command(
    name = "rlab",
    version,
    about = "Group-tag contextualized rewriting for summarization"
)]
struct Cli {
    /// Seed for every randomized stage.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with oracle labels.
    Synth(SynthArgs),
    /// Fill in oracle extractions for every example.
    Label(LabelArgs),
    /// Train a rewriter and write a checkpoint.
    Train(TrainArgs),
    /// Decode summaries with a trained checkpoint.
    Summarize(SummarizeArgs),
    /// Score decoded summaries against references with ROUGE.
    Evaluate(EvaluateArgs),
    /// Edit categories, extraction histograms and model diagnostics.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 24)]
    entities: usize,
    #[arg(long, default_value_t = 200)]
    content_words: usize,
    #[arg(long, default_value_t = 12)]
    noise_words: usize,
    #[arg(long, default_value_t = 16)]
    cue_words: usize,
    /// Sentences per document, `MIN-MAX` or `N`.
    #[arg(long, default_value = "4-6")]
    doc_sentences: String,
    #[arg(long, default_value = "2-3")]
    summary_sentences: String,
    /// Content words per sentence.
    #[arg(long, default_value = "2-4")]
    content_len: String,
    #[arg(long, default_value_t = 0.2)]
    noise_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    coref_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    ref_rate: f64,
    /// Mark selected sentences with cue words and keep document order.
    #[arg(long)]
    cued: bool,
}

#[derive(Args, Debug)]
struct LabelArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Oracle-labeled corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// external, joint or joint_two_stage.
    #[arg(long, default_value = "external")]
    mode: String,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    enc_layers: usize,
    #[arg(long, default_value_t = 2)]
    dec_layers: usize,
    #[arg(long, default_value_t = 128)]
    ffn_dim: usize,
    #[arg(long, default_value_t = 256)]
    max_positions: usize,
    /// Largest sentence identifier in the vocabulary.
    #[arg(long, default_value_t = 16)]
    max_identifier: usize,
    #[arg(long, default_value_t = 1)]
    min_freq: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    /// Loss weight of identifier tokens.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1200)]
    batch_tokens: usize,
    #[arg(long, default_value_t = 300)]
    warmup: u64,
    #[arg(long, default_value_t = 0.05)]
    lr_factor: f64,
    /// Give encoder parameters their own schedule.
    #[arg(long)]
    separate_encoder_schedule: bool,
    #[arg(long, default_value_t = 600)]
    warmup_enc: u64,
    #[arg(long, default_value_t = 0.0005)]
    enc_factor: f64,
    /// Keep the group-tag embedding at zero.
    #[arg(long)]
    freeze_tags: bool,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    log_every: u64,
}

#[derive(Args, Debug, Clone)]
struct DecodeArgs {
    #[arg(long, default_value = "external")]
    mode: String,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 50)]
    min_len: usize,
    #[arg(long, default_value_t = 200)]
    max_len: usize,
    #[arg(long, default_value_t = 0.95)]
    alpha: f64,
    #[arg(long)]
    no_trigram_blocking: bool,
    /// Never select the same sentence twice (joint modes).
    #[arg(long)]
    dedup: bool,
}

#[derive(Args, Debug)]
struct SummarizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// External-mode extractor: oracle, lead3 or file:<path>.
    #[arg(long, default_value = "oracle")]
    extractor: String,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Checkpoint for blocking sensitivity and the tag-swap probe.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Number of tag-swap probes (needs --model).
    #[arg(long, default_value_t = 0)]
    probes: usize,
    #[command(flatten)]
    decode: DecodeArgs,
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RLAB_LOG", "info"))
        .format(|buf, record| {
            writeln!(
                buf,
                "level={} {}",
                record.level().as_str().to_lowercase(),
                record.args()
            )
        })
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    init_logging();
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .expect("thread pool is configured once");
    }
    match run::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `rlab --help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
