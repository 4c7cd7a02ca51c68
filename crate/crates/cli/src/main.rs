//! `qedlm`: train, sample, control, decode and evaluate quantized-embedding
//! diffusion language models.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qedlm_core::Error;

#[derive(Debug, Parser)]
#[command(name = "qedlm", version, about = "Quantized-embedding controllable diffusion language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a diffusion model and write a checkpoint plus a CSV report.
    Train(TrainArgs),
    /// Draw unguided samples from a checkpoint.
    Sample(SampleArgs),
    /// Draw samples steered towards a semantic or length target.
    Control(ControlArgs),
    /// Select the minimum Bayes risk sample from a sample file.
    Mbr(MbrArgs),
    /// Score a sample file for control success and teacher perplexity.
    Eval(EvalArgs),
    /// Reconstruction error, throughput and tunable-parameter counts per quantizer.
    QuantBench(QuantBenchArgs),
    /// Write a synthetic labelled restaurant corpus and its vocabulary.
    ToyCorpus(ToyCorpusArgs),
    /// Train an attribute classifier on latents of a trained model.
    Classifier(ClassifierArgs),
    /// Train the autoregressive teacher used for fluency scoring.
    Teacher(TeacherArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key (`key=value`); repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Line-delimited training corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Line-delimited vocabulary (built from the corpus when omitted).
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to start from (fine-tuning).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Report path (default: the checkpoint path with a `.report.csv` suffix).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SamplingArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 10)]
    samples: usize,
    /// Base seed; chain i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads for independent chains.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Reverse steps visited (default: every training step).
    #[arg(long)]
    sample_steps: Option<usize>,
    /// Sampling-time clamp quantizer (`Q0i.8f`, `Q8i.0f`, `fixed:n=4`, `none`).
    #[arg(long)]
    quant: Option<String>,
    /// Guidance configuration file and overrides.
    #[command(flatten)]
    config: ConfigArgs,
    /// Output file (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[command(flatten)]
    sampling: SamplingArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    Semantic,
    Length,
}

#[derive(Debug, Args)]
struct TargetArgs {
    /// Control task.
    #[arg(long, value_enum)]
    task: Option<Task>,
    /// Attribute field for the semantic task.
    #[arg(long)]
    field: Option<String>,
    /// Attribute value for the semantic task.
    #[arg(long)]
    value: Option<String>,
    /// Content length for the length task.
    #[arg(long)]
    target_len: Option<usize>,
}

#[derive(Debug, Args)]
struct ControlArgs {
    #[command(flatten)]
    target: TargetArgs,
    /// Attribute classifier checkpoint (semantic task).
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Weight of the fluency term.
    #[arg(long)]
    lambda: Option<f64>,
    /// Adagrad learning rate of the latent updates.
    #[arg(long)]
    guide_lr: Option<f64>,
    /// Adagrad steps per diffusion step.
    #[arg(long)]
    inner_steps: Option<usize>,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Write a CSV control report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MbrArgs {
    /// Sample file, one sample per line.
    #[arg(long)]
    input: PathBuf,
    /// Output file (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Sample file, one sample per line.
    #[arg(long)]
    input: PathBuf,
    /// Teacher checkpoint for the lm column.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[command(flatten)]
    target: TargetArgs,
    /// Write the CSV report here (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct QuantBenchArgs {
    /// Quantizers to compare; repeatable.
    #[arg(long = "quant")]
    quants: Vec<String>,
    /// Random inputs per quantizer.
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    /// Vocabulary size for the formula columns.
    #[arg(long, default_value_t = 194)]
    vocab_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model configuration for the formula columns.
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct ToyCorpusArgs {
    #[arg(long, default_value_t = 1000)]
    lines: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving corpus.txt, labels.txt and vocab.txt.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct ClassifierArgs {
    /// Model checkpoint whose embedding table defines the latents.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Label file aligned with the corpus (`key=value` pairs per line).
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    field: String,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TeacherArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

/// 2 configuration or input error, 3 I/O or artifact error, 4 numeric or
/// guidance failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_)
                | Error::UnknownKey { .. }
                | Error::Spec(_)
                | Error::Schedule(_)
                | Error::Labels(_)
                | Error::Vocabulary(_)
                | Error::Contract(_) => 2,
                Error::Io { .. } | Error::Format(_) | Error::Version { .. } => 3,
                Error::Guidance { .. } | Error::Dimension { .. } | Error::Index { .. } | Error::DoubleBackward => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Control(a) => commands::control(a),
        Command::Mbr(a) => commands::mbr(a),
        Command::Eval(a) => commands::eval(a),
        Command::QuantBench(a) => commands::quant_bench(a),
        Command::ToyCorpus(a) => commands::toy_corpus(a),
        Command::Classifier(a) => commands::classifier(a),
        Command::Teacher(a) => commands::teacher(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
