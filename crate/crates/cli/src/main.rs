use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use moeq_cli::{
    cmd_build, cmd_compare, cmd_eval, cmd_plan, cmd_profile, cmd_quantize, cmd_score,
    CompareArgs, CorpusArgs, EvalArgs, PlanArgs, QuantizeArgs, ScoreArgs, ScoreMethod,
};
use moeq_core::eval::ReportFormat;
use moeq_core::predictor::PredictorConfig;
use moeq_core::quant::QuantBackend;

/// Structure-aware mixed-precision weight quantization for toy
/// mixture-of-experts transformers.
#[derive(Parser)]
#[command(name = "moeq", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CalibFlags {
    /// Seed for the synthetic calibration corpus.
    #[arg(long, default_value_t = 0)]
    calib_seed: u64,
    /// Number of calibration sequences.
    #[arg(long, default_value_t = 32)]
    calib_seqs: usize,
    /// Tokens per calibration sequence.
    #[arg(long, default_value_t = 256)]
    calib_len: usize,
}

impl CalibFlags {
    fn corpus(&self) -> CorpusArgs {
        CorpusArgs { seed: self.calib_seed, sequences: self.calib_seqs, length: self.calib_len }
    }
}

#[derive(Args)]
struct EvalFlags {
    /// Seed for the held-out evaluation corpus; must differ from the
    /// calibration seed.
    #[arg(long, default_value_t = 1000)]
    eval_seed: u64,
    /// Number of evaluation sequences.
    #[arg(long, default_value_t = 32)]
    eval_seqs: usize,
    /// Tokens per evaluation sequence.
    #[arg(long, default_value_t = 256)]
    eval_len: usize,
}

impl EvalFlags {
    fn corpus(&self) -> CorpusArgs {
        CorpusArgs { seed: self.eval_seed, sequences: self.eval_seqs, length: self.eval_len }
    }
}

#[derive(Args)]
struct PredictorFlags {
    /// Training epochs for the block score predictor.
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Hidden width of the block score predictor.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
}

impl PredictorFlags {
    fn config(&self) -> PredictorConfig {
        PredictorConfig { epochs: self.epochs, hidden: self.hidden, ..PredictorConfig::default() }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Outlier,
    Predictor,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Rtn,
    Gptq,
}

impl BackendArg {
    fn backend(self) -> QuantBackend {
        match self {
            BackendArg::Rtn => QuantBackend::Rtn,
            BackendArg::Gptq => QuantBackend::Gptq,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Markdown,
}

/// Markdown when the output path ends in `.md`, CSV otherwise, unless
/// `--format` overrides.
fn pick_format(format: Option<FormatArg>, out: &Path) -> ReportFormat {
    match format {
        Some(FormatArg::Csv) => ReportFormat::Csv,
        Some(FormatArg::Markdown) => ReportFormat::Markdown,
        None => match out.extension().and_then(|e| e.to_str()) {
            Some("md") => ReportFormat::Markdown,
            _ => ReportFormat::Csv,
        },
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a seeded model from a key-value spec file.
    Build {
        /// Spec file (`key = value` lines).
        #[arg(long)]
        spec: PathBuf,
        /// Output model container.
        #[arg(long)]
        out: PathBuf,
    },
    /// Profile expert usage over a synthetic corpus.
    Profile {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        calib: CalibFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score weights (outlier ratios) or blocks (trained predictor).
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[command(flatten)]
        calib: CalibFlags,
        #[command(flatten)]
        predictor: PredictorFlags,
        /// Also store the trained predictor container here.
        #[arg(long)]
        save_predictor: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn an allocation strategy into a bit plan file.
    Plan {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated plan steps, e.g. `attn,shared,freq:2`.
        #[arg(long)]
        strategy: String,
        /// High bit width handed to the strategy's steps.
        #[arg(long, default_value_t = 4)]
        hi: u32,
        /// Default bit width for everything else.
        #[arg(long, default_value_t = 2)]
        lo: u32,
        /// Seed for random steps.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[command(flatten)]
        calib: CalibFlags,
        #[command(flatten)]
        predictor: PredictorFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize a model under a bit plan.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        /// Plan file from `plan`.
        #[arg(long)]
        plan: PathBuf,
        #[command(flatten)]
        calib: CalibFlags,
        #[arg(long, value_enum, default_value = "gptq")]
        backend: BackendArg,
        /// Hessian dampening, as a fraction of the mean diagonal.
        #[arg(long, default_value_t = 0.01)]
        damp: f64,
        /// Grid group size along each row.
        #[arg(long, default_value_t = 128)]
        group: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate perplexity of a model or quantized-model container.
    Eval {
        /// A MOEQ1 or MOEQZ1 container.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate several strategies side by side.
    Compare {
        #[arg(long)]
        model: PathBuf,
        /// Semicolon-separated strategies, e.g. `fp;uniform:4;attn,freq:2`.
        #[arg(long)]
        strategies: String,
        /// Seeds for random strategies.
        #[arg(long, default_value = "42,43,44", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        calib: CalibFlags,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long, default_value_t = 4)]
        hi: u32,
        #[arg(long, default_value_t = 2)]
        lo: u32,
        #[arg(long, value_enum, default_value = "gptq")]
        backend: BackendArg,
        #[arg(long, default_value_t = 0.01)]
        damp: f64,
        #[arg(long, default_value_t = 128)]
        group: usize,
        #[command(flatten)]
        predictor: PredictorFlags,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), moeq_cli::CliError> {
    match cli.command {
        Command::Build { spec, out } => cmd_build(&spec, &out),
        Command::Profile { model, calib, out } => cmd_profile(&model, calib.corpus(), &out),
        Command::Score { model, method, calib, predictor, save_predictor, out } => {
            let args = ScoreArgs {
                method: match method {
                    MethodArg::Outlier => ScoreMethod::Outlier,
                    MethodArg::Predictor => ScoreMethod::Predictor,
                },
                corpus: calib.corpus(),
                predictor: predictor.config(),
                save_predictor,
            };
            cmd_score(&model, &args, &out)
        }
        Command::Plan { model, strategy, hi, lo, seed, calib, predictor, out } => {
            let args = PlanArgs {
                strategy,
                hi,
                lo,
                seed,
                corpus: calib.corpus(),
                predictor: predictor.config(),
            };
            cmd_plan(&model, &args, &out)
        }
        Command::Quantize { model, plan, calib, backend, damp, group, out } => {
            let args = QuantizeArgs {
                corpus: calib.corpus(),
                backend: backend.backend(),
                damp,
                group,
            };
            cmd_quantize(&model, &plan, &args, &out)
        }
        Command::Eval { model, eval, format, out } => {
            let args = EvalArgs { corpus: eval.corpus(), format: pick_format(format, &out) };
            cmd_eval(&model, &args, &out)
        }
        Command::Compare {
            model,
            strategies,
            seeds,
            calib,
            eval,
            hi,
            lo,
            backend,
            damp,
            group,
            predictor,
            format,
            out,
        } => {
            let args = CompareArgs {
                strategies,
                seeds,
                calib: calib.corpus(),
                eval: eval.corpus(),
                hi,
                lo,
                backend: backend.backend(),
                damp,
                group,
                predictor: predictor.config(),
                format: pick_format(format, &out),
            };
            cmd_compare(&model, &args, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
