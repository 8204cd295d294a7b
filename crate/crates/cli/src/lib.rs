//! Command implementations behind the `moeq` binary.
//!
//! Each command reads and writes container files (see [`container`]) and
//! reports through [`CliError`], which carries the process exit code:
//! 2 for anything wrong with the invocation or its inputs, 3 for a
//! numerical failure during quantization (the message names the weight).

pub mod container;
pub mod specfile;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use moeq_core::allocate::{apply_plan, average_bits, ApplyError, QuantizeOptions, QuantizedModel};
use moeq_core::calibration::{
    capture_block_io, capture_layer_inputs, generate_calibration, profile_usage, CalibrationSet,
};
use moeq_core::eval::{
    compare, parse_report_csv, perplexity, render_report, spec_hash, CompareOptions, EvalError,
    EvalReport, ReportFormat, ReportRow, Strategy, FP_BITS,
};
use moeq_core::model::{build_model, MoeModel};
use moeq_core::predictor::{predict_block_scores, train_block_predictor, PredictorConfig};
use moeq_core::quant::{BitWidth, QuantBackend};

use container::{
    decode_model, decode_quantized, encode_model, encode_predictor, encode_quantized,
    parse_plan, render_plan, MODEL_MAGIC, QUANT_MAGIC,
};
use specfile::parse_spec;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or unusable input files; exit code 2.
    Usage(String),
    /// Quantization failed numerically; the message names the weight;
    /// exit code 3.
    Numerical(String),
    /// Filesystem trouble; exit code 1.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Numerical(msg) | CliError::Io(msg) => {
                write!(f, "{msg}")
            }
        }
    }
}

impl std::error::Error for CliError {}

impl From<ApplyError> for CliError {
    fn from(e: ApplyError) -> Self {
        CliError::Numerical(format!("{e}"))
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Apply(inner) => inner.into(),
            other => CliError::Usage(format!("{other}")),
        }
    }
}

fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(format!("{e}"))
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<MoeModel, CliError> {
    decode_model(&read_file(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Seed, sequence count, and sequence length for a synthetic corpus.
#[derive(Debug, Clone, Copy)]
pub struct CorpusArgs {
    pub seed: u64,
    pub sequences: usize,
    pub length: usize,
}

impl CorpusArgs {
    fn generate(&self, vocab: usize) -> Result<CalibrationSet, CliError> {
        if self.sequences == 0 || self.length == 0 {
            return Err(CliError::Usage(
                "corpus needs at least 1 sequence of at least 1 token".to_string(),
            ));
        }
        Ok(generate_calibration(self.seed, self.sequences, self.length, vocab))
    }
}

fn parse_bits_flag(bits: u32, flag: &str) -> Result<BitWidth, CliError> {
    BitWidth::try_from_bits(bits)
        .ok_or_else(|| CliError::Usage(format!("--{flag} must be one of 2, 3, 4, 8, got {bits}")))
}

pub fn cmd_build(spec_path: &Path, out: &Path) -> Result<(), CliError> {
    let text = String::from_utf8(read_file(spec_path)?)
        .map_err(|_| usage(format!("{}: not utf-8", spec_path.display())))?;
    let spec = parse_spec(&text).map_err(usage)?;
    let model = build_model(&spec).map_err(usage)?;
    write_file(out, &encode_model(&model))?;
    println!(
        "built {} ({} weight matrices, {} parameters)",
        out.display(),
        model.weight_ids().len(),
        model.weight_ids().iter().map(|id| {
            let w = model.weight(id).expect("listed id resolves");
            w.rows() * w.cols()
        }).sum::<usize>()
    );
    Ok(())
}

pub fn cmd_profile(model_path: &Path, corpus: CorpusArgs, out: &Path) -> Result<(), CliError> {
    let model = load_model(model_path)?;
    let calib = corpus.generate(model.spec.vocab_size)?;
    let profile = profile_usage(&model, &calib).map_err(usage)?;

    let mut text = String::new();
    for (layer, freqs) in &profile.per_block {
        text.push_str(&format!("block {layer}\n"));
        for (e, &u) in freqs.iter().enumerate() {
            let bar = "#".repeat((u * 40.0).round() as usize);
            text.push_str(&format!("  expert {e} {u} {bar}\n"));
        }
    }
    write_file(out, text.as_bytes())?;
    print!("{text}");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMethod {
    Outlier,
    Predictor,
}

pub struct ScoreArgs {
    pub method: ScoreMethod,
    pub corpus: CorpusArgs,
    pub predictor: PredictorConfig,
    /// Where to store the trained predictor, if anywhere.
    pub save_predictor: Option<std::path::PathBuf>,
}

pub fn cmd_score(model_path: &Path, args: &ScoreArgs, out: &Path) -> Result<(), CliError> {
    let model = load_model(model_path)?;
    let mut text = String::new();
    match args.method {
        ScoreMethod::Outlier => {
            for (id, score) in moeq_core::allocate::outlier_scores(&model) {
                text.push_str(&format!("{id} {score}\n"));
            }
        }
        ScoreMethod::Predictor => {
            let calib = args.corpus.generate(model.spec.vocab_size)?;
            let trace = capture_block_io(&model, &calib).map_err(usage)?;
            let bsp = train_block_predictor(&trace, &args.predictor).map_err(usage)?;
            for (layer, score) in predict_block_scores(&bsp, &trace.inputs()) {
                text.push_str(&format!("block {layer} {score}\n"));
            }
            if let Some(path) = &args.save_predictor {
                write_file(path, &encode_predictor(&bsp))?;
            }
        }
    }
    write_file(out, text.as_bytes())?;
    print!("{text}");
    Ok(())
}

pub struct PlanArgs {
    pub strategy: String,
    pub hi: u32,
    pub lo: u32,
    /// Seed for any random steps in the strategy.
    pub seed: u64,
    pub corpus: CorpusArgs,
    pub predictor: PredictorConfig,
}

pub fn cmd_plan(model_path: &Path, args: &PlanArgs, out: &Path) -> Result<(), CliError> {
    let model = load_model(model_path)?;
    let strategy = Strategy::parse(&args.strategy)?;
    if strategy.is_fp() {
        return Err(CliError::Usage("`fp` leaves nothing to plan".to_string()));
    }
    let calib = args.corpus.generate(model.spec.vocab_size)?;
    let mut builder = moeq_core::eval::PlanBuilder::new(
        &model,
        &calib,
        parse_bits_flag(args.hi, "hi")?,
        parse_bits_flag(args.lo, "lo")?,
    );
    builder.predictor_config = args.predictor;
    let plan = builder.build(&strategy, args.seed)?;
    write_file(out, render_plan(&plan).as_bytes())?;
    println!(
        "planned `{}`: {} assignments, average {:.4} bits",
        strategy.label(),
        plan.assignments.len(),
        average_bits(&plan, &model)
    );
    Ok(())
}

pub struct QuantizeArgs {
    pub corpus: CorpusArgs,
    pub backend: QuantBackend,
    pub damp: f64,
    pub group: usize,
}

pub fn cmd_quantize(
    model_path: &Path,
    plan_path: &Path,
    args: &QuantizeArgs,
    out: &Path,
) -> Result<(), CliError> {
    if args.group == 0 {
        return Err(CliError::Usage("--group must be at least 1".to_string()));
    }
    if !(args.damp.is_finite() && args.damp > 0.0) {
        return Err(CliError::Usage(format!("--damp must be positive, got {}", args.damp)));
    }
    let model = load_model(model_path)?;
    let plan_text = String::from_utf8(read_file(plan_path)?)
        .map_err(|_| usage(format!("{}: not utf-8", plan_path.display())))?;
    let plan = parse_plan(&plan_text).map_err(|e| usage(format!("{}: {e}", plan_path.display())))?;
    plan.validate_for(&model).map_err(usage)?;

    let calib = args.corpus.generate(model.spec.vocab_size)?;
    let captures = match args.backend {
        QuantBackend::Rtn => BTreeMap::new(),
        QuantBackend::Gptq => capture_layer_inputs(&model, &calib).map_err(usage)?,
    };
    let opts = QuantizeOptions {
        backend: args.backend,
        group_size: args.group,
        damp_ratio: args.damp,
    };
    let qm = apply_plan(&model, &plan, &captures, &opts)?;
    write_file(out, &encode_quantized(&qm, calib.seed))?;
    println!(
        "quantized {} weights at average {:.4} bits ({})",
        qm.weights.len(),
        average_bits(&plan, &model),
        args.backend.tag()
    );
    Ok(())
}

/// Parameter-weighted average code width of a quantized model.
fn quantized_avg_bits(qm: &QuantizedModel) -> f64 {
    let mut bits = 0.0;
    let mut params = 0.0;
    for qw in &qm.weights {
        let n = (qw.tensor.rows * qw.tensor.cols) as f64;
        bits += n * qw.tensor.bits.bits() as f64;
        params += n;
    }
    bits / params
}

pub struct EvalArgs {
    pub corpus: CorpusArgs,
    pub format: ReportFormat,
}

pub fn cmd_eval(model_path: &Path, args: &EvalArgs, out: &Path) -> Result<(), CliError> {
    let bytes = read_file(model_path)?;
    let (row, spec, calib_seed) = if bytes.starts_with(QUANT_MAGIC) {
        let (qm, calib_seed) = decode_quantized(&bytes)
            .map_err(|e| usage(format!("{}: {e}", model_path.display())))?;
        if args.corpus.seed == calib_seed {
            return Err(CliError::Usage(format!(
                "evaluation seed {} collides with the container's calibration seed",
                args.corpus.seed
            )));
        }
        let eval_set = args.corpus.generate(qm.spec.vocab_size)?;
        let ppl = perplexity(&qm.dequantize(), &eval_set)?;
        let label = if qm.provenance.is_empty() {
            "quantized".to_string()
        } else {
            qm.provenance.join("+")
        };
        let row = ReportRow {
            strategy: label,
            avg_bits: quantized_avg_bits(&qm),
            mean_ppl: ppl,
            std_ppl: None,
            per_seed: vec![ppl],
            pareto: true,
        };
        (row, qm.spec, calib_seed)
    } else if bytes.starts_with(MODEL_MAGIC) {
        let model =
            decode_model(&bytes).map_err(|e| usage(format!("{}: {e}", model_path.display())))?;
        let eval_set = args.corpus.generate(model.spec.vocab_size)?;
        let ppl = perplexity(&model, &eval_set)?;
        let row = ReportRow {
            strategy: "fp".to_string(),
            avg_bits: FP_BITS,
            mean_ppl: ppl,
            std_ppl: None,
            per_seed: vec![ppl],
            pareto: true,
        };
        (row, model.spec, 0)
    } else {
        return Err(usage(format!(
            "{}: neither a MOEQ1 nor a MOEQZ1 container",
            model_path.display()
        )));
    };

    let report = EvalReport {
        rows: vec![row],
        spec_hash: spec_hash(&spec),
        calib_seed,
        eval_seed: args.corpus.seed,
    };
    let text = render_report(&report, args.format);
    write_file(out, text.as_bytes())?;
    print!("{text}");
    Ok(())
}

pub struct CompareArgs {
    pub strategies: String,
    pub seeds: Vec<u64>,
    pub calib: CorpusArgs,
    pub eval: CorpusArgs,
    pub hi: u32,
    pub lo: u32,
    pub backend: QuantBackend,
    pub damp: f64,
    pub group: usize,
    pub predictor: PredictorConfig,
    pub format: ReportFormat,
}

pub fn cmd_compare(model_path: &Path, args: &CompareArgs, out: &Path) -> Result<(), CliError> {
    if args.seeds.is_empty() {
        return Err(CliError::Usage("--seeds must name at least one seed".to_string()));
    }
    let model = load_model(model_path)?;
    let strategies = Strategy::parse_list(&args.strategies)?;
    if strategies.is_empty() {
        return Err(CliError::Usage("--strategies must name at least one strategy".to_string()));
    }
    let calib = args.calib.generate(model.spec.vocab_size)?;
    let eval_set = args.eval.generate(model.spec.vocab_size)?;
    let opts = CompareOptions {
        hi: parse_bits_flag(args.hi, "hi")?,
        lo: parse_bits_flag(args.lo, "lo")?,
        quant: QuantizeOptions {
            backend: args.backend,
            group_size: args.group,
            damp_ratio: args.damp,
        },
        predictor: args.predictor,
    };
    let report = compare(&model, &strategies, &calib, &eval_set, &args.seeds, &opts)?;
    let text = render_report(&report, args.format);
    write_file(out, text.as_bytes())?;
    print!("{text}");
    Ok(())
}

/// Re-parses a CSV report, for tools that consume `eval`/`compare` output.
pub fn load_report_csv(path: &Path) -> Result<EvalReport, CliError> {
    let text = String::from_utf8(read_file(path)?)
        .map_err(|_| usage(format!("{}: not utf-8", path.display())))?;
    parse_report_csv(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}
