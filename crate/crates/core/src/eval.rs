//! Perplexity evaluation and strategy comparison: parses allocation
//! strategy descriptions, builds and applies their plans, evaluates each
//! variant on a held-out corpus, and renders sorted, Pareto-annotated
//! reports as markdown or CSV.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::allocate::{
    apply_plan, average_bits, compose, plan_alpha_mix, plan_attention, plan_blocks,
    plan_frequency, plan_outlier_topk, plan_random_blocks, plan_random_experts,
    plan_random_ffnn, plan_shared_experts, ApplyError, BitPlan, BlockSelect, PlanError,
    QuantizeOptions, TopSelect,
};
use crate::calibration::{
    capture_block_io, capture_layer_inputs, profile_usage, CalibrationError, CalibrationSet,
    UsageProfile,
};
use crate::math;
use crate::model::{ModelError, ModelSpec, MoeModel, WeightId};
use crate::predictor::{
    plan_predicted_blocks, predict_block_scores, train_block_predictor, PredictorConfig,
    PredictorError,
};
use crate::quant::BitWidth;

/// Bits-per-weight reported for the unquantized model (f64 storage).
pub const FP_BITS: f64 = 64.0;

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    /// Calibration and evaluation corpora must come from different seeds.
    SeedCollision { seed: u64 },
    BadStrategy { text: String },
    BadReport { line: String },
    Calibration(CalibrationError),
    Model(ModelError),
    Plan(PlanError),
    Apply(ApplyError),
    Predictor(PredictorError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::SeedCollision { seed } => {
                write!(f, "evaluation seed {seed} collides with the calibration seed")
            }
            EvalError::BadStrategy { text } => write!(f, "unrecognized strategy `{text}`"),
            EvalError::BadReport { line } => write!(f, "malformed report line `{line}`"),
            EvalError::Calibration(e) => write!(f, "{e}"),
            EvalError::Model(e) => write!(f, "{e}"),
            EvalError::Plan(e) => write!(f, "{e}"),
            EvalError::Apply(e) => write!(f, "{e}"),
            EvalError::Predictor(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for EvalError {}

impl From<CalibrationError> for EvalError {
    fn from(e: CalibrationError) -> Self {
        EvalError::Calibration(e)
    }
}
impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}
impl From<PlanError> for EvalError {
    fn from(e: PlanError) -> Self {
        EvalError::Plan(e)
    }
}
impl From<ApplyError> for EvalError {
    fn from(e: ApplyError) -> Self {
        EvalError::Apply(e)
    }
}
impl From<PredictorError> for EvalError {
    fn from(e: PredictorError) -> Self {
        EvalError::Predictor(e)
    }
}

// ── Perplexity ───────────────────────────────────────────────────────────

/// exp(mean next-token negative log-likelihood) over every predicted
/// position of every sequence of length ≥ 2, with a max-shifted
/// log-sum-exp for stability.
pub fn perplexity(model: &MoeModel, eval_set: &CalibrationSet) -> Result<f64, EvalError> {
    let mut total_nll = 0.0;
    let mut positions = 0usize;
    for seq in &eval_set.sequences {
        if seq.len() < 2 {
            continue;
        }
        let logits = model.forward(seq)?;
        for pos in 0..seq.len() - 1 {
            let row = logits.row(pos);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| math::exp(v - max)).sum();
            let lse = max + math::ln(sum);
            total_nll += lse - row[seq[pos + 1] as usize];
            positions += 1;
        }
    }
    if positions == 0 {
        return Err(EvalError::Calibration(CalibrationError::EmptyCalibration));
    }
    Ok(math::exp(total_nll / positions as f64))
}

// ── Strategies ───────────────────────────────────────────────────────────

/// One planning step. Steps using a random draw carry no seed of their
/// own; the evaluation loop supplies one per trial.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanStep {
    /// No quantization at all; must be a strategy's only step.
    Fp,
    /// Every quantizable weight at the given width.
    Uniform(BitWidth),
    Attn,
    Shared,
    Freq(usize),
    FirstL(usize),
    LastL(usize),
    Outlier(TopSelect),
    Alpha { alpha: f64, budget: usize },
    Predicted(usize),
    RandExperts(usize),
    RandBlocks(usize),
    RandFfnn(usize),
}

impl PlanStep {
    pub fn parse(token: &str) -> Result<Self, EvalError> {
        let bad = || EvalError::BadStrategy { text: token.to_string() };
        let (head, rest) = match token.split_once(':') {
            Some((h, r)) => (h, Some(r)),
            None => (token, None),
        };
        let parse_usize = |s: Option<&str>| s.and_then(|v| v.parse::<usize>().ok()).ok_or_else(bad);
        match head {
            "fp" if rest.is_none() => Ok(PlanStep::Fp),
            "attn" if rest.is_none() => Ok(PlanStep::Attn),
            "shared" if rest.is_none() => Ok(PlanStep::Shared),
            "uniform" => {
                let bits = rest.and_then(|v| v.parse::<u32>().ok()).ok_or_else(bad)?;
                BitWidth::try_from_bits(bits).map(PlanStep::Uniform).ok_or_else(bad)
            }
            "freq" => Ok(PlanStep::Freq(parse_usize(rest)?)),
            "firstl" => Ok(PlanStep::FirstL(parse_usize(rest)?)),
            "lastl" => Ok(PlanStep::LastL(parse_usize(rest)?)),
            "predicted" => Ok(PlanStep::Predicted(parse_usize(rest)?)),
            "randexperts" => Ok(PlanStep::RandExperts(parse_usize(rest)?)),
            "randblocks" => Ok(PlanStep::RandBlocks(parse_usize(rest)?)),
            "randffnn" => Ok(PlanStep::RandFfnn(parse_usize(rest)?)),
            "outlier" => {
                let r = rest.ok_or_else(bad)?;
                if r.contains('.') {
                    let p: f64 = r.parse().map_err(|_| bad())?;
                    if !(p > 0.0 && p <= 1.0) {
                        return Err(bad());
                    }
                    Ok(PlanStep::Outlier(TopSelect::Fraction(p)))
                } else {
                    Ok(PlanStep::Outlier(TopSelect::Count(r.parse().map_err(|_| bad())?)))
                }
            }
            "alpha" => {
                let r = rest.ok_or_else(bad)?;
                let (a, b) = r.split_once(':').ok_or_else(bad)?;
                let alpha: f64 = a.parse().map_err(|_| bad())?;
                let budget: usize = b.parse().map_err(|_| bad())?;
                Ok(PlanStep::Alpha { alpha, budget })
            }
            _ => Err(bad()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            PlanStep::Fp => String::from("fp"),
            PlanStep::Uniform(b) => format!("uniform:{b}"),
            PlanStep::Attn => String::from("attn"),
            PlanStep::Shared => String::from("shared"),
            PlanStep::Freq(k) => format!("freq:{k}"),
            PlanStep::FirstL(k) => format!("firstl:{k}"),
            PlanStep::LastL(k) => format!("lastl:{k}"),
            PlanStep::Outlier(TopSelect::Count(k)) => format!("outlier:{k}"),
            PlanStep::Outlier(TopSelect::Fraction(p)) => format!("outlier:{p}"),
            PlanStep::Alpha { alpha, budget } => format!("alpha:{alpha}:{budget}"),
            PlanStep::Predicted(k) => format!("predicted:{k}"),
            PlanStep::RandExperts(k) => format!("randexperts:{k}"),
            PlanStep::RandBlocks(k) => format!("randblocks:{k}"),
            PlanStep::RandFfnn(k) => format!("randffnn:{k}"),
        }
    }

    pub fn is_random(&self) -> bool {
        matches!(
            self,
            PlanStep::RandExperts(_) | PlanStep::RandBlocks(_) | PlanStep::RandFfnn(_)
        )
    }
}

/// An ordered composition of plan steps, later steps overriding earlier.
#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    pub steps: Vec<PlanStep>,
}

impl Strategy {
    /// Parses one strategy: steps separated by commas, e.g.
    /// `attn,shared,freq:2`.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let steps: Vec<PlanStep> = text
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(PlanStep::parse)
            .collect::<Result<_, _>>()?;
        if steps.is_empty() {
            return Err(EvalError::BadStrategy { text: text.to_string() });
        }
        if steps.contains(&PlanStep::Fp) && steps.len() > 1 {
            return Err(EvalError::BadStrategy { text: text.to_string() });
        }
        Ok(Strategy { steps })
    }

    /// Parses a `;`-separated list of strategies.
    pub fn parse_list(text: &str) -> Result<Vec<Self>, EvalError> {
        text.split(';')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(Strategy::parse)
            .collect()
    }

    /// Report label: step labels joined by `+` (comma-free, so the label
    /// is CSV-safe).
    pub fn label(&self) -> String {
        let parts: Vec<String> = self.steps.iter().map(PlanStep::label).collect();
        parts.join("+")
    }

    pub fn is_fp(&self) -> bool {
        self.steps.contains(&PlanStep::Fp)
    }

    pub fn is_random(&self) -> bool {
        self.steps.iter().any(PlanStep::is_random)
    }
}

/// Builds plans for strategies against one model/calibration pair, computing
/// usage profiles, outlier scores, and block score predictors only when a
/// step first needs them.
pub struct PlanBuilder<'a> {
    model: &'a MoeModel,
    calib: &'a CalibrationSet,
    pub hi: BitWidth,
    pub lo: BitWidth,
    pub predictor_config: PredictorConfig,
    usage: Option<UsageProfile>,
    scores: Option<BTreeMap<WeightId, f64>>,
    block_scores: Option<BTreeMap<usize, f64>>,
}

impl<'a> PlanBuilder<'a> {
    pub fn new(
        model: &'a MoeModel,
        calib: &'a CalibrationSet,
        hi: BitWidth,
        lo: BitWidth,
    ) -> Self {
        PlanBuilder {
            model,
            calib,
            hi,
            lo,
            predictor_config: PredictorConfig::default(),
            usage: None,
            scores: None,
            block_scores: None,
        }
    }

    fn usage(&mut self) -> Result<&UsageProfile, EvalError> {
        if self.usage.is_none() {
            self.usage = Some(profile_usage(self.model, self.calib)?);
        }
        Ok(self.usage.as_ref().expect("just filled"))
    }

    fn scores(&mut self) -> Result<&BTreeMap<WeightId, f64>, EvalError> {
        if self.scores.is_none() {
            self.scores = Some(crate::allocate::outlier_scores(self.model));
        }
        Ok(self.scores.as_ref().expect("just filled"))
    }

    fn block_scores(&mut self) -> Result<&BTreeMap<usize, f64>, EvalError> {
        if self.block_scores.is_none() {
            let trace = capture_block_io(self.model, self.calib)?;
            let bsp = train_block_predictor(&trace, &self.predictor_config)?;
            self.block_scores = Some(predict_block_scores(&bsp, &trace.inputs()));
        }
        Ok(self.block_scores.as_ref().expect("just filled"))
    }

    /// Builds the composed plan for one strategy; `seed` feeds any random
    /// steps. `Fp` strategies have no plan and are rejected here.
    pub fn build(&mut self, strategy: &Strategy, seed: u64) -> Result<BitPlan, EvalError> {
        if strategy.is_fp() {
            return Err(EvalError::BadStrategy { text: strategy.label() });
        }
        let (hi, lo) = (self.hi, self.lo);
        let mut parts: Vec<BitPlan> = Vec::new();
        for step in &strategy.steps {
            let plan = match step {
                PlanStep::Fp => unreachable!("checked above"),
                PlanStep::Uniform(bits) => {
                    let mut p = BitPlan::uniform(*bits);
                    for id in self.model.quantizable_ids() {
                        p.assignments.insert(id, *bits);
                    }
                    p
                }
                PlanStep::Attn => plan_attention(self.model, hi),
                PlanStep::Shared => plan_shared_experts(self.model, hi),
                PlanStep::Freq(k) => {
                    let usage = self.usage()?.clone();
                    plan_frequency(self.model, &usage, *k, hi, lo)?
                }
                PlanStep::FirstL(k) => plan_blocks(self.model, &BlockSelect::FirstK(*k), hi),
                PlanStep::LastL(k) => plan_blocks(self.model, &BlockSelect::LastK(*k), hi),
                PlanStep::Outlier(select) => plan_outlier_topk(self.model, *select, hi, lo),
                PlanStep::Alpha { alpha, budget } => {
                    let usage = self.usage()?.clone();
                    let scores = self.scores()?.clone();
                    plan_alpha_mix(self.model, &usage, &scores, *budget, *alpha)?
                }
                PlanStep::Predicted(k) => {
                    let scores = self.block_scores()?.clone();
                    plan_predicted_blocks(self.model, &scores, *k, hi)
                }
                PlanStep::RandExperts(k) => plan_random_experts(self.model, *k, hi, lo, seed),
                PlanStep::RandBlocks(k) => plan_random_blocks(self.model, *k, hi, seed),
                PlanStep::RandFfnn(n) => plan_random_ffnn(self.model, *n, hi, lo, seed),
            };
            parts.push(plan);
        }
        Ok(compose(&parts, self.lo))
    }
}

// ── Reports ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub strategy: String,
    pub avg_bits: f64,
    pub mean_ppl: f64,
    /// Sample standard deviation over the per-seed runs; absent for
    /// single-run (deterministic) strategies.
    pub std_ppl: Option<f64>,
    pub per_seed: Vec<f64>,
    pub pareto: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub spec_hash: u64,
    pub calib_seed: u64,
    pub eval_seed: u64,
}

/// FNV-1a over the spec's fields; identifies a model configuration in
/// report metadata.
pub fn spec_hash(spec: &ModelSpec) -> u64 {
    let fields = [
        spec.vocab_size as u64,
        spec.hidden_dim as u64,
        spec.ffnn_dim as u64,
        spec.num_layers as u64,
        spec.num_experts as u64,
        spec.top_k as u64,
        spec.num_shared_experts as u64,
        spec.first_layer_dense as u64,
        spec.seed,
    ];
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in fields {
        for b in v.to_le_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_std(values: &[f64]) -> f64 {
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64;
    math::sqrt(var)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareOptions {
    pub hi: BitWidth,
    pub lo: BitWidth,
    pub quant: QuantizeOptions,
    pub predictor: PredictorConfig,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            hi: BitWidth::B4,
            lo: BitWidth::B2,
            quant: QuantizeOptions::default(),
            predictor: PredictorConfig::default(),
        }
    }
}

/// Evaluates every strategy on the same model and corpora. Deterministic
/// strategies run once; strategies with random steps run once per seed and
/// report mean ± std. Rows come back sorted by average bits, Pareto
/// annotations computed over (avg_bits, mean perplexity).
pub fn compare(
    model: &MoeModel,
    strategies: &[Strategy],
    calib: &CalibrationSet,
    eval_set: &CalibrationSet,
    seeds: &[u64],
    opts: &CompareOptions,
) -> Result<EvalReport, EvalError> {
    assert!(!seeds.is_empty());
    if eval_set.seed == calib.seed {
        return Err(EvalError::SeedCollision { seed: eval_set.seed });
    }
    let mut builder = PlanBuilder::new(model, calib, opts.hi, opts.lo);
    builder.predictor_config = opts.predictor;
    let mut captures = None;

    let mut rows = Vec::with_capacity(strategies.len());
    for strategy in strategies {
        let row = if strategy.is_fp() {
            let ppl = perplexity(model, eval_set)?;
            ReportRow {
                strategy: strategy.label(),
                avg_bits: FP_BITS,
                mean_ppl: ppl,
                std_ppl: None,
                per_seed: vec![ppl],
                pareto: false,
            }
        } else {
            if captures.is_none() {
                captures = Some(capture_layer_inputs(model, calib)?);
            }
            let captures = captures.as_ref().expect("just filled");
            let trial_seeds: &[u64] = if strategy.is_random() { seeds } else { &seeds[..1] };
            let mut per_seed = Vec::with_capacity(trial_seeds.len());
            let mut bits = Vec::with_capacity(trial_seeds.len());
            for &seed in trial_seeds {
                let plan = builder.build(strategy, seed)?;
                let quantized = apply_plan(model, &plan, captures, &opts.quant)?;
                per_seed.push(perplexity(&quantized.dequantize(), eval_set)?);
                bits.push(average_bits(&plan, model));
            }
            let std_ppl = if per_seed.len() >= 2 { Some(sample_std(&per_seed)) } else { None };
            ReportRow {
                strategy: strategy.label(),
                avg_bits: mean(&bits),
                mean_ppl: mean(&per_seed),
                std_ppl,
                per_seed,
                pareto: false,
            }
        };
        rows.push(row);
    }

    rows.sort_by(|a, b| a.avg_bits.partial_cmp(&b.avg_bits).expect("finite bits"));
    let snapshot: Vec<(f64, f64)> = rows.iter().map(|r| (r.avg_bits, r.mean_ppl)).collect();
    for row in &mut rows {
        row.pareto = !snapshot.iter().any(|&(bits, ppl)| {
            (bits <= row.avg_bits && ppl < row.mean_ppl)
                || (bits < row.avg_bits && ppl <= row.mean_ppl)
        });
    }

    Ok(EvalReport {
        rows,
        spec_hash: spec_hash(&model.spec),
        calib_seed: calib.seed,
        eval_seed: eval_set.seed,
    })
}

// ── Rendering ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

/// Renders a report. Markdown is for reading; CSV prints every real with
/// the shortest exact decimal form, so parsing it back reproduces the
/// report bit-for-bit.
pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => {
            let mut out = String::new();
            out.push_str(&format!(
                "model {:016x} | calib seed {} | eval seed {}\n\n",
                report.spec_hash, report.calib_seed, report.eval_seed
            ));
            out.push_str("| strategy | avg bits | perplexity | pareto |\n");
            out.push_str("|---|---|---|---|\n");
            for row in &report.rows {
                let ppl = match row.std_ppl {
                    Some(std) => format!("{:.4} ± {:.4}", row.mean_ppl, std),
                    None => format!("{:.4}", row.mean_ppl),
                };
                out.push_str(&format!(
                    "| {} | {:.4} | {} | {} |\n",
                    row.strategy,
                    row.avg_bits,
                    ppl,
                    if row.pareto { "*" } else { "" }
                ));
            }
            out
        }
        ReportFormat::Csv => {
            let mut out = String::new();
            out.push_str(&format!(
                "# spec_hash={:016x} calib_seed={} eval_seed={}\n",
                report.spec_hash, report.calib_seed, report.eval_seed
            ));
            out.push_str("strategy,avg_bits,mean_ppl,std_ppl,per_seed,pareto\n");
            for row in &report.rows {
                let std = row.std_ppl.map(|v| format!("{v}")).unwrap_or_default();
                let per_seed: Vec<String> = row.per_seed.iter().map(|v| format!("{v}")).collect();
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    row.strategy,
                    row.avg_bits,
                    row.mean_ppl,
                    std,
                    per_seed.join("|"),
                    row.pareto
                ));
            }
            out
        }
    }
}

/// Parses the CSV form back into a report; values round-trip exactly.
pub fn parse_report_csv(text: &str) -> Result<EvalReport, EvalError> {
    let bad = |line: &str| EvalError::BadReport { line: line.to_string() };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());

    let meta = lines.next().ok_or_else(|| bad(""))?;
    let meta_body = meta.strip_prefix("# ").ok_or_else(|| bad(meta))?;
    let mut spec_hash = None;
    let mut calib_seed = None;
    let mut eval_seed = None;
    for part in meta_body.split_whitespace() {
        let (key, value) = part.split_once('=').ok_or_else(|| bad(meta))?;
        match key {
            "spec_hash" => spec_hash = u64::from_str_radix(value, 16).ok(),
            "calib_seed" => calib_seed = value.parse().ok(),
            "eval_seed" => eval_seed = value.parse().ok(),
            _ => return Err(bad(meta)),
        }
    }
    let (spec_hash, calib_seed, eval_seed) = match (spec_hash, calib_seed, eval_seed) {
        (Some(h), Some(c), Some(e)) => (h, c, e),
        _ => return Err(bad(meta)),
    };

    let header = lines.next().ok_or_else(|| bad(""))?;
    if header != "strategy,avg_bits,mean_ppl,std_ppl,per_seed,pareto" {
        return Err(bad(header));
    }

    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(bad(line));
        }
        let parse_f64 = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
        let std_ppl = if fields[3].is_empty() { None } else { Some(parse_f64(fields[3])?) };
        let per_seed = fields[4]
            .split('|')
            .map(parse_f64)
            .collect::<Result<Vec<f64>, EvalError>>()?;
        let pareto = match fields[5] {
            "true" => true,
            "false" => false,
            _ => return Err(bad(line)),
        };
        rows.push(ReportRow {
            strategy: fields[0].to_string(),
            avg_bits: parse_f64(fields[1])?,
            mean_ppl: parse_f64(fields[2])?,
            std_ppl,
            per_seed,
            pareto,
        });
    }
    Ok(EvalReport { rows, spec_hash, calib_seed, eval_seed })
}
