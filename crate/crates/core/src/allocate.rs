//! Bit-width planning: importance scorers, heuristic planners that map
//! model structure (attention, shared experts, frequent experts, block
//! depth) to per-weight bit widths, plan composition and application, and
//! the bits/quality Pareto frontier.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::calibration::UsageProfile;
use crate::math;
use crate::model::{
    AttentionWeights, Expert, FfnnLayer, Layer, ModelSpec, MoeModel, Projection, WeightId,
};
use crate::numerics::DenseMatrix;
use crate::quant::{
    gptq_quantize, rtn_quantize, BitWidth, GroupedQuantTensor, QuantBackend, QuantError,
    DEFAULT_DAMP_RATIO, DEFAULT_GROUP_SIZE,
};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum PlanError {
    /// The usage profile has no entry for an MoE block the planner needs.
    MissingUsage { layer: usize },
    InvalidAlpha { alpha: f64 },
    /// A plan assignment names a weight the model does not have, or one
    /// that must stay full precision.
    UnknownWeight { id: WeightId },
}

impl fmt::Display for PlanError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanError::MissingUsage { layer } => {
                write!(f, "usage profile has no entry for block {layer}")
            }
            PlanError::InvalidAlpha { alpha } => {
                write!(f, "alpha must lie in [0, 1], got {alpha}")
            }
            PlanError::UnknownWeight { id } => {
                write!(f, "plan names `{id}`, which is not a quantizable weight of this model")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for PlanError {}

/// Quantization failure tagged with the weight it happened on.
#[derive(Debug, Clone, PartialEq)]
pub struct ApplyError {
    pub id: WeightId,
    pub source: QuantError,
}

impl fmt::Display for ApplyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "quantizing `{}` failed: {}", self.id, self.source)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ApplyError {}

// ── Plans ────────────────────────────────────────────────────────────────

/// Per-weight bit assignments plus a default for everything unassigned.
/// Provenance lists the planner steps that produced it, in application
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct BitPlan {
    pub assignments: BTreeMap<WeightId, BitWidth>,
    pub default_bits: BitWidth,
    pub provenance: Vec<String>,
}

impl BitPlan {
    pub fn new(default_bits: BitWidth) -> Self {
        BitPlan { assignments: BTreeMap::new(), default_bits, provenance: Vec::new() }
    }

    pub fn uniform(bits: BitWidth) -> Self {
        let mut plan = BitPlan::new(bits);
        plan.provenance.push(format!("uniform:{bits}"));
        plan
    }

    pub fn bits_for(&self, id: &WeightId) -> BitWidth {
        self.assignments.get(id).copied().unwrap_or(self.default_bits)
    }

    /// Checks every assigned id resolves to a quantizable weight.
    pub fn validate_for(&self, model: &MoeModel) -> Result<(), PlanError> {
        for id in self.assignments.keys() {
            if !id.is_quantizable() || model.weight(id).is_none() {
                return Err(PlanError::UnknownWeight { id: *id });
            }
        }
        Ok(())
    }
}

// ── Outlier scoring ──────────────────────────────────────────────────────

/// Worst column's peak-to-mean absolute magnitude ratio. A matrix of
/// constant magnitudes scores exactly 1 (the minimum); an all-zero column
/// contributes 1.
pub fn outlier_score(w: &DenseMatrix) -> f64 {
    assert!(w.rows() > 0 && w.cols() > 0);
    let mut best = 1.0_f64;
    for c in 0..w.cols() {
        let mut max_abs = 0.0_f64;
        let mut sum_abs = 0.0_f64;
        for r in 0..w.rows() {
            let a = math::abs(w.get(r, c));
            max_abs = max_abs.max(a);
            sum_abs += a;
        }
        let ratio = if max_abs == 0.0 { 1.0 } else { max_abs / (sum_abs / w.rows() as f64) };
        best = best.max(ratio);
    }
    best
}

/// Outlier score for every FFNN linear (routed, shared, and dense expert
/// projections).
pub fn outlier_scores(model: &MoeModel) -> BTreeMap<WeightId, f64> {
    model
        .ffnn_ids()
        .into_iter()
        .map(|id| {
            let score = outlier_score(model.weight(&id).expect("ffnn id resolves"));
            (id, score)
        })
        .collect()
}

/// How many top entries a ranking keeps: an absolute count or a fraction
/// of the ranked population (rounded up, so any positive fraction keeps at
/// least one).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TopSelect {
    Count(usize),
    Fraction(f64),
}

impl TopSelect {
    pub fn resolve(&self, n: usize) -> usize {
        match *self {
            TopSelect::Count(k) => {
                assert!(k >= 1 && k <= n, "count must lie in 1..={n}, got {k}");
                k
            }
            TopSelect::Fraction(p) => {
                assert!(p > 0.0 && p <= 1.0, "fraction must lie in (0, 1], got {p}");
                (math::ceil(p * n as f64) as usize).min(n)
            }
        }
    }
}

/// Orders FFNN linears by score descending, ties by id.
fn rank_by_score_desc(scores: &BTreeMap<WeightId, f64>) -> Vec<WeightId> {
    let mut ranked: Vec<(WeightId, f64)> = scores.iter().map(|(id, s)| (*id, *s)).collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(&b.0)));
    ranked.into_iter().map(|(id, _)| id).collect()
}

/// Top-scoring FFNN linears (by outlier score) get `hi`, the rest `lo`.
/// Attention is left to the plan default.
pub fn plan_outlier_topk(
    model: &MoeModel,
    select: TopSelect,
    hi: BitWidth,
    lo: BitWidth,
) -> BitPlan {
    let scores = outlier_scores(model);
    let ranked = rank_by_score_desc(&scores);
    let k = select.resolve(ranked.len());
    let mut plan = BitPlan::new(lo);
    for (i, id) in ranked.into_iter().enumerate() {
        plan.assignments.insert(id, if i < k { hi } else { lo });
    }
    plan.provenance.push(format!("outlier:{k}@{hi}/{lo}"));
    plan
}

/// Within each MoE block, the `top_k` most-used routed experts (ties to
/// the lower expert index) get `hi` on all three projections; the other
/// routed experts get `lo`. Shared experts are untouched.
pub fn plan_frequency(
    model: &MoeModel,
    usage: &UsageProfile,
    top_k: usize,
    hi: BitWidth,
    lo: BitWidth,
) -> Result<BitPlan, PlanError> {
    assert!(top_k <= model.spec.num_experts);
    let mut plan = BitPlan::new(lo);
    for layer in model.moe_layer_indices() {
        let freqs =
            usage.per_block.get(&layer).ok_or(PlanError::MissingUsage { layer })?;
        let mut order: Vec<usize> = (0..freqs.len()).collect();
        order.sort_by(|&a, &b| freqs[b].partial_cmp(&freqs[a]).expect("finite usage").then(a.cmp(&b)));
        for (rank, &e) in order.iter().enumerate() {
            let bits = if rank < top_k { hi } else { lo };
            for p in Projection::FFNN {
                plan.assignments.insert(WeightId::expert(layer, e, p), bits);
            }
        }
    }
    plan.provenance.push(format!("freq:{top_k}@{hi}/{lo}"));
    Ok(plan)
}

/// Every attention projection at `hi`.
pub fn plan_attention(model: &MoeModel, hi: BitWidth) -> BitPlan {
    let mut plan = BitPlan::new(BitWidth::B2);
    for l in 0..model.spec.num_layers {
        for p in Projection::ATTENTION {
            plan.assignments.insert(WeightId::attention(l, p), hi);
        }
    }
    plan.provenance.push(format!("attn@{hi}"));
    plan
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockSelect {
    FirstK(usize),
    LastK(usize),
    Listed(Vec<usize>),
}

/// All expert projections (routed and shared) in the chosen MoE blocks at
/// `hi`. The dense first layer, when present, is always `hi` regardless of
/// the selection.
pub fn plan_blocks(model: &MoeModel, select: &BlockSelect, hi: BitWidth) -> BitPlan {
    let moe = model.moe_layer_indices();
    let chosen: Vec<usize> = match select {
        BlockSelect::FirstK(k) => moe.iter().copied().take(*k).collect(),
        BlockSelect::LastK(k) => {
            let skip = moe.len().saturating_sub(*k);
            moe.iter().copied().skip(skip).collect()
        }
        BlockSelect::Listed(layers) => {
            layers.iter().copied().filter(|l| moe.contains(l)).collect()
        }
    };
    let mut plan = BitPlan::new(BitWidth::B2);
    for layer in chosen {
        if let FfnnLayer::Moe { experts, shared, .. } = &model.layers[layer].ffnn {
            for e in 0..experts.len() {
                for p in Projection::FFNN {
                    plan.assignments.insert(WeightId::expert(layer, e, p), hi);
                }
            }
            for s in 0..shared.len() {
                for p in Projection::FFNN {
                    plan.assignments.insert(WeightId::shared(layer, s, p), hi);
                }
            }
        }
    }
    if model.spec.first_layer_dense {
        for p in Projection::FFNN {
            plan.assignments.insert(WeightId::dense(0, p), hi);
        }
    }
    let label = match select {
        BlockSelect::FirstK(k) => format!("firstl:{k}@{hi}"),
        BlockSelect::LastK(k) => format!("lastl:{k}@{hi}"),
        BlockSelect::Listed(layers) => {
            let mut s = String::from("blocks:");
            for (i, l) in layers.iter().enumerate() {
                if i > 0 {
                    s.push('+');
                }
                s.push_str(&format!("{l}"));
            }
            format!("{s}@{hi}")
        }
    };
    plan.provenance.push(label);
    plan
}

/// Every shared-expert projection at `hi`.
pub fn plan_shared_experts(model: &MoeModel, hi: BitWidth) -> BitPlan {
    let mut plan = BitPlan::new(BitWidth::B2);
    for id in model.ffnn_ids() {
        if id.kind == crate::model::WeightKind::SharedExpert {
            plan.assignments.insert(id, hi);
        }
    }
    plan.provenance.push(format!("shared@{hi}"));
    plan
}

/// Mixes the frequency and outlier rankings: round(alpha × budget) layer
/// slots come from per-block frequent experts (expanded to projections in
/// usage-descending order), the remainder from the outlier ranking,
/// skipping anything already chosen. Chosen layers get 4 bits, the other
/// FFNN linears 2.
pub fn plan_alpha_mix(
    model: &MoeModel,
    usage: &UsageProfile,
    scores: &BTreeMap<WeightId, f64>,
    budget_count: usize,
    alpha: f64,
) -> Result<BitPlan, PlanError> {
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(PlanError::InvalidAlpha { alpha });
    }
    let all_ffnn = model.ffnn_ids();
    assert!(budget_count <= all_ffnn.len());

    // (usage desc, layer asc, expert asc) over every routed expert.
    let mut expert_rank: Vec<(usize, usize, f64)> = Vec::new();
    for layer in model.moe_layer_indices() {
        let freqs = usage.per_block.get(&layer).ok_or(PlanError::MissingUsage { layer })?;
        for (e, &f) in freqs.iter().enumerate() {
            expert_rank.push((layer, e, f));
        }
    }
    expert_rank.sort_by(|a, b| {
        b.2.partial_cmp(&a.2).expect("finite usage").then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
    });

    let freq_slots = math::round(alpha * budget_count as f64) as usize;
    let mut chosen: Vec<WeightId> = Vec::new();
    'fill: for (layer, e, _) in &expert_rank {
        for p in Projection::FFNN {
            if chosen.len() >= freq_slots {
                break 'fill;
            }
            chosen.push(WeightId::expert(*layer, *e, p));
        }
    }
    for id in rank_by_score_desc(scores) {
        if chosen.len() >= budget_count {
            break;
        }
        if !chosen.contains(&id) {
            chosen.push(id);
        }
    }

    let mut plan = BitPlan::new(BitWidth::B2);
    for id in all_ffnn {
        plan.assignments.insert(id, BitWidth::B2);
    }
    for id in chosen {
        plan.assignments.insert(id, BitWidth::B4);
    }
    plan.provenance.push(format!("alpha:{alpha}:{budget_count}"));
    Ok(plan)
}

// ── Random baselines ─────────────────────────────────────────────────────

/// Per MoE block, `k` routed experts drawn without replacement get `hi`,
/// the rest `lo`. Shared experts untouched.
pub fn plan_random_experts(
    model: &MoeModel,
    k: usize,
    hi: BitWidth,
    lo: BitWidth,
    seed: u64,
) -> BitPlan {
    assert!(k <= model.spec.num_experts);
    let mut rng = Rng::new(seed);
    let mut plan = BitPlan::new(lo);
    for layer in model.moe_layer_indices() {
        let picked = rng.sample_distinct(model.spec.num_experts, k);
        for e in 0..model.spec.num_experts {
            let bits = if picked.contains(&e) { hi } else { lo };
            for p in Projection::FFNN {
                plan.assignments.insert(WeightId::expert(layer, e, p), bits);
            }
        }
    }
    plan.provenance.push(format!("randexperts:{k}@{hi}/{lo}"));
    plan
}

/// `count` FFNN linears drawn without replacement get `hi`; every other
/// FFNN linear gets `lo`.
pub fn plan_random_ffnn(
    model: &MoeModel,
    count: usize,
    hi: BitWidth,
    lo: BitWidth,
    seed: u64,
) -> BitPlan {
    let ids = model.ffnn_ids();
    assert!(count <= ids.len());
    let mut rng = Rng::new(seed);
    let picked = rng.sample_distinct(ids.len(), count);
    let mut plan = BitPlan::new(lo);
    for (i, id) in ids.into_iter().enumerate() {
        plan.assignments.insert(id, if picked.contains(&i) { hi } else { lo });
    }
    plan.provenance.push(format!("randffnn:{count}@{hi}/{lo}"));
    plan
}

/// `k` MoE blocks drawn without replacement, all their expert projections
/// at `hi`; dense first layer always `hi` when present (mirroring
/// `plan_blocks`).
pub fn plan_random_blocks(model: &MoeModel, k: usize, hi: BitWidth, seed: u64) -> BitPlan {
    let moe = model.moe_layer_indices();
    assert!(k <= moe.len());
    let mut rng = Rng::new(seed);
    let picked: Vec<usize> = rng.sample_distinct(moe.len(), k).into_iter().map(|i| moe[i]).collect();
    let mut plan = plan_blocks(model, &BlockSelect::Listed(picked), hi);
    plan.provenance.clear();
    plan.provenance.push(format!("randblocks:{k}@{hi}"));
    plan
}

// ── Composition and accounting ───────────────────────────────────────────

/// Merges plans left to right; later assignments win on conflicts. The
/// result's provenance is the concatenation of the inputs' in order.
pub fn compose(plans: &[BitPlan], default_bits: BitWidth) -> BitPlan {
    let mut out = BitPlan::new(default_bits);
    for plan in plans {
        for (id, bits) in &plan.assignments {
            out.assignments.insert(*id, *bits);
        }
        out.provenance.extend(plan.provenance.iter().cloned());
    }
    out
}

/// Parameter-weighted mean bit width over the quantizable weights.
/// Routers, embedding, output head, and norms carry no assignment and are
/// excluded from both sums.
pub fn average_bits(plan: &BitPlan, model: &MoeModel) -> f64 {
    let mut weighted = 0.0;
    let mut params = 0.0;
    for id in model.quantizable_ids() {
        let w = model.weight(&id).expect("quantizable id resolves");
        let n = (w.rows() * w.cols()) as f64;
        weighted += n * plan.bits_for(&id).bits() as f64;
        params += n;
    }
    weighted / params
}

// ── Application ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizeOptions {
    pub backend: QuantBackend,
    pub group_size: usize,
    pub damp_ratio: f64,
}

impl Default for QuantizeOptions {
    fn default() -> Self {
        QuantizeOptions {
            backend: QuantBackend::Gptq,
            group_size: DEFAULT_GROUP_SIZE,
            damp_ratio: DEFAULT_DAMP_RATIO,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeight {
    pub id: WeightId,
    pub tensor: GroupedQuantTensor,
}

/// A fully quantized model: every quantizable weight as coded groups,
/// routers / embedding / output head kept full precision.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub spec: ModelSpec,
    pub embedding: DenseMatrix,
    pub output_head: DenseMatrix,
    /// MoE layer index → full-precision router.
    pub routers: BTreeMap<usize, DenseMatrix>,
    /// Sorted by WeightId.
    pub weights: Vec<QuantizedWeight>,
    pub default_bits: BitWidth,
    pub provenance: Vec<String>,
}

impl QuantizedModel {
    pub fn weight(&self, id: &WeightId) -> Option<&GroupedQuantTensor> {
        self.weights
            .binary_search_by(|w| w.id.cmp(id))
            .ok()
            .map(|i| &self.weights[i].tensor)
    }

    /// Decodes every weight back to a dense model for forward passes.
    pub fn dequantize(&self) -> MoeModel {
        let deq = |id: &WeightId| -> DenseMatrix {
            self.weight(id).expect("quantized weight present").dequantize()
        };
        let spec = self.spec;
        let mut layers = Vec::with_capacity(spec.num_layers);
        for l in 0..spec.num_layers {
            let attn = AttentionWeights {
                q: deq(&WeightId::attention(l, Projection::Q)),
                k: deq(&WeightId::attention(l, Projection::K)),
                v: deq(&WeightId::attention(l, Projection::V)),
                o: deq(&WeightId::attention(l, Projection::O)),
            };
            let make_expert = |gate: WeightId, up: WeightId, down: WeightId| Expert {
                gate: deq(&gate),
                up: deq(&up),
                down: deq(&down),
            };
            let ffnn = if spec.first_layer_dense && l == 0 {
                FfnnLayer::Dense(make_expert(
                    WeightId::dense(l, Projection::Gate),
                    WeightId::dense(l, Projection::Up),
                    WeightId::dense(l, Projection::Down),
                ))
            } else {
                let router = self.routers.get(&l).expect("router present").clone();
                let experts = (0..spec.num_experts)
                    .map(|e| {
                        make_expert(
                            WeightId::expert(l, e, Projection::Gate),
                            WeightId::expert(l, e, Projection::Up),
                            WeightId::expert(l, e, Projection::Down),
                        )
                    })
                    .collect();
                let shared = (0..spec.num_shared_experts)
                    .map(|s| {
                        make_expert(
                            WeightId::shared(l, s, Projection::Gate),
                            WeightId::shared(l, s, Projection::Up),
                            WeightId::shared(l, s, Projection::Down),
                        )
                    })
                    .collect();
                FfnnLayer::Moe { router, experts, shared }
            };
            layers.push(Layer { attn, ffnn });
        }
        MoeModel {
            spec,
            embedding: self.embedding.clone(),
            layers,
            output_head: self.output_head.clone(),
        }
    }
}

/// Quantizes every quantizable weight at its planned bits. With the GPTQ
/// backend each weight uses its captured inputs; weights with no captures
/// (never-routed experts) fall back to RTN and are tagged so. A Hessian
/// that fails to factor is retried at 10× and 100× dampening before the
/// failure is reported with the offending weight id.
pub fn apply_plan(
    model: &MoeModel,
    plan: &BitPlan,
    captures: &BTreeMap<WeightId, DenseMatrix>,
    opts: &QuantizeOptions,
) -> Result<QuantizedModel, ApplyError> {
    let mut weights = Vec::new();
    for id in model.quantizable_ids() {
        let w = model.weight(&id).expect("quantizable id resolves");
        let bits = plan.bits_for(&id);
        let tensor = match opts.backend {
            QuantBackend::Rtn => rtn_quantize(w, bits, opts.group_size),
            QuantBackend::Gptq => {
                let x = captures.get(&id).filter(|x| x.rows() > 0);
                match x {
                    None => rtn_quantize(w, bits, opts.group_size),
                    Some(x) => {
                        let mut result = Err(QuantError::EmptyCalibration);
                        for mult in [1.0, 10.0, 100.0] {
                            result = gptq_quantize(w, x, bits, opts.group_size, opts.damp_ratio * mult);
                            match &result {
                                Err(QuantError::NotPositiveDefinite { .. }) => continue,
                                _ => break,
                            }
                        }
                        match result {
                            Ok(t) => t,
                            Err(QuantError::EmptyCalibration) => {
                                rtn_quantize(w, bits, opts.group_size)
                            }
                            Err(source) => return Err(ApplyError { id, source }),
                        }
                    }
                }
            }
        };
        weights.push(QuantizedWeight { id, tensor });
    }
    let mut routers = BTreeMap::new();
    for layer in model.moe_layer_indices() {
        let router = model.weight(&WeightId::router(layer)).expect("router resolves");
        routers.insert(layer, router.clone());
    }
    Ok(QuantizedModel {
        spec: model.spec,
        embedding: model.embedding.clone(),
        output_head: model.output_head.clone(),
        routers,
        weights,
        default_bits: plan.default_bits,
        provenance: plan.provenance.clone(),
    })
}

// ── Pareto frontier ──────────────────────────────────────────────────────

/// One evaluated allocation: its plan, parameter-weighted bits, and a
/// quality metric where lower is better (perplexity).
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoPoint {
    pub plan: BitPlan,
    pub avg_bits: f64,
    pub metric: f64,
}

/// Points not dominated by any other: q dominates p when q is no larger
/// in bits with a strictly better metric, or strictly smaller in bits with
/// a metric at least as good. Output sorted by bits ascending.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let dominated = |p: &ParetoPoint| {
        points.iter().any(|q| {
            (q.avg_bits <= p.avg_bits && q.metric < p.metric)
                || (q.avg_bits < p.avg_bits && q.metric <= p.metric)
        })
    };
    let mut front: Vec<ParetoPoint> = points.iter().filter(|p| !dominated(p)).cloned().collect();
    front.sort_by(|a, b| {
        a.avg_bits
            .partial_cmp(&b.avg_bits)
            .expect("finite bits")
            .then(a.metric.partial_cmp(&b.metric).expect("finite metric"))
    });
    front
}
