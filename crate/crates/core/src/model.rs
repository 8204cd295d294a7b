//! Desk-scale mixture-of-experts transformer: single-head causal attention,
//! RMS normalization, SiLU-gated expert FFNNs, softmax top-k routing with
//! renormalized gates, optional always-on shared experts, and an optional
//! dense (un-routed) FFNN in the first layer. Biases are omitted everywhere;
//! a weight matrix of shape (out × in) maps x to W·x.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::math;
use crate::numerics::{dot, DenseMatrix};
use crate::rng::Rng;

/// Epsilon inside the RMS normalizer, 1/sqrt(mean(x²) + RMS_EPS).
pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    InvalidSpec(String),
    TokenOutOfRange { position: usize, token: u32, vocab_size: usize },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::InvalidSpec(why) => write!(f, "invalid model spec: {why}"),
            ModelError::TokenOutOfRange { position, token, vocab_size } => write!(
                f,
                "token {token} at position {position} out of range for vocab {vocab_size}"
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ModelError {}

// ── Identifiers ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Projection {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Projection {
    pub fn name(&self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
            Projection::Gate => "gate",
            Projection::Up => "up",
            Projection::Down => "down",
        }
    }

    pub const ATTENTION: [Projection; 4] =
        [Projection::Q, Projection::K, Projection::V, Projection::O];
    pub const FFNN: [Projection; 3] = [Projection::Gate, Projection::Up, Projection::Down];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum WeightKind {
    Attention,
    Router,
    Expert,
    SharedExpert,
}

/// Address of one weight matrix. The derived ordering (layer, kind,
/// expert index, projection) fixes iteration order everywhere: plans,
/// captures, containers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct WeightId {
    pub layer: usize,
    pub kind: WeightKind,
    /// Expert slot; `None` for attention, routers, and the dense first-layer
    /// FFNN (which is an un-routed `Expert` weight).
    pub expert: Option<usize>,
    /// `None` only for router matrices.
    pub projection: Option<Projection>,
}

impl WeightId {
    pub fn attention(layer: usize, projection: Projection) -> Self {
        WeightId { layer, kind: WeightKind::Attention, expert: None, projection: Some(projection) }
    }

    pub fn router(layer: usize) -> Self {
        WeightId { layer, kind: WeightKind::Router, expert: None, projection: None }
    }

    pub fn expert(layer: usize, expert: usize, projection: Projection) -> Self {
        WeightId {
            layer,
            kind: WeightKind::Expert,
            expert: Some(expert),
            projection: Some(projection),
        }
    }

    pub fn dense(layer: usize, projection: Projection) -> Self {
        WeightId { layer, kind: WeightKind::Expert, expert: None, projection: Some(projection) }
    }

    pub fn shared(layer: usize, expert: usize, projection: Projection) -> Self {
        WeightId {
            layer,
            kind: WeightKind::SharedExpert,
            expert: Some(expert),
            projection: Some(projection),
        }
    }

    /// True for the weights the quantizer may touch: attention and FFNN
    /// projections. Routers stay full precision.
    pub fn is_quantizable(&self) -> bool {
        self.kind != WeightKind::Router
    }

    pub fn is_ffnn(&self) -> bool {
        matches!(self.kind, WeightKind::Expert | WeightKind::SharedExpert)
    }
}

impl fmt::Display for WeightId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.", self.layer)?;
        match (self.kind, self.expert, self.projection) {
            (WeightKind::Attention, None, Some(p)) => write!(f, "attn.{}", p.name()),
            (WeightKind::Router, None, None) => write!(f, "router"),
            (WeightKind::Expert, Some(e), Some(p)) => write!(f, "expert{}.{}", e, p.name()),
            (WeightKind::Expert, None, Some(p)) => write!(f, "dense.{}", p.name()),
            (WeightKind::SharedExpert, Some(e), Some(p)) => write!(f, "shared{}.{}", e, p.name()),
            _ => write!(f, "invalid"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseWeightIdError(pub String);

impl fmt::Display for ParseWeightIdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "malformed weight id `{}`", self.0)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ParseWeightIdError {}

impl FromStr for WeightId {
    type Err = ParseWeightIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseWeightIdError(String::from(s));
        let mut parts = s.split('.');
        let layer_part = parts.next().ok_or_else(err)?;
        let layer: usize = layer_part.strip_prefix("layer").ok_or_else(err)?.parse().map_err(|_| err())?;
        let kind_part = parts.next().ok_or_else(err)?;
        let proj_part = parts.next();
        if parts.next().is_some() {
            return Err(err());
        }
        let parse_proj = |name: Option<&str>, allowed: &[Projection]| -> Result<Projection, ParseWeightIdError> {
            let name = name.ok_or_else(err)?;
            allowed.iter().copied().find(|p| p.name() == name).ok_or_else(err)
        };
        if kind_part == "router" {
            if proj_part.is_some() {
                return Err(err());
            }
            return Ok(WeightId::router(layer));
        }
        if kind_part == "attn" {
            return Ok(WeightId::attention(layer, parse_proj(proj_part, &Projection::ATTENTION)?));
        }
        if kind_part == "dense" {
            return Ok(WeightId::dense(layer, parse_proj(proj_part, &Projection::FFNN)?));
        }
        if let Some(rest) = kind_part.strip_prefix("expert") {
            let e: usize = rest.parse().map_err(|_| err())?;
            return Ok(WeightId::expert(layer, e, parse_proj(proj_part, &Projection::FFNN)?));
        }
        if let Some(rest) = kind_part.strip_prefix("shared") {
            let e: usize = rest.parse().map_err(|_| err())?;
            return Ok(WeightId::shared(layer, e, parse_proj(proj_part, &Projection::FFNN)?));
        }
        Err(err())
    }
}

// ── Model structure ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub ffnn_dim: usize,
    pub num_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub num_shared_experts: usize,
    pub first_layer_dense: bool,
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |why: &str| Err(ModelError::InvalidSpec(String::from(why)));
        if self.vocab_size == 0
            || self.hidden_dim == 0
            || self.ffnn_dim == 0
            || self.num_layers == 0
            || self.num_experts == 0
        {
            return bad("all dimensions must be >= 1");
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return bad("top_k must satisfy 1 <= top_k <= num_experts");
        }
        Ok(())
    }
}

/// One SiLU-gated FFNN: gate/up are (ffnn_dim × d), down is (d × ffnn_dim).
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub gate: DenseMatrix,
    pub up: DenseMatrix,
    pub down: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub q: DenseMatrix,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
    pub o: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FfnnLayer {
    /// Un-routed FFNN executed for every token (DeepSeek-style first layer).
    Dense(Expert),
    Moe {
        /// (num_experts × d); kept full precision throughout.
        router: DenseMatrix,
        experts: Vec<Expert>,
        shared: Vec<Expert>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub attn: AttentionWeights,
    pub ffnn: FfnnLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    pub spec: ModelSpec,
    /// (vocab × d), one embedding row per token id.
    pub embedding: DenseMatrix,
    pub layers: Vec<Layer>,
    /// (vocab × d), logits = head · rms_norm(h).
    pub output_head: DenseMatrix,
}

/// Builds the model with every entry drawn uniform(−1/√d, 1/√d) from one
/// seeded stream, filled row-major in a fixed order: embedding; per layer
/// q, k, v, o, then the FFNN (dense: gate/up/down; MoE: router, each routed
/// expert's gate/up/down, each shared expert's gate/up/down); output head.
pub fn build_model(spec: &ModelSpec) -> Result<MoeModel, ModelError> {
    spec.validate()?;
    let d = spec.hidden_dim;
    let f = spec.ffnn_dim;
    let bound = 1.0 / math::sqrt(d as f64);
    let mut rng = Rng::new(spec.seed);
    fn mat(rng: &mut Rng, bound: f64, rows: usize, cols: usize) -> DenseMatrix {
        let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
        DenseMatrix::from_vec(rows, cols, data)
    }
    fn expert(rng: &mut Rng, bound: f64, f: usize, d: usize) -> Expert {
        Expert {
            gate: mat(rng, bound, f, d),
            up: mat(rng, bound, f, d),
            down: mat(rng, bound, d, f),
        }
    }

    let embedding = mat(&mut rng, bound, spec.vocab_size, d);
    let mut layers = Vec::with_capacity(spec.num_layers);
    for l in 0..spec.num_layers {
        let attn = AttentionWeights {
            q: mat(&mut rng, bound, d, d),
            k: mat(&mut rng, bound, d, d),
            v: mat(&mut rng, bound, d, d),
            o: mat(&mut rng, bound, d, d),
        };
        let ffnn = if spec.first_layer_dense && l == 0 {
            FfnnLayer::Dense(expert(&mut rng, bound, f, d))
        } else {
            let router = mat(&mut rng, bound, spec.num_experts, d);
            let experts = (0..spec.num_experts).map(|_| expert(&mut rng, bound, f, d)).collect();
            let shared =
                (0..spec.num_shared_experts).map(|_| expert(&mut rng, bound, f, d)).collect();
            FfnnLayer::Moe { router, experts, shared }
        };
        layers.push(Layer { attn, ffnn });
    }
    let output_head = mat(&mut rng, bound, spec.vocab_size, d);
    Ok(MoeModel { spec: *spec, embedding, layers, output_head })
}

impl MoeModel {
    /// Layer indices whose FFNN is routed (the model's MoE blocks).
    pub fn moe_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.ffnn, FfnnLayer::Moe { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Every addressable weight matrix, routers included, in id order.
    pub fn weight_ids(&self) -> Vec<WeightId> {
        let mut ids = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for p in Projection::ATTENTION {
                ids.push(WeightId::attention(l, p));
            }
            match &layer.ffnn {
                FfnnLayer::Dense(_) => {
                    for p in Projection::FFNN {
                        ids.push(WeightId::dense(l, p));
                    }
                }
                FfnnLayer::Moe { experts, shared, .. } => {
                    ids.push(WeightId::router(l));
                    for e in 0..experts.len() {
                        for p in Projection::FFNN {
                            ids.push(WeightId::expert(l, e, p));
                        }
                    }
                    for e in 0..shared.len() {
                        for p in Projection::FFNN {
                            ids.push(WeightId::shared(l, e, p));
                        }
                    }
                }
            }
        }
        ids.sort_unstable();
        ids
    }

    pub fn quantizable_ids(&self) -> Vec<WeightId> {
        self.weight_ids().into_iter().filter(WeightId::is_quantizable).collect()
    }

    /// FFNN projections only (routed, shared, and dense first-layer).
    pub fn ffnn_ids(&self) -> Vec<WeightId> {
        self.weight_ids().into_iter().filter(WeightId::is_ffnn).collect()
    }

    pub fn weight(&self, id: &WeightId) -> Option<&DenseMatrix> {
        let layer = self.layers.get(id.layer)?;
        match (id.kind, id.expert, id.projection) {
            (WeightKind::Attention, None, Some(p)) => Some(match p {
                Projection::Q => &layer.attn.q,
                Projection::K => &layer.attn.k,
                Projection::V => &layer.attn.v,
                Projection::O => &layer.attn.o,
                _ => return None,
            }),
            (WeightKind::Router, None, None) => match &layer.ffnn {
                FfnnLayer::Moe { router, .. } => Some(router),
                FfnnLayer::Dense(_) => None,
            },
            (kind, slot, Some(p)) if p == Projection::Gate || p == Projection::Up || p == Projection::Down => {
                let expert = match (&layer.ffnn, kind, slot) {
                    (FfnnLayer::Dense(e), WeightKind::Expert, None) => e,
                    (FfnnLayer::Moe { experts, .. }, WeightKind::Expert, Some(i)) => experts.get(i)?,
                    (FfnnLayer::Moe { shared, .. }, WeightKind::SharedExpert, Some(i)) => shared.get(i)?,
                    _ => return None,
                };
                Some(match p {
                    Projection::Gate => &expert.gate,
                    Projection::Up => &expert.up,
                    _ => &expert.down,
                })
            }
            _ => None,
        }
    }

    pub fn weight_mut(&mut self, id: &WeightId) -> Option<&mut DenseMatrix> {
        let layer = self.layers.get_mut(id.layer)?;
        match (id.kind, id.expert, id.projection) {
            (WeightKind::Attention, None, Some(p)) => Some(match p {
                Projection::Q => &mut layer.attn.q,
                Projection::K => &mut layer.attn.k,
                Projection::V => &mut layer.attn.v,
                Projection::O => &mut layer.attn.o,
                _ => return None,
            }),
            (WeightKind::Router, None, None) => match &mut layer.ffnn {
                FfnnLayer::Moe { router, .. } => Some(router),
                FfnnLayer::Dense(_) => None,
            },
            (kind, slot, Some(p)) if p == Projection::Gate || p == Projection::Up || p == Projection::Down => {
                let expert = match (&mut layer.ffnn, kind, slot) {
                    (FfnnLayer::Dense(e), WeightKind::Expert, None) => e,
                    (FfnnLayer::Moe { experts, .. }, WeightKind::Expert, Some(i)) => experts.get_mut(i)?,
                    (FfnnLayer::Moe { shared, .. }, WeightKind::SharedExpert, Some(i)) => shared.get_mut(i)?,
                    _ => return None,
                };
                Some(match p {
                    Projection::Gate => &mut expert.gate,
                    Projection::Up => &mut expert.up,
                    _ => &mut expert.down,
                })
            }
            _ => None,
        }
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<DenseMatrix, ModelError> {
        self.forward_traced(tokens, None)
    }

    /// Causal forward pass over one token sequence, returning per-position
    /// logits (len × vocab). When a sink is supplied it accumulates the
    /// enabled trace channels in token order.
    pub fn forward_traced(
        &self,
        tokens: &[u32],
        mut trace: Option<&mut TraceSink>,
    ) -> Result<DenseMatrix, ModelError> {
        let d = self.spec.hidden_dim;
        for (position, &token) in tokens.iter().enumerate() {
            if token as usize >= self.spec.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    position,
                    token,
                    vocab_size: self.spec.vocab_size,
                });
            }
        }
        let n = tokens.len();
        let mut hidden: Vec<Vec<f64>> =
            tokens.iter().map(|&t| self.embedding.row(t as usize).to_vec()).collect();

        for (l, layer) in self.layers.iter().enumerate() {
            // Attention sublayer.
            let normed: Vec<Vec<f64>> = hidden.iter().map(|h| rms_norm(h)).collect();
            let q: Vec<Vec<f64>> = normed.iter().map(|x| layer.attn.q.matvec(x)).collect();
            let k: Vec<Vec<f64>> = normed.iter().map(|x| layer.attn.k.matvec(x)).collect();
            let v: Vec<Vec<f64>> = normed.iter().map(|x| layer.attn.v.matvec(x)).collect();
            let scale = 1.0 / math::sqrt(d as f64);
            let mut mixed: Vec<Vec<f64>> = Vec::with_capacity(n);
            for t in 0..n {
                let mut scores: Vec<f64> =
                    (0..=t).map(|j| dot(&q[t], &k[j]) * scale).collect();
                softmax_in_place(&mut scores);
                let mut m = vec![0.0; d];
                for (j, p) in scores.iter().enumerate() {
                    for (mi, vi) in m.iter_mut().zip(&v[j]) {
                        *mi += p * vi;
                    }
                }
                mixed.push(m);
            }
            if let Some(sink) = trace.as_deref_mut() {
                if sink.capture_inputs {
                    for t in 0..n {
                        for p in [Projection::Q, Projection::K, Projection::V] {
                            sink.push_input(WeightId::attention(l, p), &normed[t]);
                        }
                        sink.push_input(WeightId::attention(l, Projection::O), &mixed[t]);
                    }
                }
            }
            for t in 0..n {
                let a = layer.attn.o.matvec(&mixed[t]);
                for (hi, ai) in hidden[t].iter_mut().zip(&a) {
                    *hi += ai;
                }
            }

            // FFNN sublayer.
            match &layer.ffnn {
                FfnnLayer::Dense(expert) => {
                    for t in 0..n {
                        let x = rms_norm(&hidden[t]);
                        let (out, inner) = expert_forward(expert, &x);
                        if let Some(sink) = trace.as_deref_mut() {
                            if sink.capture_inputs {
                                sink.push_input(WeightId::dense(l, Projection::Gate), &x);
                                sink.push_input(WeightId::dense(l, Projection::Up), &x);
                                sink.push_input(WeightId::dense(l, Projection::Down), &inner);
                            }
                        }
                        for (hi, oi) in hidden[t].iter_mut().zip(&out) {
                            *hi += oi;
                        }
                    }
                }
                FfnnLayer::Moe { router, experts, shared } => {
                    for t in 0..n {
                        let block_in = hidden[t].clone();
                        let x = rms_norm(&hidden[t]);
                        let decision = route(router, &x, self.spec.top_k);
                        let mut out = vec![0.0; d];
                        for (&e, &g) in decision.experts.iter().zip(&decision.gates) {
                            let (y, inner) = expert_forward(&experts[e], &x);
                            if let Some(sink) = trace.as_deref_mut() {
                                if sink.capture_inputs {
                                    sink.push_input(WeightId::expert(l, e, Projection::Gate), &x);
                                    sink.push_input(WeightId::expert(l, e, Projection::Up), &x);
                                    sink.push_input(WeightId::expert(l, e, Projection::Down), &inner);
                                }
                            }
                            for (oi, yi) in out.iter_mut().zip(&y) {
                                *oi += g * yi;
                            }
                        }
                        for (s, sh) in shared.iter().enumerate() {
                            let (y, inner) = expert_forward(sh, &x);
                            if let Some(sink) = trace.as_deref_mut() {
                                if sink.capture_inputs {
                                    sink.push_input(WeightId::shared(l, s, Projection::Gate), &x);
                                    sink.push_input(WeightId::shared(l, s, Projection::Up), &x);
                                    sink.push_input(WeightId::shared(l, s, Projection::Down), &inner);
                                }
                            }
                            for (oi, yi) in out.iter_mut().zip(&y) {
                                *oi += yi;
                            }
                        }
                        for (hi, oi) in hidden[t].iter_mut().zip(&out) {
                            *hi += oi;
                        }
                        if let Some(sink) = trace.as_deref_mut() {
                            if sink.capture_selections {
                                sink.router_selections
                                    .entry(l)
                                    .or_default()
                                    .push(decision.experts.clone());
                            }
                            if sink.capture_block_io {
                                sink.block_io
                                    .entry(l)
                                    .or_default()
                                    .push((block_in, hidden[t].clone()));
                            }
                        }
                    }
                }
            }
        }

        let mut logits = DenseMatrix::zeros(n, self.spec.vocab_size);
        for t in 0..n {
            let x = rms_norm(&hidden[t]);
            let row = self.output_head.matvec(&x);
            logits.row_mut(t).copy_from_slice(&row);
        }
        Ok(logits)
    }
}

// ── Block-level pieces ───────────────────────────────────────────────────

pub fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = dot(x, x) / x.len() as f64;
    let inv = 1.0 / math::sqrt(ms + RMS_EPS);
    x.iter().map(|v| v * inv).collect()
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + math::exp(-x))
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = math::exp(*x - max);
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// FFNN(x) = down(silu(gate·x) ⊙ up·x). Returns the output and the inner
/// activation (the vector the down projection multiplies).
pub fn expert_forward(expert: &Expert, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let g = expert.gate.matvec(x);
    let u = expert.up.matvec(x);
    let inner: Vec<f64> = g.iter().zip(&u).map(|(gi, ui)| silu(*gi) * ui).collect();
    let out = expert.down.matvec(&inner);
    (out, inner)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteDecision {
    /// Selected expert indices, ascending.
    pub experts: Vec<usize>,
    /// Softmax probabilities of the selected experts, renormalized to sum
    /// to 1, aligned with `experts`.
    pub gates: Vec<f64>,
}

/// Top-k selection over softmax(router · hidden); ties go to the lower
/// expert index.
pub fn route(router: &DenseMatrix, hidden: &[f64], k: usize) -> RouteDecision {
    let mut probs = router.matvec(hidden);
    softmax_in_place(&mut probs);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut experts: Vec<usize> = order[..k].to_vec();
    experts.sort_unstable();
    let total: f64 = experts.iter().map(|&e| probs[e]).sum();
    let gates = experts.iter().map(|&e| probs[e] / total).collect();
    RouteDecision { experts, gates }
}

/// Applies one FFNN layer to a matrix of token hidden states (one row per
/// token): routed mixture plus un-gated shared experts, or the dense FFNN.
pub fn moe_block_forward(ffnn: &FfnnLayer, top_k: usize, x: &DenseMatrix) -> DenseMatrix {
    let mut out_rows: Vec<Vec<f64>> = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let xt = x.row(t);
        let mut acc = vec![0.0; affects_dim(ffnn)];
        match ffnn {
            FfnnLayer::Dense(e) => {
                acc = expert_forward(e, xt).0;
            }
            FfnnLayer::Moe { router, experts, shared } => {
                let decision = route(router, xt, top_k);
                for (&e, &g) in decision.experts.iter().zip(&decision.gates) {
                    let (y, _) = expert_forward(&experts[e], xt);
                    for (a, yi) in acc.iter_mut().zip(&y) {
                        *a += g * yi;
                    }
                }
                for sh in shared {
                    let (y, _) = expert_forward(sh, xt);
                    for (a, yi) in acc.iter_mut().zip(&y) {
                        *a += yi;
                    }
                }
            }
        }
        out_rows.push(acc);
    }
    DenseMatrix::from_rows(&out_rows)
}

fn affects_dim(ffnn: &FfnnLayer) -> usize {
    match ffnn {
        FfnnLayer::Dense(e) => e.down.rows(),
        FfnnLayer::Moe { experts, .. } => experts[0].down.rows(),
    }
}

// ── Trace capture ────────────────────────────────────────────────────────

/// Each token's (entering, after-residual) hidden pair for one block.
pub type IoPairs = Vec<(Vec<f64>, Vec<f64>)>;

/// Accumulates forward-pass observations. Channels are opt-in so callers
/// that only need router counts do not pay for input capture.
#[derive(Debug, Default, Clone)]
pub struct TraceSink {
    pub capture_inputs: bool,
    pub capture_selections: bool,
    pub capture_block_io: bool,
    /// Inputs that multiplied each quantizable weight, in token order.
    pub layer_inputs: BTreeMap<WeightId, Vec<Vec<f64>>>,
    /// Per MoE layer, each token's selected expert set (ascending).
    pub router_selections: BTreeMap<usize, Vec<Vec<usize>>>,
    /// Per MoE layer, each token's (entering, after-residual) hidden pair.
    pub block_io: BTreeMap<usize, IoPairs>,
}

impl TraceSink {
    pub fn all() -> Self {
        TraceSink {
            capture_inputs: true,
            capture_selections: true,
            capture_block_io: true,
            ..TraceSink::default()
        }
    }

    pub fn inputs_only() -> Self {
        TraceSink { capture_inputs: true, ..TraceSink::default() }
    }

    pub fn selections_only() -> Self {
        TraceSink { capture_selections: true, ..TraceSink::default() }
    }

    pub fn block_io_only() -> Self {
        TraceSink { capture_block_io: true, ..TraceSink::default() }
    }

    fn push_input(&mut self, id: WeightId, x: &[f64]) {
        self.layer_inputs.entry(id).or_default().push(x.to_vec());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> ModelSpec {
        ModelSpec {
            vocab_size: 17,
            hidden_dim: 8,
            ffnn_dim: 12,
            num_layers: 2,
            num_experts: 4,
            top_k: 2,
            num_shared_experts: 1,
            first_layer_dense: false,
            seed: 1,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let spec = toy_spec();
        let a = build_model(&spec).unwrap();
        let b = build_model(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn build_rejects_bad_spec() {
        let mut spec = toy_spec();
        spec.top_k = 5;
        assert!(matches!(build_model(&spec), Err(ModelError::InvalidSpec(_))));
        let mut spec = toy_spec();
        spec.hidden_dim = 0;
        assert!(matches!(build_model(&spec), Err(ModelError::InvalidSpec(_))));
    }

    #[test]
    fn router_shape_matches_spec() {
        let mut spec = toy_spec();
        spec.hidden_dim = 8;
        spec.num_experts = 4;
        let m = build_model(&spec).unwrap();
        match &m.layers[0].ffnn {
            FfnnLayer::Moe { router, .. } => {
                assert_eq!((router.rows(), router.cols()), (4, 8));
            }
            _ => panic!("expected MoE layer"),
        }
    }

    #[test]
    fn weight_ids_unique_sorted_and_resolvable() {
        let m = build_model(&toy_spec()).unwrap();
        let ids = m.weight_ids();
        let mut dedup = ids.clone();
        dedup.dedup();
        assert_eq!(ids.len(), dedup.len());
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        // 2 layers × (4 attn + router + 4 experts×3 + 1 shared×3)
        assert_eq!(ids.len(), 2 * (4 + 1 + 12 + 3));
        for id in &ids {
            assert!(m.weight(id).is_some(), "unresolvable id {id}");
        }
    }

    #[test]
    fn weight_id_strings_round_trip() {
        let m = build_model(&toy_spec()).unwrap();
        for id in m.weight_ids() {
            let s = alloc::format!("{id}");
            assert_eq!(s.parse::<WeightId>().unwrap(), id);
        }
        let dense = WeightId::dense(0, Projection::Down);
        assert_eq!(alloc::format!("{dense}"), "layer0.dense.down");
        assert_eq!("layer0.dense.down".parse::<WeightId>().unwrap(), dense);
        assert!("layer0.bogus.q".parse::<WeightId>().is_err());
        assert!("layerX.attn.q".parse::<WeightId>().is_err());
    }

    #[test]
    fn route_argmax_and_ties() {
        let router = DenseMatrix::identity(3);
        // hidden = logits with the identity router.
        let r = route(&router, &[3.0, 1.0, 2.0], 1);
        assert_eq!(r.experts, vec![0]);
        assert!((r.gates[0] - 1.0).abs() < 1e-15);

        let router = DenseMatrix::zeros(4, 3);
        let r = route(&router, &[1.0, 1.0, 1.0], 2);
        assert_eq!(r.experts, vec![0, 1]);
        assert!((r.gates[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn route_hand_softmax() {
        let router = DenseMatrix::identity(3);
        let r = route(&router, &[2.0, 1.0, 0.0], 2);
        assert_eq!(r.experts, vec![0, 1]);
        assert!((r.gates[0] - 0.7311).abs() <= 1e-4);
        assert!((r.gates[1] - 0.2689).abs() <= 1e-4);
        assert!((r.gates[0] + r.gates[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn block_forward_all_experts_identical_is_single_ffnn() {
        let spec = ModelSpec { num_experts: 3, top_k: 3, num_shared_experts: 0, ..toy_spec() };
        let mut m = build_model(&spec).unwrap();
        if let FfnnLayer::Moe { experts, .. } = &mut m.layers[0].ffnn {
            let first = experts[0].clone();
            for e in experts.iter_mut() {
                *e = first.clone();
            }
        }
        let x = DenseMatrix::from_rows(&[alloc::vec![0.3, -0.1, 0.9, 0.0, 0.2, -0.5, 0.7, 0.1]]);
        let out = moe_block_forward(&m.layers[0].ffnn, 3, &x);
        let single = match &m.layers[0].ffnn {
            FfnnLayer::Moe { experts, .. } => expert_forward(&experts[0], x.row(0)).0,
            _ => unreachable!(),
        };
        for (a, b) in out.row(0).iter().zip(&single) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn block_forward_zero_input_zero_output() {
        let m = build_model(&toy_spec()).unwrap();
        let x = DenseMatrix::zeros(1, 8);
        let out = moe_block_forward(&m.layers[0].ffnn, 2, &x);
        assert!(out.row(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn expert_forward_hand_computed() {
        // d=2, ffnn=1: gate=(1,2), up=(3,4), down=(0.5, -1)ᵀ, x=(1, 0.5).
        let e = Expert {
            gate: DenseMatrix::from_vec(1, 2, alloc::vec![1.0, 2.0]),
            up: DenseMatrix::from_vec(1, 2, alloc::vec![3.0, 4.0]),
            down: DenseMatrix::from_vec(2, 1, alloc::vec![0.5, -1.0]),
        };
        let x = [1.0, 0.5];
        let g = 2.0; // 1*1 + 2*0.5
        let u = 5.0; // 3*1 + 4*0.5
        let inner = silu(g) * u;
        let (out, _) = expert_forward(&e, &x);
        assert!((out[0] - 0.5 * inner).abs() < 1e-9);
        assert!((out[1] + inner).abs() < 1e-9);
    }

    #[test]
    fn forward_deterministic_and_trace_readonly() {
        let m = build_model(&toy_spec()).unwrap();
        let tokens = [3u32, 5, 1, 16, 0, 7];
        let a = m.forward(&tokens).unwrap();
        let b = m.forward(&tokens).unwrap();
        assert_eq!(a, b);
        let mut sink = TraceSink::all();
        let c = m.forward_traced(&tokens, Some(&mut sink)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn forward_rejects_out_of_range_token() {
        let m = build_model(&toy_spec()).unwrap();
        let err = m.forward(&[1, 2, 17]).unwrap_err();
        assert!(matches!(err, ModelError::TokenOutOfRange { position: 2, token: 17, .. }));
    }

    #[test]
    fn trace_counts_blocks_and_selections() {
        let m = build_model(&toy_spec()).unwrap();
        let tokens = [3u32, 5, 1, 9];
        let mut sink = TraceSink::all();
        m.forward_traced(&tokens, Some(&mut sink)).unwrap();
        assert_eq!(sink.block_io.len(), 2);
        for pairs in sink.block_io.values() {
            assert_eq!(pairs.len(), 4);
        }
        for sels in sink.router_selections.values() {
            assert_eq!(sels.len(), 4);
            assert!(sels.iter().all(|s| s.len() == 2));
        }
        // q projection sees every token.
        let q = &sink.layer_inputs[&WeightId::attention(0, Projection::Q)];
        assert_eq!(q.len(), 4);
        // Routed expert rows across one block sum to top_k × tokens.
        let total: usize = (0..4)
            .map(|e| {
                sink.layer_inputs
                    .get(&WeightId::expert(0, e, Projection::Gate))
                    .map_or(0, Vec::len)
            })
            .sum();
        assert_eq!(total, 2 * 4);
        // Shared expert sees every token.
        let sh = &sink.layer_inputs[&WeightId::shared(0, 0, Projection::Gate)];
        assert_eq!(sh.len(), 4);
    }

    #[test]
    fn causality_later_tokens_do_not_affect_earlier_logits() {
        let m = build_model(&toy_spec()).unwrap();
        let a = m.forward(&[3, 5, 1, 9]).unwrap();
        let b = m.forward(&[3, 5, 1, 2]).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t), "prefix logits changed at {t}");
        }
    }

    #[test]
    fn dense_first_layer_layout() {
        let spec = ModelSpec { first_layer_dense: true, ..toy_spec() };
        let m = build_model(&spec).unwrap();
        assert!(matches!(m.layers[0].ffnn, FfnnLayer::Dense(_)));
        assert_eq!(m.moe_layer_indices(), alloc::vec![1]);
        assert!(m.weight(&WeightId::dense(0, Projection::Gate)).is_some());
        assert!(m.weight(&WeightId::router(0)).is_none());
        let mut sink = TraceSink::all();
        m.forward_traced(&[1, 2, 3], Some(&mut sink)).unwrap();
        assert_eq!(sink.block_io.len(), 1);
        assert!(sink.block_io.contains_key(&1));
        assert_eq!(sink.layer_inputs[&WeightId::dense(0, Projection::Gate)].len(), 3);
    }
}
