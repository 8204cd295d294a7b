//! Binary containers and the text plan format.
//!
//! Four sibling binary layouts share one convention: a magic line, then
//! length-prefixed fields, all integers and reals little-endian. Encoding
//! is canonical (fixed entry order, zeroed pad bits), so any value
//! round-trips to identical bytes.
//!
//!   MOEQ1   full-precision model: spec text block, then every matrix
//!   MOEQZ1  quantized model: spec block, calibration seed, plan default
//!           and provenance, full-precision parts, grouped codes
//!   CALQ1   token corpus: seed, source tag, sequences of 32-bit ids
//!   BSPQ1   block score predictor: per block, widths, weights, final MSE
//!
//! Plans are text: a `default_bits` header, `provenance` lines, then one
//! `<weight id> <bits>` line per assignment in weight-id order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use moeq_core::allocate::{BitPlan, QuantizedModel, QuantizedWeight};
use moeq_core::calibration::{CalibrationSet, CalibrationSource};
use moeq_core::model::{
    AttentionWeights, Expert, FfnnLayer, Layer, ModelSpec, MoeModel, WeightId,
};
use moeq_core::numerics::DenseMatrix;
use moeq_core::predictor::{BlockPredictor, BlockScorePredictor};
use moeq_core::quant::{BitWidth, GroupedQuantTensor, QuantBackend};

use crate::specfile::{parse_spec, render_spec, SpecFileError};

pub const MODEL_MAGIC: &[u8] = b"MOEQ1\n";
pub const QUANT_MAGIC: &[u8] = b"MOEQZ1\n";
pub const CALIB_MAGIC: &[u8] = b"CALQ1\n";
pub const PREDICTOR_MAGIC: &[u8] = b"BSPQ1\n";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContainerError {
    /// Input ended before a declared field.
    Truncated,
    BadMagic { expected: &'static str },
    /// A structurally wrong value, with what was being read.
    BadValue(String),
    BadSpec(SpecFileError),
}

impl fmt::Display for ContainerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContainerError::Truncated => write!(f, "container truncated"),
            ContainerError::BadMagic { expected } => {
                write!(f, "not a {expected} container")
            }
            ContainerError::BadValue(what) => write!(f, "bad container field: {what}"),
            ContainerError::BadSpec(e) => write!(f, "bad embedded spec: {e}"),
        }
    }
}

impl std::error::Error for ContainerError {}

impl From<SpecFileError> for ContainerError {
    fn from(e: SpecFileError) -> Self {
        ContainerError::BadSpec(e)
    }
}

fn bad(what: impl Into<String>) -> ContainerError {
    ContainerError::BadValue(what.into())
}

// ── Little-endian primitives ─────────────────────────────────────────────

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).ok_or(ContainerError::Truncated)?;
        if end > self.buf.len() {
            return Err(ContainerError::Truncated);
        }
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn magic(&mut self, magic: &'static [u8], name: &'static str) -> Result<(), ContainerError> {
        if self.buf.len() < magic.len() || &self.buf[..magic.len()] != magic {
            return Err(ContainerError::BadMagic { expected: name });
        }
        self.pos = magic.len();
        Ok(())
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ContainerError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, ContainerError> {
        Ok(self.u32()? as usize)
    }

    fn string(&mut self) -> Result<String, ContainerError> {
        let n = self.len()?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| bad("non-utf8 string"))
    }

    fn f64_slice(&mut self, count: usize) -> Result<Vec<f64>, ContainerError> {
        let bytes = self.take(count.checked_mul(8).ok_or(ContainerError::Truncated)?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn matrix(&mut self) -> Result<DenseMatrix, ContainerError> {
        let rows = self.len()?;
        let cols = self.len()?;
        let data = self.f64_slice(rows.checked_mul(cols).ok_or(ContainerError::Truncated)?)?;
        Ok(DenseMatrix::from_vec(rows, cols, data))
    }

    fn done(&self) -> Result<(), ContainerError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(bad(format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_matrix(out: &mut Vec<u8>, m: &DenseMatrix) {
    put_u32(out, m.rows() as u32);
    put_u32(out, m.cols() as u32);
    for &v in m.data() {
        put_f64(out, v);
    }
}

// ── Code packing ─────────────────────────────────────────────────────────

/// Packs codes at a fixed bit width, least significant bit first within
/// each byte; pad bits in the final byte are zero.
pub fn pack_codes(codes: &[u32], bits: u32) -> Vec<u8> {
    let total = codes.len() * bits as usize;
    let mut out = vec![0u8; total.div_ceil(8)];
    let mut pos = 0usize;
    for &code in codes {
        for b in 0..bits {
            if code >> b & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

pub fn unpack_codes(bytes: &[u8], bits: u32, count: usize) -> Result<Vec<u32>, ContainerError> {
    let total = count * bits as usize;
    if bytes.len() != total.div_ceil(8) {
        return Err(bad("packed code length"));
    }
    let mut codes = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let mut code = 0u32;
        for b in 0..bits {
            if bytes[pos / 8] >> (pos % 8) & 1 == 1 {
                code |= 1 << b;
            }
            pos += 1;
        }
        codes.push(code);
    }
    // Canonical encoding: a nonzero pad bit cannot come from pack_codes.
    while pos < bytes.len() * 8 {
        if bytes[pos / 8] >> (pos % 8) & 1 == 1 {
            return Err(bad("nonzero pad bit"));
        }
        pos += 1;
    }
    Ok(codes)
}

// ── Full-precision model (MOEQ1) ─────────────────────────────────────────

/// Names every matrix in the container's canonical order: the embedding,
/// the per-layer weights (routers included), then the output head.
fn model_entry_names(model: &MoeModel) -> Vec<String> {
    let mut names = vec!["embedding".to_string()];
    names.extend(model.weight_ids().iter().map(|id| id.to_string()));
    names.push("output_head".to_string());
    names
}

pub fn encode_model(model: &MoeModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    put_string(&mut out, &render_spec(&model.spec));
    let ids = model.weight_ids();
    put_u32(&mut out, (ids.len() + 2) as u32);
    put_string(&mut out, "embedding");
    put_matrix(&mut out, &model.embedding);
    for id in &ids {
        put_string(&mut out, &id.to_string());
        put_matrix(&mut out, model.weight(id).expect("listed id resolves"));
    }
    put_string(&mut out, "output_head");
    put_matrix(&mut out, &model.output_head);
    out
}

/// A zeroed model with the spec's shapes, for the decoder to fill in.
fn skeleton(spec: &ModelSpec) -> MoeModel {
    let (d, f) = (spec.hidden_dim, spec.ffnn_dim);
    let expert = || Expert {
        gate: DenseMatrix::zeros(f, d),
        up: DenseMatrix::zeros(f, d),
        down: DenseMatrix::zeros(d, f),
    };
    let layers = (0..spec.num_layers)
        .map(|l| Layer {
            attn: AttentionWeights {
                q: DenseMatrix::zeros(d, d),
                k: DenseMatrix::zeros(d, d),
                v: DenseMatrix::zeros(d, d),
                o: DenseMatrix::zeros(d, d),
            },
            ffnn: if spec.first_layer_dense && l == 0 {
                FfnnLayer::Dense(expert())
            } else {
                FfnnLayer::Moe {
                    router: DenseMatrix::zeros(spec.num_experts, d),
                    experts: (0..spec.num_experts).map(|_| expert()).collect(),
                    shared: (0..spec.num_shared_experts).map(|_| expert()).collect(),
                }
            },
        })
        .collect();
    MoeModel {
        spec: *spec,
        embedding: DenseMatrix::zeros(spec.vocab_size, d),
        layers,
        output_head: DenseMatrix::zeros(spec.vocab_size, d),
    }
}

fn read_named_matrix(
    r: &mut Reader,
    expected: &str,
    rows: usize,
    cols: usize,
) -> Result<DenseMatrix, ContainerError> {
    let name = r.string()?;
    if name != expected {
        return Err(bad(format!("expected entry `{expected}`, found `{name}`")));
    }
    let m = r.matrix()?;
    if m.rows() != rows || m.cols() != cols {
        return Err(bad(format!(
            "entry `{expected}` is {}x{}, spec demands {rows}x{cols}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(m)
}

pub fn decode_model(bytes: &[u8]) -> Result<MoeModel, ContainerError> {
    let mut r = Reader::new(bytes);
    r.magic(MODEL_MAGIC, "MOEQ1")?;
    let spec = parse_spec(&r.string()?)?;
    spec.validate().map_err(|e| bad(format!("{e}")))?;
    let mut model = skeleton(&spec);

    let names = model_entry_names(&model);
    let declared = r.len()?;
    if declared != names.len() {
        return Err(bad(format!("{declared} entries, spec demands {}", names.len())));
    }
    let (vocab, d) = (spec.vocab_size, spec.hidden_dim);
    model.embedding = read_named_matrix(&mut r, "embedding", vocab, d)?;
    for id in model.weight_ids() {
        let (rows, cols) = {
            let w = model.weight(&id).expect("listed id resolves");
            (w.rows(), w.cols())
        };
        let m = read_named_matrix(&mut r, &id.to_string(), rows, cols)?;
        *model.weight_mut(&id).expect("listed id resolves") = m;
    }
    model.output_head = read_named_matrix(&mut r, "output_head", vocab, d)?;
    r.done()?;
    Ok(model)
}

// ── Quantized model (MOEQZ1) ─────────────────────────────────────────────

pub fn encode_quantized(qm: &QuantizedModel, calib_seed: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(QUANT_MAGIC);
    put_string(&mut out, &render_spec(&qm.spec));
    put_u64(&mut out, calib_seed);
    out.push(qm.default_bits.bits() as u8);
    put_u32(&mut out, qm.provenance.len() as u32);
    for p in &qm.provenance {
        put_string(&mut out, p);
    }

    put_u32(&mut out, (qm.routers.len() + 2) as u32);
    put_string(&mut out, "embedding");
    put_matrix(&mut out, &qm.embedding);
    for (layer, router) in &qm.routers {
        put_string(&mut out, &WeightId::router(*layer).to_string());
        put_matrix(&mut out, router);
    }
    put_string(&mut out, "output_head");
    put_matrix(&mut out, &qm.output_head);

    put_u32(&mut out, qm.weights.len() as u32);
    for qw in &qm.weights {
        let t = &qw.tensor;
        put_string(&mut out, &qw.id.to_string());
        put_string(&mut out, t.backend.tag());
        out.push(t.bits.bits() as u8);
        put_u32(&mut out, t.group_size as u32);
        put_u32(&mut out, t.rows as u32);
        put_u32(&mut out, t.cols as u32);
        put_u32(&mut out, t.scales.len() as u32);
        for &s in &t.scales {
            put_f64(&mut out, s);
        }
        for &z in &t.zeros {
            put_u64(&mut out, z);
        }
        let packed = pack_codes(&t.codes, t.bits.bits());
        put_u32(&mut out, packed.len() as u32);
        out.extend_from_slice(&packed);
    }
    out
}

fn read_bits(r: &mut Reader) -> Result<BitWidth, ContainerError> {
    let raw = r.u8()?;
    BitWidth::try_from_bits(raw as u32).ok_or_else(|| bad(format!("bit width {raw}")))
}

/// Returns the quantized model and the calibration seed it was built
/// against.
pub fn decode_quantized(bytes: &[u8]) -> Result<(QuantizedModel, u64), ContainerError> {
    let mut r = Reader::new(bytes);
    r.magic(QUANT_MAGIC, "MOEQZ1")?;
    let spec = parse_spec(&r.string()?)?;
    spec.validate().map_err(|e| bad(format!("{e}")))?;
    let calib_seed = r.u64()?;
    let default_bits = read_bits(&mut r)?;
    let provenance = (0..r.len()?).map(|_| r.string()).collect::<Result<Vec<_>, _>>()?;

    let skeleton = skeleton(&spec);
    let moe_layers = skeleton.moe_layer_indices();
    let declared = r.len()?;
    if declared != moe_layers.len() + 2 {
        return Err(bad(format!(
            "{declared} full-precision entries, spec demands {}",
            moe_layers.len() + 2
        )));
    }
    let (vocab, d) = (spec.vocab_size, spec.hidden_dim);
    let embedding = read_named_matrix(&mut r, "embedding", vocab, d)?;
    let mut routers = BTreeMap::new();
    for layer in moe_layers {
        let name = WeightId::router(layer).to_string();
        routers.insert(layer, read_named_matrix(&mut r, &name, spec.num_experts, d)?);
    }
    let output_head = read_named_matrix(&mut r, "output_head", vocab, d)?;

    let expected_ids = skeleton.quantizable_ids();
    let declared = r.len()?;
    if declared != expected_ids.len() {
        return Err(bad(format!(
            "{declared} quantized entries, spec demands {}",
            expected_ids.len()
        )));
    }
    let mut weights = Vec::with_capacity(expected_ids.len());
    for id in expected_ids {
        let name = r.string()?;
        if name != id.to_string() {
            return Err(bad(format!("expected entry `{id}`, found `{name}`")));
        }
        let tag = r.string()?;
        let backend =
            QuantBackend::from_tag(&tag).ok_or_else(|| bad(format!("backend tag `{tag}`")))?;
        let bits = read_bits(&mut r)?;
        let group_size = r.len()?;
        if group_size == 0 {
            return Err(bad("group size 0"));
        }
        let rows = r.len()?;
        let cols = r.len()?;
        let shape = {
            let w = skeleton.weight(&id).expect("listed id resolves");
            (w.rows(), w.cols())
        };
        if (rows, cols) != shape {
            return Err(bad(format!(
                "entry `{id}` is {rows}x{cols}, spec demands {}x{}",
                shape.0, shape.1
            )));
        }
        let groups = rows * cols.div_ceil(group_size);
        let declared_groups = r.len()?;
        if declared_groups != groups {
            return Err(bad(format!("entry `{id}`: {declared_groups} groups, shape demands {groups}")));
        }
        let scales = r.f64_slice(groups)?;
        let zeros = (0..groups).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
        let packed_len = r.len()?;
        let packed = r.take(packed_len)?;
        let codes = unpack_codes(packed, bits.bits(), rows * cols)?;
        if let Some(&c) = codes.iter().find(|&&c| c > bits.max_code()) {
            return Err(bad(format!("entry `{id}`: code {c} exceeds {bits}-bit range")));
        }
        weights.push(QuantizedWeight {
            id,
            tensor: GroupedQuantTensor {
                rows,
                cols,
                bits,
                group_size,
                scales,
                zeros,
                codes,
                backend,
            },
        });
    }
    r.done()?;
    Ok((
        QuantizedModel {
            spec,
            embedding,
            output_head,
            routers,
            weights,
            default_bits,
            provenance,
        },
        calib_seed,
    ))
}

// ── Calibration corpus (CALQ1) ───────────────────────────────────────────

pub fn encode_calibration(calib: &CalibrationSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CALIB_MAGIC);
    put_u64(&mut out, calib.seed);
    put_string(&mut out, calib.source.tag());
    put_u32(&mut out, calib.sequences.len() as u32);
    for seq in &calib.sequences {
        put_u32(&mut out, seq.len() as u32);
        for &t in seq {
            put_u32(&mut out, t);
        }
    }
    out
}

pub fn decode_calibration(bytes: &[u8]) -> Result<CalibrationSet, ContainerError> {
    let mut r = Reader::new(bytes);
    r.magic(CALIB_MAGIC, "CALQ1")?;
    let seed = r.u64()?;
    let tag = r.string()?;
    let source =
        CalibrationSource::from_tag(&tag).ok_or_else(|| bad(format!("source tag `{tag}`")))?;
    let n = r.len()?;
    let mut sequences = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.len()?;
        if len == 0 {
            return Err(bad("empty sequence"));
        }
        let seq = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        sequences.push(seq);
    }
    r.done()?;
    Ok(CalibrationSet { sequences, seed, source })
}

// ── Block score predictor (BSPQ1) ────────────────────────────────────────

pub fn encode_predictor(bsp: &BlockScorePredictor) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PREDICTOR_MAGIC);
    put_u32(&mut out, bsp.hidden as u32);
    put_u32(&mut out, bsp.blocks.len() as u32);
    for (layer, p) in &bsp.blocks {
        put_u32(&mut out, *layer as u32);
        put_matrix(&mut out, &p.w1);
        put_u32(&mut out, p.w2.len() as u32);
        for &v in &p.w2 {
            put_f64(&mut out, v);
        }
        put_f64(&mut out, p.final_mse);
    }
    out
}

/// Training history is not stored; decoded predictors carry an empty log.
pub fn decode_predictor(bytes: &[u8]) -> Result<BlockScorePredictor, ContainerError> {
    let mut r = Reader::new(bytes);
    r.magic(PREDICTOR_MAGIC, "BSPQ1")?;
    let hidden = r.len()?;
    let n = r.len()?;
    let mut blocks = BTreeMap::new();
    for _ in 0..n {
        let layer = r.len()?;
        let w1 = r.matrix()?;
        if w1.rows() != hidden {
            return Err(bad(format!("block {layer}: {} hidden rows, header says {hidden}", w1.rows())));
        }
        let w2_len = r.len()?;
        let w2 = r.f64_slice(w2_len)?;
        if w2.len() != hidden {
            return Err(bad(format!("block {layer}: w2 length {} != {hidden}", w2.len())));
        }
        let final_mse = r.f64()?;
        if blocks
            .insert(
                layer,
                BlockPredictor { w1, w2, training_log: Vec::new(), final_mse, holdout_mse: None },
            )
            .is_some()
        {
            return Err(bad(format!("block {layer} given twice")));
        }
    }
    r.done()?;
    Ok(BlockScorePredictor { hidden, blocks })
}

// ── Plan text ────────────────────────────────────────────────────────────

pub fn render_plan(plan: &BitPlan) -> String {
    let mut out = format!("default_bits {}\n", plan.default_bits);
    for p in &plan.provenance {
        out.push_str(&format!("provenance {p}\n"));
    }
    for (id, bits) in &plan.assignments {
        out.push_str(&format!("{id} {bits}\n"));
    }
    out
}

pub fn parse_plan(text: &str) -> Result<BitPlan, ContainerError> {
    let parse_bits = |word: &str| -> Result<BitWidth, ContainerError> {
        word.parse::<u32>()
            .ok()
            .and_then(BitWidth::try_from_bits)
            .ok_or_else(|| bad(format!("bit width `{word}`")))
    };

    let mut default_bits = None;
    let mut provenance = Vec::new();
    let mut assignments = BTreeMap::new();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (head, rest) =
            line.split_once(char::is_whitespace).ok_or_else(|| bad(format!("plan line `{line}`")))?;
        let rest = rest.trim();
        match head {
            "default_bits" => {
                if default_bits.replace(parse_bits(rest)?).is_some() {
                    return Err(bad("default_bits given twice"));
                }
            }
            "provenance" => provenance.push(rest.to_string()),
            _ => {
                let id = WeightId::from_str(head)
                    .map_err(|_| bad(format!("weight id `{head}`")))?;
                if assignments.insert(id, parse_bits(rest)?).is_some() {
                    return Err(bad(format!("weight `{head}` assigned twice")));
                }
            }
        }
    }
    let default_bits = default_bits.ok_or_else(|| bad("missing default_bits header"))?;
    Ok(BitPlan { assignments, default_bits, provenance })
}
