//! Synthetic calibration corpora and forward-pass statistics: the inputs
//! each linear weight saw, how often the router picked each expert, and
//! per-block input/output hidden-state pairs.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use crate::model::{IoPairs, ModelError, MoeModel, TraceSink, WeightId};
use crate::numerics::DenseMatrix;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum CalibrationError {
    EmptyCalibration,
    Model(ModelError),
}

impl fmt::Display for CalibrationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CalibrationError::EmptyCalibration => write!(f, "calibration set has no tokens"),
            CalibrationError::Model(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CalibrationError {}

impl From<ModelError> for CalibrationError {
    fn from(e: ModelError) -> Self {
        CalibrationError::Model(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibrationSource {
    /// Seeded order-1 Markov chain (the synthetic default).
    Markov,
    /// Loaded from a raw token file.
    File,
}

impl CalibrationSource {
    pub fn tag(&self) -> &'static str {
        match self {
            CalibrationSource::Markov => "synthetic-markov",
            CalibrationSource::File => "file",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "synthetic-markov" => Some(CalibrationSource::Markov),
            "file" => Some(CalibrationSource::File),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<u32>>,
    pub seed: u64,
    pub source: CalibrationSource,
}

impl CalibrationSet {
    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Default corpus shape: 32 sequences of 256 tokens.
pub const DEFAULT_SEQUENCES: usize = 32;
pub const DEFAULT_SEQUENCE_LEN: usize = 256;

/// Sequences from a seeded order-1 Markov chain. The transition matrix is
/// itself drawn from the seed (cubed uniforms, so rows are peaked and the
/// corpus has non-uniform statistics); everything is deterministic per seed.
pub fn generate_calibration(
    seed: u64,
    num_sequences: usize,
    sequence_len: usize,
    vocab_size: usize,
) -> CalibrationSet {
    assert!(num_sequences >= 1 && sequence_len >= 1 && vocab_size >= 1);
    let mut rng = Rng::new(seed);
    let cumulative_row = |rng: &mut Rng| -> Vec<f64> {
        let mut acc = 0.0;
        (0..vocab_size)
            .map(|_| {
                let u = rng.next_f64();
                acc += u * u * u;
                acc
            })
            .collect()
    };
    let initial = cumulative_row(&mut rng);
    let transitions: Vec<Vec<f64>> = (0..vocab_size).map(|_| cumulative_row(&mut rng)).collect();

    let sequences = (0..num_sequences)
        .map(|_| {
            let mut seq = Vec::with_capacity(sequence_len);
            let mut state = rng.pick_cumulative(&initial);
            seq.push(state as u32);
            for _ in 1..sequence_len {
                state = rng.pick_cumulative(&transitions[state]);
                seq.push(state as u32);
            }
            seq
        })
        .collect();
    CalibrationSet { sequences, seed, source: CalibrationSource::Markov }
}

/// Normalized top-k selection counts per MoE block.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageProfile {
    /// Layer index → per-expert frequency (sums to 1).
    pub per_block: BTreeMap<usize, Vec<f64>>,
}

/// Per MoE block, each token's (entering, after-residual) hidden pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace {
    pub per_block: BTreeMap<usize, IoPairs>,
}

impl BlockTrace {
    pub fn inputs(&self) -> BTreeMap<usize, Vec<Vec<f64>>> {
        self.per_block
            .iter()
            .map(|(l, pairs)| (*l, pairs.iter().map(|(x, _)| x.clone()).collect()))
            .collect()
    }
}

fn run_traced(
    model: &MoeModel,
    calib: &CalibrationSet,
    mut sink: TraceSink,
) -> Result<TraceSink, CalibrationError> {
    if calib.total_tokens() == 0 {
        return Err(CalibrationError::EmptyCalibration);
    }
    for seq in &calib.sequences {
        model.forward_traced(seq, Some(&mut sink))?;
    }
    Ok(sink)
}

/// For each quantizable weight, the stacked row-matrix of every input
/// vector that multiplied it, in sequence then token order. Weights a
/// routed expert never saw get a 0-row matrix.
pub fn capture_layer_inputs(
    model: &MoeModel,
    calib: &CalibrationSet,
) -> Result<BTreeMap<WeightId, DenseMatrix>, CalibrationError> {
    let sink = run_traced(model, calib, TraceSink::inputs_only())?;
    let mut captured: BTreeMap<WeightId, DenseMatrix> = sink
        .layer_inputs
        .into_iter()
        .map(|(id, rows)| (id, DenseMatrix::from_rows(&rows)))
        .collect();
    for id in model.quantizable_ids() {
        captured.entry(id).or_insert_with(|| {
            let cols = model.weight(&id).expect("quantizable id resolves").cols();
            DenseMatrix::zeros(0, cols)
        });
    }
    Ok(captured)
}

/// Binary top-k selection counts per expert, normalized per block to sum
/// to 1 over all selections (token count × top_k per block).
pub fn profile_usage(
    model: &MoeModel,
    calib: &CalibrationSet,
) -> Result<UsageProfile, CalibrationError> {
    let sink = run_traced(model, calib, TraceSink::selections_only())?;
    let e = model.spec.num_experts;
    let mut per_block = BTreeMap::new();
    for layer in model.moe_layer_indices() {
        let mut counts = alloc::vec![0u64; e];
        let selections = sink.router_selections.get(&layer).map_or(&[][..], Vec::as_slice);
        for sel in selections {
            for &x in sel {
                counts[x] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        let freqs = if total == 0 {
            alloc::vec![0.0; e]
        } else {
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        };
        per_block.insert(layer, freqs);
    }
    Ok(UsageProfile { per_block })
}

/// The hidden state entering each MoE block and the state after its
/// residual output, per token.
pub fn capture_block_io(
    model: &MoeModel,
    calib: &CalibrationSet,
) -> Result<BlockTrace, CalibrationError> {
    let sink = run_traced(model, calib, TraceSink::block_io_only())?;
    Ok(BlockTrace { per_block: sink.block_io })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, FfnnLayer, ModelSpec};
    use crate::numerics::cosine;

    fn toy_spec() -> ModelSpec {
        ModelSpec {
            vocab_size: 32,
            hidden_dim: 8,
            ffnn_dim: 12,
            num_layers: 2,
            num_experts: 4,
            top_k: 2,
            num_shared_experts: 0,
            first_layer_dense: false,
            seed: 3,
        }
    }

    #[test]
    fn generator_shape_and_range() {
        let c = generate_calibration(1, 4, 16, 32);
        assert_eq!(c.sequences.len(), 4);
        assert!(c.sequences.iter().all(|s| s.len() == 16));
        assert!(c.sequences.iter().flatten().all(|&t| t < 32));
    }

    #[test]
    fn generator_deterministic_and_seed_sensitive() {
        assert_eq!(generate_calibration(1, 4, 16, 32), generate_calibration(1, 4, 16, 32));
        assert_ne!(
            generate_calibration(1, 4, 16, 32).sequences,
            generate_calibration(2, 4, 16, 32).sequences
        );
    }

    #[test]
    fn generator_statistics_are_nonuniform() {
        let c = generate_calibration(5, 8, 256, 16);
        let mut counts = [0usize; 16];
        for &t in c.sequences.iter().flatten() {
            counts[t as usize] += 1;
        }
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().min().unwrap() as f64;
        assert!(max > 2.0 * (min + 1.0), "corpus suspiciously uniform: {counts:?}");
    }

    #[test]
    fn usage_full_selection_is_exactly_half() {
        let spec = ModelSpec { num_experts: 2, top_k: 2, ..toy_spec() };
        let model = build_model(&spec).unwrap();
        let calib = generate_calibration(1, 2, 32, 32);
        let usage = profile_usage(&model, &calib).unwrap();
        for freqs in usage.per_block.values() {
            assert_eq!(freqs, &alloc::vec![0.5, 0.5]);
        }
    }

    #[test]
    fn usage_biased_router_makes_expert_zero_the_most_used() {
        // Routing logits are linear in the hidden state, so a biased row
        // only helps where the state has a consistent component for it to
        // pick up: offset the embedding so hidden sums are positive, then
        // offset router row 0 to ride that component.
        let spec = ModelSpec { top_k: 1, ..toy_spec() };
        let mut model = build_model(&spec).unwrap();
        for v in model.embedding.data_mut() {
            *v += 0.3;
        }
        for layer in &mut model.layers {
            if let FfnnLayer::Moe { router, .. } = &mut layer.ffnn {
                for v in router.row_mut(0) {
                    *v += 2.0;
                }
            }
        }
        let calib = generate_calibration(1, 4, 64, 32);
        let usage = profile_usage(&model, &calib).unwrap();
        let uniform = 1.0 / model.spec.num_experts as f64;
        for freqs in usage.per_block.values() {
            let argmax = freqs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                .expect("nonempty")
                .0;
            assert_eq!(argmax, 0, "freqs {freqs:?}");
            assert!(freqs[0] > uniform + 0.1, "freqs {freqs:?}");
        }
    }

    #[test]
    fn usage_matches_recount_and_sums_to_one() {
        let model = build_model(&toy_spec()).unwrap();
        let calib = generate_calibration(9, 2, 32, 32);
        let usage = profile_usage(&model, &calib).unwrap();

        // Independent recount straight from the selection trace.
        let mut sink = TraceSink::selections_only();
        for seq in &calib.sequences {
            model.forward_traced(seq, Some(&mut sink)).unwrap();
        }
        for (layer, freqs) in &usage.per_block {
            let sels = &sink.router_selections[layer];
            let mut counts = alloc::vec![0usize; 4];
            for sel in sels {
                for &e in sel {
                    counts[e] += 1;
                }
            }
            let total: usize = counts.iter().sum();
            assert_eq!(total, 2 * calib.total_tokens());
            for (e, &c) in counts.iter().enumerate() {
                assert_eq!(freqs[e], c as f64 / total as f64);
            }
            let sum: f64 = freqs.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
            assert!(freqs.iter().all(|&f| (0.0..=1.0).contains(&f)));
        }
    }

    #[test]
    fn empty_calibration_is_rejected() {
        let model = build_model(&toy_spec()).unwrap();
        let calib = CalibrationSet {
            sequences: alloc::vec![],
            seed: 0,
            source: CalibrationSource::Markov,
        };
        assert_eq!(profile_usage(&model, &calib), Err(CalibrationError::EmptyCalibration));
    }

    #[test]
    fn capture_counts_follow_routing() {
        let model = build_model(&toy_spec()).unwrap();
        let calib = generate_calibration(4, 3, 10, 32);
        let captures = capture_layer_inputs(&model, &calib).unwrap();
        let tokens = calib.total_tokens();
        use crate::model::Projection;
        let q = &captures[&WeightId::attention(0, Projection::Q)];
        assert_eq!(q.rows(), tokens);
        assert_eq!(q.cols(), 8);
        for layer in model.moe_layer_indices() {
            let sum: usize = (0..4)
                .map(|e| captures[&WeightId::expert(layer, e, Projection::Gate)].rows())
                .sum();
            assert_eq!(sum, 2 * tokens);
        }
        // Every quantizable id is present even if unseen.
        for id in model.quantizable_ids() {
            assert!(captures.contains_key(&id));
        }
    }

    #[test]
    fn block_output_equals_input_when_experts_are_zero() {
        let mut model = build_model(&toy_spec()).unwrap();
        for layer in &mut model.layers {
            if let FfnnLayer::Moe { experts, shared, .. } = &mut layer.ffnn {
                for e in experts.iter_mut().chain(shared.iter_mut()) {
                    e.gate.data_mut().fill(0.0);
                    e.up.data_mut().fill(0.0);
                    e.down.data_mut().fill(0.0);
                }
            }
        }
        let calib = generate_calibration(2, 1, 8, 32);
        let trace = capture_block_io(&model, &calib).unwrap();
        for pairs in trace.per_block.values() {
            for (x, y) in pairs {
                assert_eq!(x, y);
                assert!((cosine(x, y).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_trace_counts_and_determinism() {
        let model = build_model(&toy_spec()).unwrap();
        let calib = generate_calibration(2, 3, 8, 32);
        let a = capture_block_io(&model, &calib).unwrap();
        assert_eq!(a.per_block.len(), 2);
        for pairs in a.per_block.values() {
            assert_eq!(pairs.len(), 24);
        }
        let b = capture_block_io(&model, &calib).unwrap();
        assert_eq!(a, b);
    }
}
