//! Per-block importance score predictor: a small tanh network trained to
//! predict the cosine similarity between a block's input and output hidden
//! states. Low predicted similarity marks a block whose transformation
//! matters, so low scores rank as most important.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::allocate::{plan_blocks, BitPlan, BlockSelect};
use crate::calibration::BlockTrace;
use crate::math;
use crate::model::MoeModel;
use crate::numerics::{cosine, DenseMatrix};
use crate::quant::BitWidth;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PredictorError {
    /// No usable (input, output) samples, overall or for one block.
    EmptyTrace { layer: Option<usize> },
}

impl fmt::Display for PredictorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictorError::EmptyTrace { layer: Some(l) } => {
                write!(f, "block {l} has no usable trace samples")
            }
            PredictorError::EmptyTrace { layer: None } => write!(f, "trace is empty"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for PredictorError {}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictorConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig { hidden: 64, epochs: 50, batch_size: 64, learning_rate: 1e-2, seed: 0 }
    }
}

/// One block's network: ŝ(x) = tanh(w₂ · tanh(w₁x)). Both tanh stages keep
/// the output inside (−1, 1), the range of the cosine targets.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPredictor {
    /// hidden × input_dim.
    pub w1: DenseMatrix,
    /// 1 × hidden, stored flat.
    pub w2: Vec<f64>,
    /// (epoch, full-training-set MSE); entry 0 is the untrained MSE.
    pub training_log: Vec<(usize, f64)>,
    pub final_mse: f64,
    /// MSE on the 20% tail of samples held out from training.
    pub holdout_mse: Option<f64>,
}

impl BlockPredictor {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut u = 0.0;
        for (i, &w2i) in self.w2.iter().enumerate() {
            let zi = crate::numerics::dot(self.w1.row(i), x);
            u += w2i * math::tanh(zi);
        }
        math::tanh(u)
    }

    /// Gradient of (ŝ(x) − target)² with respect to (w1, w2).
    pub fn gradients(&self, x: &[f64], target: f64) -> (DenseMatrix, Vec<f64>) {
        let h = self.w2.len();
        let mut a = vec![0.0; h];
        let mut u = 0.0;
        for i in 0..h {
            a[i] = math::tanh(crate::numerics::dot(self.w1.row(i), x));
            u += self.w2[i] * a[i];
        }
        let s_hat = math::tanh(u);
        let dl_du = 2.0 * (s_hat - target) * (1.0 - s_hat * s_hat);
        let mut gw1 = DenseMatrix::zeros(h, x.len());
        let mut gw2 = vec![0.0; h];
        for i in 0..h {
            gw2[i] = dl_du * a[i];
            let dl_dz = dl_du * self.w2[i] * (1.0 - a[i] * a[i]);
            let grow = gw1.row_mut(i);
            for (j, &xj) in x.iter().enumerate() {
                grow[j] = dl_dz * xj;
            }
        }
        (gw1, gw2)
    }

    fn mse(&self, samples: &[(Vec<f64>, f64)]) -> f64 {
        let total: f64 = samples
            .iter()
            .map(|(x, s)| {
                let e = self.predict(x) - s;
                e * e
            })
            .sum();
        total / samples.len() as f64
    }
}

/// One trained predictor per MoE block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScorePredictor {
    pub hidden: usize,
    pub blocks: BTreeMap<usize, BlockPredictor>,
}

fn seed_for_block(seed: u64, layer: usize) -> u64 {
    seed ^ (layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains one predictor per traced block on targets cosine(input, output)
/// by mini-batch gradient descent. After each epoch the full-training-set
/// MSE is evaluated; an epoch that worsens it is rolled back and the
/// learning rate halved, so the logged loss never increases. Pairs where
/// either vector is all zeros have no cosine and are skipped.
pub fn train_block_predictor(
    trace: &BlockTrace,
    config: &PredictorConfig,
) -> Result<BlockScorePredictor, PredictorError> {
    assert!(config.hidden >= 1 && config.batch_size >= 1);
    if trace.per_block.is_empty() {
        return Err(PredictorError::EmptyTrace { layer: None });
    }
    let mut blocks = BTreeMap::new();
    for (&layer, pairs) in &trace.per_block {
        let samples: Vec<(Vec<f64>, f64)> = pairs
            .iter()
            .filter_map(|(x, y)| cosine(x, y).ok().map(|c| (x.clone(), c)))
            .collect();
        if samples.is_empty() {
            return Err(PredictorError::EmptyTrace { layer: Some(layer) });
        }
        let dim = samples[0].0.len();
        let mut rng = Rng::new(seed_for_block(config.seed, layer));

        let split = ((samples.len() * 4) / 5).max(1);
        let (train, holdout) = samples.split_at(split);

        let h = config.hidden;
        // Fan-in-scaled init keeps the tanh stages out of their flat
        // saturation and dead-zero regions regardless of d and h.
        let b1 = 1.0 / math::sqrt(dim as f64);
        let b2 = 1.0 / math::sqrt(h as f64);
        let w1_data = (0..h * dim).map(|_| rng.uniform(-b1, b1)).collect();
        let mut p = BlockPredictor {
            w1: DenseMatrix::from_vec(h, dim, w1_data),
            w2: (0..h).map(|_| rng.uniform(-b2, b2)).collect(),
            training_log: Vec::with_capacity(config.epochs + 1),
            final_mse: 0.0,
            holdout_mse: None,
        };

        let mut last = p.mse(train);
        p.training_log.push((0, last));
        let mut lr = config.learning_rate;
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=config.epochs {
            let snapshot = (p.w1.clone(), p.w2.clone());
            rng.shuffle(&mut order);
            for batch in order.chunks(config.batch_size) {
                let scale = lr / batch.len() as f64;
                let mut gw1_sum = DenseMatrix::zeros(h, dim);
                let mut gw2_sum = vec![0.0; h];
                for &i in batch {
                    let (x, s) = &train[i];
                    let (gw1, gw2) = p.gradients(x, *s);
                    for (acc, g) in gw1_sum.data_mut().iter_mut().zip(gw1.data()) {
                        *acc += g;
                    }
                    for (acc, g) in gw2_sum.iter_mut().zip(&gw2) {
                        *acc += g;
                    }
                }
                for (w, g) in p.w1.data_mut().iter_mut().zip(gw1_sum.data()) {
                    *w -= scale * g;
                }
                for (w, g) in p.w2.iter_mut().zip(&gw2_sum) {
                    *w -= scale * g;
                }
            }
            let mse = p.mse(train);
            if mse > last {
                p.w1 = snapshot.0;
                p.w2 = snapshot.1;
                lr *= 0.5;
            } else {
                last = mse;
            }
            p.training_log.push((epoch, last));
        }
        p.final_mse = last;
        if !holdout.is_empty() {
            p.holdout_mse = Some(p.mse(holdout));
        }
        blocks.insert(layer, p);
    }
    Ok(BlockScorePredictor { hidden: config.hidden, blocks })
}

/// Mean predicted score per block over the given inputs. Blocks without a
/// trained predictor or without inputs are omitted.
pub fn predict_block_scores(
    bsp: &BlockScorePredictor,
    inputs: &BTreeMap<usize, Vec<Vec<f64>>>,
) -> BTreeMap<usize, f64> {
    let mut scores = BTreeMap::new();
    for (layer, p) in &bsp.blocks {
        if let Some(xs) = inputs.get(layer) {
            if xs.is_empty() {
                continue;
            }
            let total: f64 = xs.iter().map(|x| p.predict(x)).sum();
            scores.insert(*layer, total / xs.len() as f64);
        }
    }
    scores
}

/// The k blocks with the LOWEST predicted score (high score = input and
/// output nearly parallel = block does little) get `hi` on all their
/// expert projections; ties go to the lower block index.
pub fn plan_predicted_blocks(
    model: &MoeModel,
    scores: &BTreeMap<usize, f64>,
    k: usize,
    hi: BitWidth,
) -> BitPlan {
    let mut ranked: Vec<(usize, f64)> = scores.iter().map(|(l, s)| (*l, *s)).collect();
    ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite scores").then(a.0.cmp(&b.0)));
    let chosen: Vec<usize> = ranked.into_iter().take(k).map(|(l, _)| l).collect();
    let mut plan = plan_blocks(model, &BlockSelect::Listed(chosen), hi);
    plan.provenance.clear();
    plan.provenance.push(alloc::format!("predicted:{k}@{hi}"));
    plan
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(a.len() >= 2);
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - mean;
        let db = rb[i] - mean;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    cov / math::sqrt(va * vb)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite values"));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            out[t] = avg;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{capture_block_io, generate_calibration};
    use crate::model::{build_model, ModelSpec, Projection, WeightId};

    fn toy_model() -> MoeModel {
        build_model(&ModelSpec {
            vocab_size: 32,
            hidden_dim: 8,
            ffnn_dim: 12,
            num_layers: 3,
            num_experts: 4,
            top_k: 2,
            num_shared_experts: 0,
            first_layer_dense: false,
            seed: 33,
        })
        .unwrap()
    }

    fn random_predictor(rng: &mut Rng, h: usize, d: usize) -> BlockPredictor {
        BlockPredictor {
            w1: DenseMatrix::from_vec(h, d, (0..h * d).map(|_| rng.uniform(-0.5, 0.5)).collect()),
            w2: (0..h).map(|_| rng.uniform(-0.5, 0.5)).collect(),
            training_log: Vec::new(),
            final_mse: 0.0,
            holdout_mse: None,
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = Rng::new(71);
        let (h, d) = (5, 7);
        let mut p = random_predictor(&mut rng, h, d);
        let x: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let target = 0.3;
        let (gw1, gw2) = p.gradients(&x, target);
        let eps = 1e-5;
        let loss = |p: &BlockPredictor| {
            let e = p.predict(&x) - target;
            e * e
        };
        for i in 0..h {
            for j in 0..d {
                let orig = p.w1.get(i, j);
                p.w1.set(i, j, orig + eps);
                let up = loss(&p);
                p.w1.set(i, j, orig - eps);
                let down = loss(&p);
                p.w1.set(i, j, orig);
                let fd = (up - down) / (2.0 * eps);
                let g = gw1.get(i, j);
                let denom = fd.abs().max(g.abs()).max(1e-8);
                assert!((fd - g).abs() / denom <= 1e-4, "w1[{i}][{j}]: {g} vs {fd}");
            }
            let orig = p.w2[i];
            p.w2[i] = orig + eps;
            let up = loss(&p);
            p.w2[i] = orig - eps;
            let down = loss(&p);
            p.w2[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let denom = fd.abs().max(gw2[i].abs()).max(1e-8);
            assert!((fd - gw2[i]).abs() / denom <= 1e-4, "w2[{i}]: {} vs {fd}", gw2[i]);
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let model = toy_model();
        let calib = generate_calibration(3, 4, 16, model.spec.vocab_size);
        let trace = capture_block_io(&model, &calib).unwrap();
        let config = PredictorConfig { hidden: 8, epochs: 5, seed: 9, ..Default::default() };
        let a = train_block_predictor(&trace, &config).unwrap();
        let b = train_block_predictor(&trace, &config).unwrap();
        assert_eq!(a, b);
        let c = train_block_predictor(
            &trace,
            &PredictorConfig { seed: 10, ..config },
        )
        .unwrap();
        assert_ne!(a.blocks[&0].w1, c.blocks[&0].w1);
    }

    #[test]
    fn learns_constant_target() {
        // Every sample is the same (x, y) pair at cosine exactly 0.8.
        let x = alloc::vec![1.0, 0.0, 0.0, 0.0];
        let y = alloc::vec![0.8, 0.6, 0.0, 0.0];
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..100).map(|_| (x.clone(), y.clone())).collect();
        let trace = BlockTrace { per_block: [(0usize, pairs)].into_iter().collect() };
        let config = PredictorConfig {
            hidden: 16,
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 4,
        };
        let bsp = train_block_predictor(&trace, &config).unwrap();
        let got = bsp.blocks[&0].predict(&x);
        assert!((got - 0.8).abs() <= 0.05, "predicted {got}");
    }

    #[test]
    fn training_log_never_increases_and_halves_initial_mse() {
        let mut model = toy_model();
        // A mean offset in the embedding gives every hidden state a common
        // direction; without one, the bias-free odd network spends most of
        // its budget discovering where the data cloud sits.
        for v in model.embedding.data_mut() {
            *v += 0.3;
        }
        let calib = generate_calibration(5, 8, 48, model.spec.vocab_size);
        let trace = capture_block_io(&model, &calib).unwrap();
        let config = PredictorConfig { hidden: 16, epochs: 30, seed: 2, ..Default::default() };
        let bsp = train_block_predictor(&trace, &config).unwrap();
        for (layer, p) in &bsp.blocks {
            for w in p.training_log.windows(2) {
                assert!(w[1].1 <= w[0].1 + 1e-15, "block {layer}: loss rose {:?}", w);
            }
            let initial = p.training_log[0].1;
            assert!(
                p.final_mse <= 0.5 * initial,
                "block {layer}: final {} vs initial {initial}",
                p.final_mse
            );
            assert!(p.holdout_mse.is_some());
        }
    }

    #[test]
    fn outputs_stay_inside_open_unit_interval() {
        let mut rng = Rng::new(15);
        let p = random_predictor(&mut rng, 6, 4);
        for scale in [0.0, 1.0, 100.0, 1e6] {
            let x: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0) * scale).collect();
            let s = p.predict(&x);
            assert!(s > -1.0 && s < 1.0, "score {s} at scale {scale}");
        }
    }

    #[test]
    fn score_prediction_mean_semantics() {
        let mut rng = Rng::new(16);
        let p = random_predictor(&mut rng, 6, 4);
        let bsp = BlockScorePredictor {
            hidden: 6,
            blocks: [(2usize, p.clone())].into_iter().collect(),
        };
        let x = alloc::vec![0.4, -0.2, 0.9, 0.1];
        let single: BTreeMap<usize, Vec<Vec<f64>>> =
            [(2usize, alloc::vec![x.clone()])].into_iter().collect();
        let got = predict_block_scores(&bsp, &single);
        assert_eq!(got[&2], p.predict(&x));

        let tripled: BTreeMap<usize, Vec<Vec<f64>>> =
            [(2usize, alloc::vec![x.clone(), x.clone(), x.clone()])].into_iter().collect();
        let got3 = predict_block_scores(&bsp, &tripled);
        assert!((got3[&2] - got[&2]).abs() <= 1e-15);
    }

    #[test]
    fn predicted_block_planner_ranking() {
        let model = toy_model();
        let scores: BTreeMap<usize, f64> =
            [(0, 0.9), (1, 0.1), (2, 0.5)].into_iter().collect();
        let plan = plan_predicted_blocks(&model, &scores, 1, BitWidth::B4);
        assert!(plan.assignments.keys().all(|id| id.layer == 1));
        assert_eq!(
            plan.bits_for(&WeightId::expert(1, 0, Projection::Gate)),
            BitWidth::B4
        );

        // Monotone transform of the scores keeps the selection.
        let warped: BTreeMap<usize, f64> =
            scores.iter().map(|(l, s)| (*l, math::exp(*s * 3.0))).collect();
        let plan2 = plan_predicted_blocks(&model, &warped, 1, BitWidth::B4);
        assert_eq!(plan.assignments, plan2.assignments);

        let ties: BTreeMap<usize, f64> = [(0, 0.5), (1, 0.5), (2, 0.5)].into_iter().collect();
        let tied = plan_predicted_blocks(&model, &ties, 2, BitWidth::B4);
        assert!(tied.assignments.keys().all(|id| id.layer <= 1));

        use crate::allocate::plan_blocks;
        let all = plan_predicted_blocks(&model, &ties, 3, BitWidth::B4);
        let direct = plan_blocks(&model, &BlockSelect::FirstK(3), BitWidth::B4);
        assert_eq!(all.assignments, direct.assignments);
    }

    #[test]
    fn empty_traces_are_rejected() {
        let config = PredictorConfig::default();
        let empty = BlockTrace { per_block: BTreeMap::new() };
        assert_eq!(
            train_block_predictor(&empty, &config).unwrap_err(),
            PredictorError::EmptyTrace { layer: None }
        );
        let zeros = BlockTrace {
            per_block: [(1usize, alloc::vec![(alloc::vec![0.0, 0.0], alloc::vec![1.0, 1.0])])]
                .into_iter()
                .collect(),
        };
        assert_eq!(
            train_block_predictor(&zeros, &config).unwrap_err(),
            PredictorError::EmptyTrace { layer: Some(1) }
        );
    }

    #[test]
    fn spearman_hand_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let up = [10.0, 20.0, 30.0, 40.0];
        let down = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&a, &up) - 1.0).abs() <= 1e-12);
        assert!((spearman(&a, &down) + 1.0).abs() <= 1e-12);
        let tied = [1.0, 1.0, 2.0, 3.0];
        let r = ranks(&tied);
        assert_eq!(r, alloc::vec![1.5, 1.5, 3.0, 4.0]);
    }
}
