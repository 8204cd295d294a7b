//! Structure-aware mixed-precision weight quantization for small
//! mixture-of-experts transformers.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense f64 matrices, Cholesky factorization/inversion,
//!   cosine similarity, and a seeded xoshiro256++ RNG.
//! - [`model`]: a decoder-style MoE transformer (single-head causal
//!   attention, RMS norm, SiLU-gated experts, top-k routing) with a
//!   deterministic forward pass and optional trace capture.
//! - [`calibration`]: synthetic Markov-chain corpora, per-linear-layer
//!   input capture, expert-usage profiling, and block input/output traces.
//! - [`quant`]: grouped asymmetric affine codec with RTN and GPTQ
//!   (Hessian-compensated) backends.
//! - [`allocate`]: bit-allocation planners (outlier, frequency, attention,
//!   block-depth, shared-expert, alpha-mix, random baselines), plan
//!   composition, average-bits accounting, plan application, and Pareto
//!   frontier assembly.
//! - [`predictor`]: per-block two-layer tanh networks trained to predict
//!   the cosine similarity between a block's input and output states,
//!   used to rank blocks for extra bits.
//! - [`eval`]: perplexity on held-out corpora and multi-strategy
//!   comparison reports.
//!
//! Everything is pure computation over `alloc` collections; the crate
//! builds without `std` (file formats and the CLI live in a companion
//! crate). All randomness flows from explicit 64-bit seeds and every
//! public operation is deterministic given its inputs.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod allocate;
pub mod calibration;
pub mod eval;
mod math;
pub mod model;
pub mod numerics;
pub mod predictor;
pub mod quant;
pub mod rng;

pub use allocate::{
    apply_plan, average_bits, compose, pareto_frontier, BitPlan, ParetoPoint, QuantizeOptions,
    QuantizedModel,
};
pub use calibration::{generate_calibration, profile_usage, CalibrationSet, UsageProfile};
pub use eval::{compare, perplexity, render_report, EvalReport, ReportFormat, Strategy};
pub use model::{build_model, MoeModel, ModelSpec, WeightId};
pub use numerics::DenseMatrix;
pub use predictor::{train_block_predictor, BlockScorePredictor, PredictorConfig};
pub use quant::{gptq_quantize, rtn_quantize, BitWidth, GroupedQuantTensor, QuantBackend};
