//! Grouped asymmetric affine weight codec with two backends: plain
//! round-to-nearest (RTN) and GPTQ, which quantizes columns left-to-right
//! and folds each column's rounding error into the not-yet-quantized
//! columns using the inverse calibration Hessian H = 2XᵀX + λI.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;
use crate::numerics::{cholesky, cholesky_inverse, DenseMatrix, NumericsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum BitWidth {
    B2,
    B3,
    B4,
    B8,
}

impl BitWidth {
    pub const ALL: [BitWidth; 4] = [BitWidth::B2, BitWidth::B3, BitWidth::B4, BitWidth::B8];

    pub fn bits(&self) -> u32 {
        match self {
            BitWidth::B2 => 2,
            BitWidth::B3 => 3,
            BitWidth::B4 => 4,
            BitWidth::B8 => 8,
        }
    }

    pub fn max_code(&self) -> u32 {
        (1 << self.bits()) - 1
    }

    pub fn try_from_bits(bits: u32) -> Option<BitWidth> {
        match bits {
            2 => Some(BitWidth::B2),
            3 => Some(BitWidth::B3),
            4 => Some(BitWidth::B4),
            8 => Some(BitWidth::B8),
            _ => None,
        }
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantBackend {
    Rtn,
    Gptq,
}

impl QuantBackend {
    pub fn tag(&self) -> &'static str {
        match self {
            QuantBackend::Rtn => "rtn",
            QuantBackend::Gptq => "gptq",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "rtn" => Some(QuantBackend::Rtn),
            "gptq" => Some(QuantBackend::Gptq),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuantError {
    /// No calibration rows (or all-zero calibration): the reconstruction
    /// objective is undefined. Callers fall back to RTN.
    EmptyCalibration,
    /// The dampened Hessian failed to factor; retry with more dampening.
    NotPositiveDefinite { pivot: usize },
}

impl fmt::Display for QuantError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantError::EmptyCalibration => write!(f, "no usable calibration rows"),
            QuantError::NotPositiveDefinite { pivot } => {
                write!(f, "Hessian not positive-definite at pivot {pivot} (increase damp)")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for QuantError {}

/// Default GPTQ dampening: 1% of the mean Hessian diagonal.
pub const DEFAULT_DAMP_RATIO: f64 = 0.01;
/// Default group length along each row.
pub const DEFAULT_GROUP_SIZE: usize = 128;

// ── Per-group affine grid ────────────────────────────────────────────────

/// Fits the asymmetric grid for one group: scale = (max−min)/(2^bits−1),
/// zero_point = round(−min/scale) clamped into code range. The range is
/// first widened to include zero, so the zero offset is itself a valid
/// code; this keeps the half-scale error bound unconditional (a group
/// entirely on one side of zero would otherwise fall outside its own
/// clamped grid) and the stored offset unsigned.
///
/// A constant group degenerates the grid, so it is stored exactly instead:
/// scale 1 and the constant's f64 bit pattern in zero_point. Any such
/// pattern exceeds the code range, which a regular (clamped) zero_point
/// never does, so decoding is unambiguous. All-zero groups need no marker
/// (scale 1, zero 0 reproduces them exactly).
pub fn fit_group_grid(values: &[f64], bits: BitWidth) -> (f64, u64) {
    debug_assert!(!values.is_empty());
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        min = min.min(v);
        max = max.max(v);
    }
    let max_code = bits.max_code();
    if min == max {
        let marker = min.to_bits();
        if min == 0.0 || marker <= max_code as u64 {
            // Zero constant, or a subnormal so tiny its bit pattern would
            // collide with real codes; encode as zero.
            return (1.0, 0);
        }
        return (1.0, marker);
    }
    let min = min.min(0.0);
    let max = max.max(0.0);
    let scale = (max - min) / max_code as f64;
    let zero = math::round(-min / scale).clamp(0.0, max_code as f64) as u64;
    (scale, zero)
}

#[inline]
fn is_constant_marker(zero: u64, bits: BitWidth) -> bool {
    zero > bits.max_code() as u64
}

/// Nearest code on the grid, clamped into range.
#[inline]
pub fn quantize_value(v: f64, scale: f64, zero: u64, bits: BitWidth) -> u32 {
    if is_constant_marker(zero, bits) {
        return 0;
    }
    let raw = math::round(v / scale) + zero as f64;
    raw.clamp(0.0, bits.max_code() as f64) as u32
}

#[inline]
pub fn dequantize_value(code: u32, scale: f64, zero: u64, bits: BitWidth) -> f64 {
    if is_constant_marker(zero, bits) {
        return f64::from_bits(zero);
    }
    (code as f64 - zero as f64) * scale
}

/// Quantizes one group: fitted grid plus nearest codes.
pub fn quantize_group_affine(values: &[f64], bits: BitWidth) -> (Vec<u32>, f64, u64) {
    let (scale, zero) = fit_group_grid(values, bits);
    let codes = values.iter().map(|&v| quantize_value(v, scale, zero, bits)).collect();
    (codes, scale, zero)
}

// ── Quantized tensor ─────────────────────────────────────────────────────

/// One quantized weight matrix: integer codes plus per-group grid
/// parameters. Groups partition each row contiguously; group g of row r
/// covers columns [g·group_size, min((g+1)·group_size, cols)).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedQuantTensor {
    pub rows: usize,
    pub cols: usize,
    pub bits: BitWidth,
    pub group_size: usize,
    /// rows × groups_per_row entries, row-major.
    pub scales: Vec<f64>,
    pub zeros: Vec<u64>,
    /// rows × cols codes, row-major, each < 2^bits.
    pub codes: Vec<u32>,
    pub backend: QuantBackend,
}

impl GroupedQuantTensor {
    pub fn groups_per_row(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }

    #[inline]
    fn group_index(&self, r: usize, c: usize) -> usize {
        r * self.groups_per_row() + c / self.group_size
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let g = self.group_index(r, c);
        dequantize_value(self.codes[r * self.cols + c], self.scales[g], self.zeros[g], self.bits)
    }

    pub fn dequantize(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(r, c, self.get(r, c));
            }
        }
        out
    }

    /// Storage bits per weight entry, codes only.
    pub fn code_bits(&self) -> u32 {
        self.bits.bits()
    }
}

/// Round-to-nearest baseline: fits each group's grid from the raw weights
/// and rounds. Uses no calibration data.
pub fn rtn_quantize(w: &DenseMatrix, bits: BitWidth, group_size: usize) -> GroupedQuantTensor {
    assert!(group_size >= 1);
    let rows = w.rows();
    let cols = w.cols();
    let gpr = cols.div_ceil(group_size);
    let mut scales = Vec::with_capacity(rows * gpr);
    let mut zeros = Vec::with_capacity(rows * gpr);
    let mut codes = vec![0u32; rows * cols];
    for r in 0..rows {
        let row = w.row(r);
        for g in 0..gpr {
            let lo = g * group_size;
            let hi = (lo + group_size).min(cols);
            let (group_codes, scale, zero) = quantize_group_affine(&row[lo..hi], bits);
            scales.push(scale);
            zeros.push(zero);
            codes[r * cols + lo..r * cols + hi].copy_from_slice(&group_codes);
        }
    }
    GroupedQuantTensor { rows, cols, bits, group_size, scales, zeros, codes, backend: QuantBackend::Rtn }
}

/// GPTQ: processes columns left-to-right; at each group boundary the grid
/// is frozen from the group's current (already compensated) weights; after
/// rounding column j, every remaining column receives the correction
/// −(w_j − q_j)/U_jj · U_{j,>j}, where U is the upper Cholesky factor of
/// H⁻¹ (H⁻¹ = UᵀU) and H = 2XᵀX + λI with λ = damp_ratio × mean(diag(2XᵀX)).
///
/// `x` holds one calibration input vector per row (x.cols() = w.cols()).
pub fn gptq_quantize(
    w: &DenseMatrix,
    x: &DenseMatrix,
    bits: BitWidth,
    group_size: usize,
    damp_ratio: f64,
) -> Result<GroupedQuantTensor, QuantError> {
    assert!(group_size >= 1);
    assert!(damp_ratio > 0.0);
    assert_eq!(x.cols(), w.cols(), "calibration width must match weight width");
    if x.rows() == 0 {
        return Err(QuantError::EmptyCalibration);
    }
    let rows = w.rows();
    let cols = w.cols();

    let mut h = x.gram();
    let mut diag_mean = 0.0;
    for i in 0..cols {
        diag_mean += 2.0 * h.get(i, i);
    }
    diag_mean /= cols as f64;
    if diag_mean <= 0.0 {
        // All-zero calibration carries no signal.
        return Err(QuantError::EmptyCalibration);
    }
    let lambda = damp_ratio * diag_mean;
    for i in 0..cols {
        for j in 0..cols {
            let v = 2.0 * h.get(i, j) + if i == j { lambda } else { 0.0 };
            h.set(i, j, v);
        }
    }

    let to_quant_err = |e: NumericsError| match e {
        NumericsError::NotPositiveDefinite { pivot } => QuantError::NotPositiveDefinite { pivot },
        NumericsError::ZeroVector => unreachable!("cholesky never reports ZeroVector"),
    };
    let hinv = cholesky_inverse(&h).map_err(to_quant_err)?;
    // H⁻¹ = L·Lᵀ = UᵀU with U = Lᵀ: row j of U carries the compensation
    // weights for everything to the right of column j.
    let u = cholesky(&hinv).map_err(to_quant_err)?.transpose();

    let gpr = cols.div_ceil(group_size);
    let mut work = w.clone();
    let mut scales = vec![0.0; rows * gpr];
    let mut zeros = vec![0u64; rows * gpr];
    let mut codes = vec![0u32; rows * cols];

    for g in 0..gpr {
        let lo = g * group_size;
        let hi = (lo + group_size).min(cols);
        for r in 0..rows {
            let (scale, zero) = fit_group_grid(&work.row(r)[lo..hi], bits);
            scales[r * gpr + g] = scale;
            zeros[r * gpr + g] = zero;
        }
        for j in lo..hi {
            let ujj = u.get(j, j);
            for r in 0..rows {
                let scale = scales[r * gpr + g];
                let zero = zeros[r * gpr + g];
                let wv = work.get(r, j);
                let code = quantize_value(wv, scale, zero, bits);
                codes[r * cols + j] = code;
                let err = (wv - dequantize_value(code, scale, zero, bits)) / ujj;
                let urow = u.row(j);
                let wrow = work.row_mut(r);
                for c in j + 1..cols {
                    wrow[c] -= err * urow[c];
                }
            }
        }
    }

    Ok(GroupedQuantTensor {
        rows,
        cols,
        bits,
        group_size,
        scales,
        zeros,
        codes,
        backend: QuantBackend::Gptq,
    })
}

/// ‖(w − ŵ)·X‖²_F with calibration vectors as rows of `x`: the layer-wise
/// reconstruction objective.
pub fn reconstruction_error(w: &DenseMatrix, w_hat: &DenseMatrix, x: &DenseMatrix) -> f64 {
    assert_eq!(w.rows(), w_hat.rows());
    assert_eq!(w.cols(), w_hat.cols());
    assert_eq!(x.cols(), w.cols());
    let rows = w.rows();
    let cols = w.cols();
    let mut diff = DenseMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            diff.set(r, c, w.get(r, c) - w_hat.get(r, c));
        }
    }
    let mut total = 0.0;
    for t in 0..x.rows() {
        let y = diff.matvec(x.row(t));
        total += y.iter().map(|v| v * v).sum::<f64>();
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> DenseMatrix {
        let data = (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
        DenseMatrix::from_vec(rows, cols, data)
    }

    #[test]
    fn grid_aligned_group_is_exact() {
        let (codes, scale, zero) = quantize_group_affine(&[0.0, 1.0, 2.0, 3.0], BitWidth::B2);
        assert_eq!(scale, 1.0);
        assert_eq!(zero, 0);
        assert_eq!(codes, vec![0, 1, 2, 3]);
        for (i, &c) in codes.iter().enumerate() {
            assert_eq!(dequantize_value(c, scale, zero, BitWidth::B2), i as f64);
        }
    }

    #[test]
    fn hand_case_negative_span() {
        let (codes, scale, zero) = quantize_group_affine(&[-1.0, 0.0, 2.0], BitWidth::B2);
        assert_eq!(scale, 1.0);
        assert_eq!(zero, 1);
        assert_eq!(codes, vec![0, 1, 3]);
        let deq: Vec<f64> =
            codes.iter().map(|&c| dequantize_value(c, scale, zero, BitWidth::B2)).collect();
        assert_eq!(deq, vec![-1.0, 0.0, 2.0]);
    }

    #[test]
    fn constant_groups_round_trip_exactly() {
        for bits in BitWidth::ALL {
            for c in [5.0, -3.25, 0.0, 1e-9, -7.5e11] {
                let (codes, scale, zero) = quantize_group_affine(&[c, c, c], bits);
                assert_eq!(scale, 1.0);
                for &code in &codes {
                    assert_eq!(dequantize_value(code, scale, zero, bits), c, "constant {c}");
                }
            }
        }
    }

    #[test]
    fn error_bounded_by_half_scale() {
        let mut rng = Rng::new(2024);
        for _ in 0..500 {
            let n = 1 + rng.below(16);
            let vals: Vec<f64> = (0..n).map(|_| rng.uniform(-4.0, 4.0)).collect();
            for bits in BitWidth::ALL {
                let (codes, scale, zero) = quantize_group_affine(&vals, bits);
                for (&v, &c) in vals.iter().zip(&codes) {
                    let err = (v - dequantize_value(c, scale, zero, bits)).abs();
                    assert!(err <= scale / 2.0 + scale * 1e-12, "err {err} scale {scale}");
                }
            }
        }
    }

    #[test]
    fn rtn_group_partitioning() {
        let mut rng = Rng::new(3);
        let w = random_matrix(&mut rng, 4, 10);
        let t = rtn_quantize(&w, BitWidth::B4, 16);
        assert_eq!(t.groups_per_row(), 1);
        assert_eq!(t.scales.len(), 4);
        let t = rtn_quantize(&w, BitWidth::B4, 4);
        assert_eq!(t.groups_per_row(), 3);
        assert_eq!(t.scales.len(), 12);
        assert_eq!(t.codes.len(), 40);
        assert!(t.codes.iter().all(|&c| c <= 15));
    }

    #[test]
    fn rtn_frobenius_bound() {
        let mut rng = Rng::new(4);
        let w = random_matrix(&mut rng, 6, 24);
        let t = rtn_quantize(&w, BitWidth::B3, 8);
        let deq = t.dequantize();
        let mut err = 0.0;
        for (a, b) in w.data().iter().zip(deq.data()) {
            err += (a - b) * (a - b);
        }
        let bound: f64 = t.scales.iter().map(|s| s * s / 4.0 * 8.0).sum();
        assert!(err <= bound * (1.0 + 1e-9), "err {err} bound {bound}");
    }

    #[test]
    fn rtn_requantization_is_idempotent() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let w = random_matrix(&mut rng, 5, 17);
            for bits in BitWidth::ALL {
                let t1 = rtn_quantize(&w, bits, 6);
                let t2 = rtn_quantize(&t1.dequantize(), bits, 6);
                assert_eq!(t1.codes, t2.codes);
                assert_eq!(t1.zeros, t2.zeros);
                // The refitted scale may wobble in its last bit; the grid
                // anchors (codes, zero offsets) must not.
                for (a, b) in t1.scales.iter().zip(&t2.scales) {
                    assert!((a - b).abs() <= 1e-12 * a.abs());
                }
            }
        }
    }

    #[test]
    fn gptq_diagonal_hessian_equals_rtn() {
        let mut rng = Rng::new(6);
        let w = random_matrix(&mut rng, 3, 8);
        // One scaled basis vector per row: XᵀX is diagonal.
        let mut x = DenseMatrix::zeros(8, 8);
        for i in 0..8 {
            x.set(i, i, 0.5 + i as f64);
        }
        let g = gptq_quantize(&w, &x, BitWidth::B2, 4, 0.01).unwrap();
        let r = rtn_quantize(&w, BitWidth::B2, 4);
        assert_eq!(g.codes, r.codes);
        assert_eq!(g.scales, r.scales);
        assert_eq!(g.zeros, r.zeros);
    }

    #[test]
    fn gptq_single_weight_is_nearest_grid_point() {
        let w = DenseMatrix::from_vec(1, 1, vec![0.7]);
        let x = DenseMatrix::from_vec(3, 1, vec![1.0, -2.0, 0.5]);
        let g = gptq_quantize(&w, &x, BitWidth::B4, 128, 0.01).unwrap();
        let r = rtn_quantize(&w, BitWidth::B4, 128);
        assert_eq!(g.codes, r.codes);
        assert_eq!(g.dequantize(), r.dequantize());
    }

    #[test]
    fn gptq_rejects_empty_or_zero_calibration() {
        let w = DenseMatrix::from_vec(1, 2, vec![0.3, -0.4]);
        let empty = DenseMatrix::zeros(0, 2);
        assert_eq!(
            gptq_quantize(&w, &empty, BitWidth::B2, 128, 0.01),
            Err(QuantError::EmptyCalibration)
        );
        let zeros = DenseMatrix::zeros(4, 2);
        assert_eq!(
            gptq_quantize(&w, &zeros, BitWidth::B2, 128, 0.01),
            Err(QuantError::EmptyCalibration)
        );
    }

    #[test]
    fn objective_identity_direct_vs_hessian_form() {
        let mut rng = Rng::new(8);
        let w = random_matrix(&mut rng, 4, 6);
        let x = random_matrix(&mut rng, 32, 6);
        let w_hat = rtn_quantize(&w, BitWidth::B3, 3).dequantize();
        let direct = reconstruction_error(&w, &w_hat, &x);

        let mut diff = DenseMatrix::zeros(4, 6);
        for r in 0..4 {
            for c in 0..6 {
                diff.set(r, c, w.get(r, c) - w_hat.get(r, c));
            }
        }
        let via_gram = diff.matmul(&x.gram()).matmul(&diff.transpose());
        let trace: f64 = (0..4).map(|i| via_gram.get(i, i)).sum();
        assert!((direct - trace).abs() <= 1e-8 * direct.max(1e-30));
    }

    #[test]
    fn gptq_error_monotone_in_bits() {
        let mut rng = Rng::new(9);
        let w = random_matrix(&mut rng, 4, 12);
        let x = random_matrix(&mut rng, 48, 12);
        let mut last = f64::INFINITY;
        for bits in BitWidth::ALL {
            let t = gptq_quantize(&w, &x, bits, 6, 0.01).unwrap();
            let err = reconstruction_error(&w, &t.dequantize(), &x);
            assert!(err <= last + 1e-12, "error rose at {bits} bits: {err} > {last}");
            last = err;
        }
    }
}
