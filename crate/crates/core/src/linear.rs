//! Bias-free linear layers `Y = X·Wᵀ` whose matmuls run in 8 bits.
//!
//! A linear layer has three products: the forward `X·Wᵀ`, the input gradient `G·W` and the
//! weight gradient `Gᵀ·X`. The SwitchBack variants quantize the first two and keep the
//! weight gradient in working precision, because its inner dimension is the token count
//! and quantization noise grows with the inner dimension. `AllQuant` quantizes all three.
//!
//! | variant      | forward X / W       | input grad G / Wᵀ        | weight grad     | saved for backward |
//! |--------------|---------------------|--------------------------|-----------------|--------------------|
//! | Standard     | full precision      | full precision           | full precision  | X, W               |
//! | SwitchBack   | row / tensor        | row / tensor (transpose) | full precision  | X, W               |
//! | SwitchBackM  | row / tensor        | row / saved W payload    | on dequant. X   | 8-bit X, 8-bit W   |
//! | SwitchBackQ  | row / row           | row / column (transpose) | full precision  | X, W               |
//! | AllQuant     | row / tensor        | row / tensor (transpose) | Gᵀ row / Xᵀ row | X, W               |
//!
//! With an fp8 format, `AllQuant` switches every quantization to tensor-wise.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fp8::Fp8Format;
use crate::numerics::{matmul, matmul_nn, matmul_tn, Matrix};
use crate::quantize::{dequantize, quantize, quantize_transpose, Axis, NumberFormat, Payload, QuantizedMatrix};

/// Largest inner dimension whose int8 dot products provably fit in an i32 accumulator
/// (`k · 127² ≤ i32::MAX`).
pub const INT32_SAFE_K: usize = (i32::MAX as usize) / (127 * 127);

const INT8_SCALE_SQ: f64 = 127.0 * 127.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Standard,
    SwitchBack,
    SwitchBackM,
    SwitchBackQ,
    AllQuant,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Standard,
        Variant::SwitchBack,
        Variant::SwitchBackM,
        Variant::SwitchBackQ,
        Variant::AllQuant,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Standard => "Standard",
            Variant::SwitchBack => "SwitchBack",
            Variant::SwitchBackM => "SwitchBackM",
            Variant::SwitchBackQ => "SwitchBackQ",
            Variant::AllQuant => "AllQuant",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown linear mode '{s}'")))
    }
}

/// Numeric format of the quantized products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinearFormat {
    Int8,
    /// `forward` covers inputs and weights, `gradient` covers output gradients.
    Fp8 { forward: Fp8Format, gradient: Fp8Format },
}

impl LinearFormat {
    pub const FP8_DEFAULT: LinearFormat = LinearFormat::Fp8 {
        forward: Fp8Format::E4M3,
        gradient: Fp8Format::E5M2,
    };

    fn forward(&self) -> NumberFormat {
        match self {
            LinearFormat::Int8 => NumberFormat::Int8,
            LinearFormat::Fp8 { forward, .. } => NumberFormat::Fp8(*forward),
        }
    }

    fn gradient(&self) -> NumberFormat {
        match self {
            LinearFormat::Int8 => NumberFormat::Int8,
            LinearFormat::Fp8 { gradient, .. } => NumberFormat::Fp8(*gradient),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LinearMode {
    pub variant: Variant,
    pub format: LinearFormat,
}

impl LinearMode {
    pub const STANDARD: LinearMode = LinearMode {
        variant: Variant::Standard,
        format: LinearFormat::Int8,
    };

    pub fn int8(variant: Variant) -> Self {
        Self {
            variant,
            format: LinearFormat::Int8,
        }
    }

    pub fn fp8(variant: Variant) -> Self {
        Self {
            variant,
            format: LinearFormat::FP8_DEFAULT,
        }
    }

    /// Axis used for the activation and gradient quantizations.
    fn activation_axis(&self) -> Axis {
        match (self.variant, self.format) {
            (Variant::AllQuant, LinearFormat::Fp8 { .. }) => Axis::Tensor,
            _ => Axis::Row,
        }
    }
}

impl fmt::Display for LinearMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.format {
            LinearFormat::Int8 => write!(f, "{}(int8)", self.variant),
            LinearFormat::Fp8 { forward, gradient } => write!(f, "{}(fp8 {forward}/{gradient})", self.variant),
        }
    }
}

/// Tensors retained between forward and backward.
#[derive(Debug, Clone, PartialEq)]
pub enum Saved {
    Full { x: Matrix, w: Matrix },
    Quantized { x: QuantizedMatrix, w: QuantizedMatrix },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearContext {
    mode: LinearMode,
    saved: Saved,
}

impl LinearContext {
    pub fn mode(&self) -> LinearMode {
        self.mode
    }

    pub fn saved(&self) -> &Saved {
        &self.saved
    }

    pub fn retains_full_precision_input(&self) -> bool {
        matches!(self.saved, Saved::Full { .. })
    }
}

fn require_axis(q: &QuantizedMatrix, allowed: &[Axis], what: &str) -> Result<()> {
    if allowed.contains(&q.axis()) {
        Ok(())
    } else {
        Err(Error::AxisMismatch(format!("{what} has axis {:?}, expected one of {allowed:?}", q.axis())))
    }
}

/// Raw int8 product `A·Bᵀ` with i32 accumulation. Rejects `k > INT32_SAFE_K`.
pub fn int8_matmul_i32(a: &[i8], b_t: &[i8], rows: usize, inner: usize, cols: usize) -> Result<Vec<i32>> {
    if inner > INT32_SAFE_K {
        return Err(Error::AccumulatorOverflow {
            k: inner,
            bound: INT32_SAFE_K,
        });
    }
    assert_eq!(a.len(), rows * inner);
    assert_eq!(b_t.len(), cols * inner);
    // k×cols layout. |a·b| ≤ 127² fits an i16 product; sums accumulate in i32.
    let mut bk = vec![0i16; inner * cols];
    for j in 0..cols {
        for p in 0..inner {
            bk[p * cols + j] = b_t[j * inner + p] as i16;
        }
    }
    let mut out = vec![0i32; rows * cols];
    let full_cols = cols - cols % 32;
    let mut i = 0;
    while i + 4 <= rows {
        let mut j = 0;
        while j < full_cols {
            let mut acc = [[0i32; 32]; 4];
            for p in 0..inner {
                let brow: &[i16; 32] = bk[p * cols + j..p * cols + j + 32].try_into().unwrap();
                for (ii, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + ii) * inner + p] as i16;
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += (av * bv) as i32;
                    }
                }
            }
            for (ii, row) in acc.iter().enumerate() {
                out[(i + ii) * cols + j..(i + ii) * cols + j + 32].copy_from_slice(row);
            }
            j += 32;
        }
        int8_edge(a, &bk, &mut out, i..i + 4, full_cols..cols, inner, cols);
        i += 4;
    }
    int8_edge(a, &bk, &mut out, i..rows, 0..cols, inner, cols);
    Ok(out)
}

fn int8_edge(
    a: &[i8],
    bk: &[i16],
    out: &mut [i32],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    inner: usize,
    width: usize,
) {
    if cols.is_empty() {
        return;
    }
    for i in rows {
        let orow = &mut out[i * width + cols.start..i * width + cols.end];
        for p in 0..inner {
            let av = a[i * inner + p] as i16;
            for (o, &bv) in orow.iter_mut().zip(&bk[p * width + cols.start..p * width + cols.end]) {
                *o += (av * bv) as i32;
            }
        }
    }
}

/// Raw int8 product `A·Bᵀ` with i64 accumulation, for inner dimensions beyond the i32 bound.
pub fn int8_matmul_i64(a: &[i8], b_t: &[i8], rows: usize, inner: usize, cols: usize) -> Vec<i64> {
    let mut out = vec![0i64; rows * cols];
    for i in 0..rows {
        let arow = &a[i * inner..(i + 1) * inner];
        for j in 0..cols {
            let brow = &b_t[j * inner..(j + 1) * inner];
            out[i * cols + j] = arow.iter().zip(brow).map(|(&x, &y)| x as i64 * y as i64).sum();
        }
    }
    out
}

/// Product `A·Bᵀ` of two quantized matrices followed by dequantization.
///
/// Each operand's state must be indexed by its output dimension: row-wise or tensor-wise.
/// Output `(i, j)` is `raw(i, j) · sA(i) · sB(j) / 127²` for int8 (raw accumulated in integers)
/// and `raw(i, j) · sA(i) · sB(j)` for fp8 (raw accumulated in f32 over the snapped values).
/// The scaling runs in f64 and rounds once to f32.
pub fn quantized_matmul(a: &QuantizedMatrix, b_t: &QuantizedMatrix) -> Result<Matrix> {
    require_axis(a, &[Axis::Row, Axis::Tensor], "left operand")?;
    require_axis(b_t, &[Axis::Row, Axis::Tensor], "right operand")?;
    if a.cols() != b_t.cols() {
        return Err(Error::ShapeMismatch {
            op: "quantized_matmul",
            lhs: a.shape(),
            rhs: b_t.shape(),
        });
    }
    let (rows, inner, cols) = (a.rows(), a.cols(), b_t.rows());
    let sa = |i: usize| a.state_at(i, 0) as f64;
    let sb = |j: usize| b_t.state_at(j, 0) as f64;
    match (a.payload(), b_t.payload()) {
        (Payload::Int8(pa), Payload::Int8(pb)) => {
            let raw: Vec<i64> = if inner <= INT32_SAFE_K {
                int8_matmul_i32(pa, pb, rows, inner, cols)?.into_iter().map(i64::from).collect()
            } else {
                int8_matmul_i64(pa, pb, rows, inner, cols)
            };
            Ok(Matrix::from_fn(rows, cols, |i, j| {
                (raw[i * cols + j] as f64 * sa(i) * sb(j) / INT8_SCALE_SQ) as f32
            }))
        }
        (Payload::Fp8 { values: va, .. }, Payload::Fp8 { values: vb, .. }) => {
            let ma = Matrix::from_vec(rows, inner, va.clone())?;
            let mb = Matrix::from_vec(cols, inner, vb.clone())?;
            let raw = matmul(&ma, &mb)?;
            Ok(Matrix::from_fn(rows, cols, |i, j| (raw.get(i, j) as f64 * sa(i) * sb(j)) as f32))
        }
        _ => Err(Error::InvalidArgument("operands use different number formats".into())),
    }
}

/// Row-wise X times tensor-wise W, dequantized by `state(W)/127² · state_row(X)`.
pub fn int8_matmul_dequant(qx: &QuantizedMatrix, qw: &QuantizedMatrix) -> Result<Matrix> {
    require_axis(qx, &[Axis::Row], "X")?;
    require_axis(qw, &[Axis::Tensor], "W")?;
    require_int8(qx)?;
    require_int8(qw)?;
    quantized_matmul(qx, qw)
}

/// Row-wise X times row-wise W, dequantized by the outer product of the row states over 127².
pub fn matmul_dequant_dual_rowwise(qx: &QuantizedMatrix, qw: &QuantizedMatrix) -> Result<Matrix> {
    require_axis(qx, &[Axis::Row], "X")?;
    require_axis(qw, &[Axis::Row], "W")?;
    require_int8(qx)?;
    require_int8(qw)?;
    quantized_matmul(qx, qw)
}

fn require_int8(q: &QuantizedMatrix) -> Result<()> {
    match q.format() {
        NumberFormat::Int8 => Ok(()),
        other => Err(Error::InvalidArgument(format!("expected an int8 operand, got {other}"))),
    }
}

/// Forward pass `Y = X·Wᵀ` for `X: b×n`, `W: m×n`.
pub fn linear_forward(mode: LinearMode, x: &Matrix, w: &Matrix) -> Result<(Matrix, LinearContext)> {
    if x.cols() != w.cols() {
        return Err(Error::ShapeMismatch {
            op: "linear_forward",
            lhs: x.shape(),
            rhs: w.shape(),
        });
    }
    if !x.is_finite() || !w.is_finite() {
        return Err(Error::NonFinite("linear_forward input"));
    }
    let fwd = mode.format.forward();
    let full = || Saved::Full { x: x.clone(), w: w.clone() };
    let (y, saved) = match mode.variant {
        Variant::Standard => (matmul(x, w)?, full()),
        Variant::SwitchBack | Variant::AllQuant => {
            let qx = quantize(x, fwd, mode.activation_axis())?;
            let qw = quantize(w, fwd, Axis::Tensor)?;
            (quantized_matmul(&qx, &qw)?, full())
        }
        Variant::SwitchBackM => {
            let qx = quantize(x, fwd, Axis::Row)?;
            let qw = quantize(w, fwd, Axis::Tensor)?;
            let y = quantized_matmul(&qx, &qw)?;
            (y, Saved::Quantized { x: qx, w: qw })
        }
        Variant::SwitchBackQ => {
            let qx = quantize(x, fwd, Axis::Row)?;
            let qw = quantize(w, fwd, Axis::Row)?;
            (quantized_matmul(&qx, &qw)?, full())
        }
    };
    Ok((y, LinearContext { mode, saved }))
}

/// Backward pass. Returns `(dX, dW)` with `dX = G·W` and `dW = Gᵀ·X`, each computed in the
/// precision the variant prescribes. Consumes the context.
pub fn linear_backward(ctx: LinearContext, g: &Matrix) -> Result<(Matrix, Matrix)> {
    let mode = ctx.mode;
    let fwd = mode.format.forward();
    let grad = mode.format.gradient();
    let (b, m) = match &ctx.saved {
        Saved::Full { x, w } => (x.rows(), w.rows()),
        Saved::Quantized { x, w } => (x.rows(), w.rows()),
    };
    if g.shape() != (b, m) {
        return Err(Error::ShapeMismatch {
            op: "linear_backward",
            lhs: g.shape(),
            rhs: (b, m),
        });
    }
    if !g.is_finite() {
        return Err(Error::NonFinite("linear_backward gradient"));
    }
    match (mode.variant, ctx.saved) {
        (Variant::Standard, Saved::Full { x, w }) => Ok((matmul_nn(g, &w)?, matmul_tn(g, &x)?)),
        (Variant::SwitchBack, Saved::Full { x, w }) => {
            let qg = quantize(g, grad, Axis::Row)?;
            let qwt = quantize_transpose(&w, fwd, Axis::Tensor)?;
            Ok((quantized_matmul(&qg, &qwt)?, matmul_tn(g, &x)?))
        }
        (Variant::SwitchBackM, Saved::Quantized { x: qx, w: qw }) => {
            let x = dequantize(&qx)?;
            let wgrad = matmul_tn(g, &x)?;
            let qg = quantize(g, grad, Axis::Row)?;
            let xgrad = quantized_matmul(&qg, &qw.transpose())?;
            Ok((xgrad, wgrad))
        }
        (Variant::SwitchBackQ, Saved::Full { x, w }) => {
            let qg = quantize(g, grad, Axis::Row)?;
            // Column-wise state of W becomes row-wise state of Wᵀ.
            let qwt = quantize_transpose(&w, fwd, Axis::Column)?;
            Ok((quantized_matmul(&qg, &qwt)?, matmul_tn(g, &x)?))
        }
        (Variant::AllQuant, Saved::Full { x, w }) => {
            let axis = mode.activation_axis();
            let qg = quantize(g, grad, axis)?;
            let qwt = quantize_transpose(&w, fwd, Axis::Tensor)?;
            let xgrad = quantized_matmul(&qg, &qwt)?;
            // Gᵀ·X with both operands quantized along the token dimension (int8) or
            // tensor-wise (fp8): rows of Gᵀ are columns of G.
            let slice_axis = if axis == Axis::Tensor { Axis::Tensor } else { Axis::Column };
            let qgt = quantize_transpose(g, grad, slice_axis)?;
            let qxt = quantize_transpose(&x, fwd, slice_axis)?;
            Ok((xgrad, quantized_matmul(&qgt, &qxt)?))
        }
        (variant, _) => Err(Error::ContextMismatch(variant.name())),
    }
}
