//! Absmax quantization to int8 and simulated fp8.
//!
//! int8: `q = round(127 · x / absmax(slice))` with round-half-away-from-zero, payload in
//! `[-127, 127]`, and the slice absmax kept as state. fp8: `q = fp8_cast(x / absmax(slice))`,
//! so the payload lives in `[-1, 1]`. An all-zero slice gets payload 0 and state 1.0.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fp8::{Fp8Codebook, Fp8Format};
use crate::numerics::Matrix;

pub const INT8_MAX: f32 = 127.0;

/// State stored for a slice whose absmax is zero.
pub const ZERO_SLICE_STATE: f32 = 1.0;

/// Which slices share one quantization scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    Row,
    Column,
    Tensor,
}

/// Element encoding of a quantized payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NumberFormat {
    Int8,
    Fp8(Fp8Format),
}

impl fmt::Display for NumberFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumberFormat::Int8 => write!(f, "int8"),
            NumberFormat::Fp8(fmt8) => write!(f, "fp8-{fmt8}"),
        }
    }
}

impl FromStr for NumberFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "int8" => Ok(NumberFormat::Int8),
            other => match other.strip_prefix("fp8-") {
                Some(f) => Ok(NumberFormat::Fp8(f.parse()?)),
                None => Err(Error::InvalidFormat(format!("unknown number format '{s}'"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Int8(Vec<i8>),
    /// Values drawn from `format`'s value set, scaled into `[-1, 1]`.
    Fp8 { values: Vec<f32>, format: Fp8Format },
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::Int8(v) => v.len(),
            Payload::Fp8 { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn format(&self) -> NumberFormat {
        match self {
            Payload::Int8(_) => NumberFormat::Int8,
            Payload::Fp8 { format, .. } => NumberFormat::Fp8(*format),
        }
    }
}

/// Quantized payload plus the absmax state needed to dequantize it.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    payload: Payload,
    state: Vec<f32>,
    axis: Axis,
}

impl QuantizedMatrix {
    /// Assembles a quantized matrix from raw parts, validating lengths and ranges.
    pub fn from_parts(rows: usize, cols: usize, payload: Payload, state: Vec<f32>, axis: Axis) -> Result<Self> {
        let q = Self {
            rows,
            cols,
            payload,
            state,
            axis,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn state(&self) -> &[f32] {
        &self.state
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn format(&self) -> NumberFormat {
        self.payload.format()
    }

    /// Int8 payload, if this is an int8 matrix.
    pub fn int8(&self) -> Option<&[i8]> {
        match &self.payload {
            Payload::Int8(v) => Some(v),
            Payload::Fp8 { .. } => None,
        }
    }

    pub fn expected_state_len(&self) -> usize {
        match self.axis {
            Axis::Row => self.rows,
            Axis::Column => self.cols,
            Axis::Tensor => 1,
        }
    }

    /// State entry that scales element `(i, j)`.
    #[inline]
    pub fn state_at(&self, i: usize, j: usize) -> f32 {
        match self.axis {
            Axis::Row => self.state[i],
            Axis::Column => self.state[j],
            Axis::Tensor => self.state[0],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.payload.len() != self.rows * self.cols {
            return Err(Error::InvalidArgument(format!(
                "payload length {} does not match shape {}x{}",
                self.payload.len(),
                self.rows,
                self.cols
            )));
        }
        if self.state.len() != self.expected_state_len() {
            return Err(Error::AxisMismatch(format!(
                "axis {:?} on {}x{} needs {} state entries, got {}",
                self.axis,
                self.rows,
                self.cols,
                self.expected_state_len(),
                self.state.len()
            )));
        }
        if self.state.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("state entries must be positive and finite".into()));
        }
        match &self.payload {
            Payload::Int8(v) => {
                if v.contains(&i8::MIN) {
                    return Err(Error::InvalidArgument("int8 payload must lie in [-127, 127]".into()));
                }
            }
            Payload::Fp8 { values, format } => {
                let book = format.codebook();
                if values.iter().any(|&v| !book.contains(v)) {
                    return Err(Error::InvalidArgument(format!("fp8 payload outside the {format} value set")));
                }
            }
        }
        Ok(())
    }

    /// Transposed copy; row-wise state becomes column-wise and vice versa.
    pub fn transpose(&self) -> QuantizedMatrix {
        let (r, c) = (self.rows, self.cols);
        let payload = match &self.payload {
            Payload::Int8(v) => Payload::Int8(transpose_vec(v, r, c)),
            Payload::Fp8 { values, format } => Payload::Fp8 {
                values: transpose_vec(values, r, c),
                format: *format,
            },
        };
        let axis = match self.axis {
            Axis::Row => Axis::Column,
            Axis::Column => Axis::Row,
            Axis::Tensor => Axis::Tensor,
        };
        QuantizedMatrix {
            rows: c,
            cols: r,
            payload,
            state: self.state.clone(),
            axis,
        }
    }
}

fn transpose_vec<T: Copy>(v: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(v.len());
    for j in 0..cols {
        for i in 0..rows {
            out.push(v[i * cols + j]);
        }
    }
    out
}

/// Per-slice absmax, with the zero-slice sentinel applied.
fn slice_states(x: &Matrix, axis: Axis) -> Vec<f32> {
    let (r, c) = x.shape();
    let mut states = match axis {
        Axis::Row => (0..r).map(|i| x.row(i).iter().fold(0.0f32, |m, v| m.max(v.abs()))).collect(),
        Axis::Column => {
            let mut s = vec![0.0f32; c];
            for i in 0..r {
                for (m, v) in s.iter_mut().zip(x.row(i)) {
                    *m = m.max(v.abs());
                }
            }
            s
        }
        Axis::Tensor => vec![x.absmax()],
    };
    for s in &mut states {
        if *s == 0.0 {
            *s = ZERO_SLICE_STATE;
        }
    }
    states
}

#[inline]
fn state_index(axis: Axis, i: usize, j: usize) -> usize {
    match axis {
        Axis::Row => i,
        Axis::Column => j,
        Axis::Tensor => 0,
    }
}

#[inline]
fn round_int8(x: f32, state: f32) -> i8 {
    // In f64 the code is the exact nearest grid point; f64::round is half-away-from-zero.
    (x as f64 * INT8_MAX as f64 / state as f64).round().clamp(-127.0, 127.0) as i8
}

/// Quantizes `x` with one scale per slice of `axis`. With `transpose_out` the payload is
/// written as `xᵀ` (and the axis tag flipped accordingly) in the same pass.
fn quantize_impl(x: &Matrix, format: NumberFormat, axis: Axis, transpose_out: bool) -> Result<QuantizedMatrix> {
    if !x.is_finite() {
        return Err(Error::NonFinite("quantize input"));
    }
    let (r, c) = x.shape();
    let states = slice_states(x, axis);
    let out_index = |i: usize, j: usize| if transpose_out { j * r + i } else { i * c + j };
    let payload = match format {
        NumberFormat::Int8 => {
            let mut q = vec![0i8; r * c];
            for i in 0..r {
                for (j, &v) in x.row(i).iter().enumerate() {
                    q[out_index(i, j)] = round_int8(v, states[state_index(axis, i, j)]);
                }
            }
            Payload::Int8(q)
        }
        NumberFormat::Fp8(fmt8) => {
            let book: Fp8Codebook = fmt8.codebook();
            let mut q = vec![0.0f32; r * c];
            for i in 0..r {
                for (j, &v) in x.row(i).iter().enumerate() {
                    q[out_index(i, j)] = book.nearest(v / states[state_index(axis, i, j)]);
                }
            }
            Payload::Fp8 { values: q, format: fmt8 }
        }
    };
    let (rows, cols, axis) = if transpose_out {
        let flipped = match axis {
            Axis::Row => Axis::Column,
            Axis::Column => Axis::Row,
            Axis::Tensor => Axis::Tensor,
        };
        (c, r, flipped)
    } else {
        (r, c, axis)
    };
    Ok(QuantizedMatrix {
        rows,
        cols,
        payload,
        state: states,
        axis,
    })
}

/// Quantizes with the given format and axis.
pub fn quantize(x: &Matrix, format: NumberFormat, axis: Axis) -> Result<QuantizedMatrix> {
    quantize_impl(x, format, axis, false)
}

/// Fused quantize-and-transpose: quantizes `x` along `axis` and returns the payload of `xᵀ`.
/// Row-wise slices of `x` become column-wise slices of the result and vice versa.
pub fn quantize_transpose(x: &Matrix, format: NumberFormat, axis: Axis) -> Result<QuantizedMatrix> {
    quantize_impl(x, format, axis, true)
}

pub fn quantize_rowwise(x: &Matrix) -> Result<QuantizedMatrix> {
    quantize(x, NumberFormat::Int8, Axis::Row)
}

pub fn quantize_columnwise(x: &Matrix) -> Result<QuantizedMatrix> {
    quantize(x, NumberFormat::Int8, Axis::Column)
}

pub fn quantize_tensorwise(x: &Matrix) -> Result<QuantizedMatrix> {
    quantize(x, NumberFormat::Int8, Axis::Tensor)
}

/// Tensor-wise quantization of `Wᵀ`, fused into a single pass over `W`.
pub fn quantize_tensorwise_transpose(w: &Matrix) -> Result<QuantizedMatrix> {
    quantize_transpose(w, NumberFormat::Int8, Axis::Tensor)
}

/// Column-wise quantization of `W` emitted as `Wᵀ`; the result is row-wise over `Wᵀ`.
pub fn quantize_columnwise_transpose(w: &Matrix) -> Result<QuantizedMatrix> {
    quantize_transpose(w, NumberFormat::Int8, Axis::Column)
}

/// `fp8_cast(x / absmax(slice))` with the slice absmax as state.
pub fn quantize_fp8(x: &Matrix, fmt: Fp8Format, axis: Axis) -> Result<QuantizedMatrix> {
    quantize(x, NumberFormat::Fp8(fmt), axis)
}

/// Reconstructs working-precision values: `q · state / 127` for int8, `q · state` for fp8.
pub fn dequantize(q: &QuantizedMatrix) -> Result<Matrix> {
    if q.state.len() != q.expected_state_len() {
        return Err(Error::AxisMismatch(format!(
            "axis {:?} on {}x{} needs {} state entries, got {}",
            q.axis,
            q.rows,
            q.cols,
            q.expected_state_len(),
            q.state.len()
        )));
    }
    let (r, c) = (q.rows, q.cols);
    let out = match &q.payload {
        Payload::Int8(v) => Matrix::from_fn(r, c, |i, j| {
            (v[i * c + j] as f64 * q.state_at(i, j) as f64 / INT8_MAX as f64) as f32
        }),
        Payload::Fp8 { values, .. } => Matrix::from_fn(r, c, |i, j| values[i * c + j] * q.state_at(i, j)),
    };
    Ok(out)
}
