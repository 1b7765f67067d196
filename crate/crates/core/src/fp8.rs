//! 8-bit floating point formats and snapping to their exact representable values.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// How the all-ones exponent field is spent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpecialEncoding {
    /// The top exponent is reserved for Inf/NaN (E5M2 style).
    Ieee,
    /// Only the top exponent with an all-ones mantissa is reserved, as NaN (E4M3 style).
    NanOnly,
}

/// Sign + exponent + mantissa layout of an 8-bit float.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fp8Format {
    exponent_bits: u8,
    mantissa_bits: u8,
    exponent_bias: i32,
    special: SpecialEncoding,
}

impl Fp8Format {
    /// 4 exponent bits, 3 mantissa bits, bias 7, max 448.
    pub const E4M3: Fp8Format = Fp8Format {
        exponent_bits: 4,
        mantissa_bits: 3,
        exponent_bias: 7,
        special: SpecialEncoding::NanOnly,
    };

    /// 5 exponent bits, 2 mantissa bits, bias 15, max 57344.
    pub const E5M2: Fp8Format = Fp8Format {
        exponent_bits: 5,
        mantissa_bits: 2,
        exponent_bias: 15,
        special: SpecialEncoding::Ieee,
    };

    pub fn new(exponent_bits: u8, mantissa_bits: u8, exponent_bias: i32, special: SpecialEncoding) -> Result<Self> {
        if exponent_bits as u32 + mantissa_bits as u32 != 7 {
            return Err(Error::InvalidFormat(format!(
                "exponent ({exponent_bits}) + mantissa ({mantissa_bits}) bits must equal 7"
            )));
        }
        if exponent_bits == 0 {
            return Err(Error::InvalidFormat("at least one exponent bit is required".into()));
        }
        Ok(Self {
            exponent_bits,
            mantissa_bits,
            exponent_bias,
            special,
        })
    }

    /// IEEE-style format with the conventional bias `2^(e-1) - 1`.
    pub fn ieee(exponent_bits: u8, mantissa_bits: u8) -> Result<Self> {
        let bias = (1i32 << exponent_bits.saturating_sub(1).min(30)) - 1;
        Self::new(exponent_bits, mantissa_bits, bias, SpecialEncoding::Ieee)
    }

    pub fn exponent_bits(&self) -> u8 {
        self.exponent_bits
    }

    pub fn mantissa_bits(&self) -> u8 {
        self.mantissa_bits
    }

    pub fn exponent_bias(&self) -> i32 {
        self.exponent_bias
    }

    pub fn special(&self) -> SpecialEncoding {
        self.special
    }

    pub fn max_finite(&self) -> f32 {
        *self.value_set().last().expect("value set is never empty")
    }

    fn is_reserved(&self, exponent: u32, mantissa: u32) -> bool {
        let top = (1u32 << self.exponent_bits) - 1;
        let all_ones = (1u32 << self.mantissa_bits) - 1;
        match self.special {
            SpecialEncoding::Ieee => exponent == top,
            SpecialEncoding::NanOnly => exponent == top && mantissa == all_ones,
        }
    }

    /// Every finite value the format encodes, denormals included, sorted ascending
    /// without duplicates (`+0` and `-0` collapse to one zero).
    pub fn value_set(&self) -> Vec<f32> {
        let m_count = 1u32 << self.mantissa_bits;
        let mut positives = Vec::new();
        for exponent in 0..(1u32 << self.exponent_bits) {
            for mantissa in 0..m_count {
                if self.is_reserved(exponent, mantissa) {
                    continue;
                }
                let frac = mantissa as f64 / m_count as f64;
                let v = if exponent == 0 {
                    frac * 2f64.powi(1 - self.exponent_bias)
                } else {
                    (1.0 + frac) * 2f64.powi(exponent as i32 - self.exponent_bias)
                };
                positives.push(v as f32);
            }
        }
        positives.sort_by(|a, b| a.partial_cmp(b).unwrap());
        positives.dedup();
        let mut out: Vec<f32> = positives.iter().rev().filter(|&&v| v > 0.0).map(|&v| -v).collect();
        out.extend(positives);
        out
    }

    pub fn codebook(&self) -> Fp8Codebook {
        Fp8Codebook {
            values: self.value_set(),
        }
    }
}

impl fmt::Display for Fp8Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::E4M3 {
            write!(f, "e4m3")
        } else if *self == Self::E5M2 {
            write!(f, "e5m2")
        } else {
            write!(f, "e{}m{}b{}", self.exponent_bits, self.mantissa_bits, self.exponent_bias)
        }
    }
}

impl FromStr for Fp8Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "e4m3" => Ok(Self::E4M3),
            "e5m2" => Ok(Self::E5M2),
            other => Err(Error::InvalidFormat(format!("unknown fp8 format '{other}'"))),
        }
    }
}

/// Sorted value set with nearest-value lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct Fp8Codebook {
    values: Vec<f32>,
}

impl Fp8Codebook {
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn contains(&self, x: f32) -> bool {
        self.values.binary_search_by(|v| v.partial_cmp(&x).unwrap()).is_ok()
    }

    /// Nearest member; ties go to the member of smaller magnitude. Values outside the
    /// range saturate to the extreme members.
    pub fn nearest(&self, x: f32) -> f32 {
        let vals = &self.values;
        let idx = vals.partition_point(|&v| v < x);
        if idx == 0 {
            return vals[0];
        }
        if idx == vals.len() {
            return vals[vals.len() - 1];
        }
        let (lo, hi) = (vals[idx - 1], vals[idx]);
        if hi == x {
            return hi;
        }
        let d_lo = x as f64 - lo as f64;
        let d_hi = hi as f64 - x as f64;
        if d_lo < d_hi {
            lo
        } else if d_hi < d_lo {
            hi
        } else if lo.abs() <= hi.abs() {
            lo
        } else {
            hi
        }
    }
}

/// The sorted finite value set of `fmt`.
pub fn fp8_value_set(fmt: &Fp8Format) -> Vec<f32> {
    fmt.value_set()
}

/// Snaps every entry to the nearest representable value of `fmt`.
pub fn fp8_cast(x: &Matrix, fmt: &Fp8Format) -> Matrix {
    let book = fmt.codebook();
    x.map(|v| book.nearest(v))
}
