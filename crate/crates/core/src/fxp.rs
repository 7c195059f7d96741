//! 8-bit signed fixed-point arithmetic.
//!
//! A [`QFormat`] splits the seven magnitude bits of an `i8` code into
//! integer and decimal parts. Codes cover `[-2^i, 2^i - 2^-d]` with step
//! `2^-d`. Every int8 layer uses [`requantize`] to go from its int32
//! accumulator back to an output code.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const BITWIDTH: u8 = 8;
pub const MAGNITUDE_BITS: u8 = BITWIDTH - 1;

/// Signed fixed-point layout with `integer_bits + decimal_bits + 1 == 8`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawQFormat", into = "RawQFormat")]
pub struct QFormat {
    integer_bits: u8,
    decimal_bits: u8,
}

#[derive(Serialize, Deserialize)]
struct RawQFormat {
    integer_bits: u8,
    decimal_bits: u8,
}

impl TryFrom<RawQFormat> for QFormat {
    type Error = Error;
    fn try_from(raw: RawQFormat) -> Result<Self> {
        QFormat::new(raw.integer_bits, raw.decimal_bits)
    }
}

impl From<QFormat> for RawQFormat {
    fn from(q: QFormat) -> Self {
        RawQFormat { integer_bits: q.integer_bits, decimal_bits: q.decimal_bits }
    }
}

impl QFormat {
    pub fn new(integer_bits: u8, decimal_bits: u8) -> Result<Self> {
        if integer_bits as u16 + decimal_bits as u16 != MAGNITUDE_BITS as u16 {
            return Err(Error::InvalidArgument(format!(
                "Q{{{integer_bits},{decimal_bits}}}: integer + decimal bits must equal {MAGNITUDE_BITS}"
            )));
        }
        Ok(Self { integer_bits, decimal_bits })
    }

    /// The format with `integer_bits` integer bits and the rest decimal.
    pub fn with_integer_bits(integer_bits: u8) -> Result<Self> {
        if integer_bits > MAGNITUDE_BITS {
            return Err(Error::InvalidArgument(format!("{integer_bits} integer bits exceed {MAGNITUDE_BITS}")));
        }
        Self::new(integer_bits, MAGNITUDE_BITS - integer_bits)
    }

    pub fn with_decimal_bits(decimal_bits: u8) -> Result<Self> {
        if decimal_bits > MAGNITUDE_BITS {
            return Err(Error::InvalidArgument(format!("{decimal_bits} decimal bits exceed {MAGNITUDE_BITS}")));
        }
        Self::new(MAGNITUDE_BITS - decimal_bits, decimal_bits)
    }

    /// The eight formats `Q{i,7-i}`, fewest integer bits first.
    pub fn all() -> impl Iterator<Item = QFormat> {
        (0..=MAGNITUDE_BITS).map(|i| QFormat { integer_bits: i, decimal_bits: MAGNITUDE_BITS - i })
    }

    pub fn integer_bits(&self) -> u8 {
        self.integer_bits
    }

    pub fn decimal_bits(&self) -> u8 {
        self.decimal_bits
    }

    pub fn step(&self) -> f64 {
        (-(self.decimal_bits as f64)).exp2()
    }

    pub fn min_value(&self) -> f64 {
        -(self.integer_bits as f64).exp2()
    }

    pub fn max_value(&self) -> f64 {
        (self.integer_bits as f64).exp2() - self.step()
    }
}

impl Default for QFormat {
    fn default() -> Self {
        QFormat { integer_bits: 0, decimal_bits: MAGNITUDE_BITS }
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{{{},{}}}", self.integer_bits, self.decimal_bits)
    }
}

/// Bias alignment and output renormalization for one int8 layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub left_shift: u32,
    pub right_shift: u32,
}

impl ShiftSpec {
    pub fn new(left_shift: u32, right_shift: u32) -> Self {
        Self { left_shift, right_shift }
    }
}

#[inline]
pub fn saturate_i8(v: i64) -> i8 {
    v.clamp(i8::MIN as i64, i8::MAX as i64) as i8
}

/// Code before saturation; `None` for NaN.
#[inline]
fn raw_code(x: f64, q: QFormat) -> Option<f64> {
    if x.is_nan() {
        return None;
    }
    // f64::round is round-half-away-from-zero.
    Some((x * (q.decimal_bits as f64).exp2()).round())
}

/// Round-to-nearest (ties away from zero), saturated to `[-128, 127]`.
/// NaN maps to code 0.
#[inline]
pub fn quantize<T: Real>(x: T, q: QFormat) -> i8 {
    match raw_code(x.as_f64(), q) {
        Some(c) => c.clamp(i8::MIN as f64, i8::MAX as f64) as i8,
        None => 0,
    }
}

#[inline]
pub fn dequantize<T: Real>(code: i8, q: QFormat) -> T {
    T::of(code as f64 * q.step())
}

pub fn quantize_slice<T: Real>(xs: &[T], q: QFormat) -> Vec<i8> {
    xs.iter().map(|&x| quantize(x, q)).collect()
}

pub fn dequantize_slice<T: Real>(codes: &[i8], q: QFormat) -> Vec<T> {
    codes.iter().map(|&c| dequantize(c, q)).collect()
}

/// Quantization error budget of a sample set under one format.
///
/// `mse_granular` and `mse_overload` are both normalized by the total sample
/// count, so `mse == mse_granular + mse_overload`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SqnrReport {
    pub format: QFormat,
    pub samples: usize,
    pub overloaded: usize,
    pub signal_power: f64,
    pub mse_granular: f64,
    pub mse_overload: f64,
    pub mse: f64,
    /// `signal_power / mse`; `f64::INFINITY` when there is no error.
    pub sqnr: f64,
}

impl SqnrReport {
    pub fn sqnr_db(&self) -> f64 {
        10.0 * self.sqnr.log10()
    }
}

/// Signal-to-quantization-noise ratio `E[x^2] / E[e_q^2]`.
///
/// A sample counts as overloaded when its rounded code falls outside the
/// representable code range (beyond the outermost decision levels).
pub fn measure_sqnr<T: Real>(values: &[T], q: QFormat) -> Result<SqnrReport> {
    if values.is_empty() {
        return Err(Error::Empty("no samples to measure".into()));
    }
    let mut signal = 0.0f64;
    let mut granular = 0.0f64;
    let mut overload = 0.0f64;
    let mut overloaded = 0usize;
    for &v in values {
        let x = v.as_f64();
        signal += x * x;
        let e = x - dequantize::<f64>(quantize(x, q), q);
        let saturated = raw_code(x, q).is_none_or(|c| c < i8::MIN as f64 || c > i8::MAX as f64);
        if saturated {
            overload += e * e;
            overloaded += 1;
        } else {
            granular += e * e;
        }
    }
    if signal == 0.0 {
        return Err(Error::UndefinedSignal);
    }
    let n = values.len() as f64;
    let mse_granular = granular / n;
    let mse_overload = overload / n;
    let mse = mse_granular + mse_overload;
    let signal_power = signal / n;
    let sqnr = if mse == 0.0 { f64::INFINITY } else { signal_power / mse };
    Ok(SqnrReport { format: q, samples: values.len(), overloaded, signal_power, mse_granular, mse_overload, mse, sqnr })
}

/// Arithmetic right shift with a round-half-up term of `2^(shift-1)`.
#[inline]
pub fn round_shift(v: i64, shift: u32) -> i64 {
    match shift {
        0 => v,
        s if s >= 63 => {
            if v < 0 {
                -1
            } else {
                0
            }
        }
        s => (v + (1i64 << (s - 1))) >> s,
    }
}

/// `saturate8(round_shift(acc + (bias << left), right))`.
#[inline]
pub fn requantize(acc: i32, bias: i32, shift: ShiftSpec) -> i8 {
    saturate_i8(requantize_wide(acc as i64, bias, shift))
}

/// Unsaturated requantization on a 64-bit accumulator.
#[inline]
pub fn requantize_wide(acc: i64, bias: i32, shift: ShiftSpec) -> i64 {
    let aligned = (bias as i64) << shift.left_shift.min(32);
    round_shift(acc + aligned, shift.right_shift)
}
