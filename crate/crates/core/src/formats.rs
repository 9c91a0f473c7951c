//! Bit-exact codecs for the number formats used by the toolkit.
//!
//! - **E4M3**: 1 sign, 4 exponent, 3 mantissa bits, bias 7. No infinities; the
//!   all-ones exponent is reused for normals and only `S.1111.111` is NaN.
//!   Range ±448, smallest subnormal 2^-9.
//! - **E5M2**: 1 sign, 5 exponent, 2 mantissa bits, bias 15, IEEE-like specials.
//!   Range ±57344, smallest normal 2^-14, smallest subnormal 2^-16.
//! - **BF16**: the upper half of an IEEE binary32.
//! - **E8M0**: unsigned power-of-two exponent code, bias 127, `0xFF` is NaN.
//! - **FP32**: identity on the raw bits.
//!
//! Encoding rounds to nearest, ties to even, with subnormal support. Finite
//! values beyond the largest finite magnitude saturate to it instead of
//! producing infinity or NaN.
//!
//! Canonical choices: NaN inputs encode to a single quiet pattern per sign
//! (`0x7F` for E4M3, `0x7E` for E5M2, `0x7FC0` for BF16), so NaN payloads do
//! not survive a round trip. Negative zero keeps its sign bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("E8M0 can only encode positive powers of two, got {0:e}")]
    NotPowerOfTwo(f32),
    #[error("cannot decompose {0:e}: value must be a finite, normal FP32 number")]
    NotNormal(f32),
    #[error("decode tables are only emitted for 8-bit formats, not {0}")]
    TableUnsupported(Format),
}

/// Named numeric format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Format {
    E4M3,
    E5M2,
    BF16,
    FP32,
    E8M0,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NanConvention {
    /// All-ones exponent with a nonzero mantissa.
    IeeeLike,
    /// Exactly one NaN pattern per sign.
    SinglePattern,
    None,
}

/// Parametric description of a format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FloatFormat {
    pub name: Format,
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
    pub bias: i32,
    pub max_finite: f32,
    pub min_normal: f32,
    pub min_subnormal: f32,
    pub has_infinity: bool,
    pub nan_convention: NanConvention,
}

impl FloatFormat {
    pub const E4M3: FloatFormat = FloatFormat {
        name: Format::E4M3,
        exponent_bits: 4,
        mantissa_bits: 3,
        bias: 7,
        max_finite: 448.0,
        min_normal: 0.015625,
        min_subnormal: 0.001953125,
        has_infinity: false,
        nan_convention: NanConvention::SinglePattern,
    };

    pub const E5M2: FloatFormat = FloatFormat {
        name: Format::E5M2,
        exponent_bits: 5,
        mantissa_bits: 2,
        bias: 15,
        max_finite: 57344.0,
        min_normal: 6.103515625e-5,
        min_subnormal: 1.52587890625e-5,
        has_infinity: true,
        nan_convention: NanConvention::IeeeLike,
    };

    pub const BF16: FloatFormat = FloatFormat {
        name: Format::BF16,
        exponent_bits: 8,
        mantissa_bits: 7,
        bias: 127,
        // 0x7F7F
        max_finite: 3.389_531_4e38,
        min_normal: f32::MIN_POSITIVE,
        // 2^-133
        min_subnormal: 9.183_549_6e-41,
        has_infinity: true,
        nan_convention: NanConvention::IeeeLike,
    };

    pub const FP32: FloatFormat = FloatFormat {
        name: Format::FP32,
        exponent_bits: 8,
        mantissa_bits: 23,
        bias: 127,
        max_finite: f32::MAX,
        min_normal: f32::MIN_POSITIVE,
        // 2^-149
        min_subnormal: 1.401_298_5e-45,
        has_infinity: true,
        nan_convention: NanConvention::IeeeLike,
    };

    pub const E8M0: FloatFormat = FloatFormat {
        name: Format::E8M0,
        exponent_bits: 8,
        mantissa_bits: 0,
        bias: 127,
        // 2^127
        max_finite: 1.701_411_8e38,
        // 2^-127
        min_normal: 5.877_472e-39,
        min_subnormal: 5.877_472e-39,
        has_infinity: false,
        nan_convention: NanConvention::SinglePattern,
    };

    /// Total bit width.
    pub fn width(&self) -> u32 {
        let sign = if self.name == Format::E8M0 { 0 } else { 1 };
        sign + self.exponent_bits + self.mantissa_bits
    }

    fn exponent_mask(&self) -> u32 {
        (1 << self.exponent_bits) - 1
    }

    fn mantissa_mask(&self) -> u32 {
        (1 << self.mantissa_bits) - 1
    }

    fn sign_bit(&self) -> u32 {
        1 << (self.width() - 1)
    }

    /// Code of the largest finite positive value.
    pub fn max_code(&self) -> u32 {
        match self.name {
            Format::E4M3 => 0x7E,
            Format::E8M0 => 0xFE,
            _ => ((self.exponent_mask() - 1) << self.mantissa_bits) | self.mantissa_mask(),
        }
    }

    /// Canonical positive NaN code.
    pub fn nan_code(&self) -> u32 {
        match self.name {
            Format::E4M3 => 0x7F,
            Format::E8M0 => 0xFF,
            // quiet NaN: top mantissa bit set
            _ => (self.exponent_mask() << self.mantissa_bits) | (1 << (self.mantissa_bits - 1)),
        }
    }

    /// Positive infinity code, when the format has one.
    pub fn inf_code(&self) -> Option<u32> {
        self.has_infinity
            .then(|| self.exponent_mask() << self.mantissa_bits)
    }
}

impl Format {
    pub const ALL: [Format; 5] = [
        Format::E4M3,
        Format::E5M2,
        Format::BF16,
        Format::FP32,
        Format::E8M0,
    ];

    pub fn info(self) -> &'static FloatFormat {
        match self {
            Format::E4M3 => &FloatFormat::E4M3,
            Format::E5M2 => &FloatFormat::E5M2,
            Format::BF16 => &FloatFormat::BF16,
            Format::FP32 => &FloatFormat::FP32,
            Format::E8M0 => &FloatFormat::E8M0,
        }
    }

    pub fn max_finite(self) -> f32 {
        self.info().max_finite
    }
}

impl std::fmt::Display for Format {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Format::E4M3 => "E4M3",
            Format::E5M2 => "E5M2",
            Format::BF16 => "BF16",
            Format::FP32 => "FP32",
            Format::E8M0 => "E8M0",
        };
        f.write_str(s)
    }
}

/// `2^exp` as an f64, for `exp` in the normal f64 range.
fn pow2(exp: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&exp));
    f64::from_bits(((exp + 1023) as u64) << 52)
}

/// Encode `value` into `fmt`.
///
/// # Panics
///
/// Panics when `fmt` is E8M0 and `value` is not a positive power of two; use
/// [`try_encode`] to handle that case.
pub fn encode(value: f32, fmt: Format) -> u32 {
    match try_encode(value, fmt) {
        Ok(code) => code,
        Err(e) => panic!("{e}"),
    }
}

pub fn try_encode(value: f32, fmt: Format) -> Result<u32, FormatError> {
    match fmt {
        Format::FP32 => Ok(value.to_bits()),
        Format::E8M0 => encode_e8m0(value),
        _ => Ok(encode_minifloat(value, fmt.info())),
    }
}

fn encode_e8m0(value: f32) -> Result<u32, FormatError> {
    if value.is_nan() {
        return Ok(FloatFormat::E8M0.nan_code());
    }
    if !(value > 0.0) || value.is_infinite() {
        return Err(FormatError::NotPowerOfTwo(value));
    }
    let bits = value.to_bits();
    let exp_field = bits >> 23;
    let mant = bits & 0x7F_FFFF;
    match (exp_field, mant) {
        (1..=254, 0) => Ok(exp_field),
        // 2^-127 is the only FP32 subnormal with an E8M0 code
        (0, 0x40_0000) => Ok(0),
        _ => Err(FormatError::NotPowerOfTwo(value)),
    }
}

fn encode_minifloat(value: f32, f: &FloatFormat) -> u32 {
    let sign = if value.is_sign_negative() { f.sign_bit() } else { 0 };
    if value.is_nan() {
        return sign | f.nan_code();
    }
    let a = value.abs();
    if a.is_infinite() {
        return sign | f.inf_code().unwrap_or_else(|| f.max_code());
    }
    if a == 0.0 {
        return sign;
    }
    let a = a as f64;
    if a >= f.max_finite as f64 {
        return sign | f.max_code();
    }

    let m = f.mantissa_bits as i32;
    let emin = 1 - f.bias;
    let mut e = (((a.to_bits() >> 52) & 0x7FF) as i32 - 1023).max(emin);
    // a / 2^(e-m) is exact; the quotient lies in [0, 2^(m+1))
    let mut q = (a / pow2(e - m)).round_ties_even() as u32;
    if q == 0 {
        return sign;
    }
    if q == 1 << (m + 1) {
        e += 1;
        q = 1 << m;
    }
    let body = if q < (1 << m) {
        q
    } else {
        (((e + f.bias) as u32) << m) | (q - (1 << m))
    };
    sign | body
}

/// Decode a code of `fmt` to its exact FP32 value.
pub fn decode(code: u32, fmt: Format) -> f32 {
    match fmt {
        Format::FP32 => f32::from_bits(code),
        Format::E8M0 => decode_e8m0(code),
        _ => decode_minifloat(code, fmt.info()),
    }
}

fn decode_e8m0(code: u32) -> f32 {
    match code & 0xFF {
        0xFF => f32::NAN,
        0 => f32::from_bits(0x40_0000),
        c => f32::from_bits(c << 23),
    }
}

fn decode_minifloat(code: u32, f: &FloatFormat) -> f32 {
    let m = f.mantissa_bits;
    let negative = code & f.sign_bit() != 0;
    let exp_field = (code >> m) & f.exponent_mask();
    let mant = code & f.mantissa_mask();

    let magnitude = match f.nan_convention {
        NanConvention::SinglePattern if exp_field == f.exponent_mask() && mant == f.mantissa_mask() => {
            f64::NAN
        }
        NanConvention::IeeeLike if exp_field == f.exponent_mask() => {
            if mant == 0 {
                f64::INFINITY
            } else {
                f64::NAN
            }
        }
        _ if exp_field == 0 => mant as f64 * pow2(1 - f.bias - m as i32),
        _ => ((1 << m) + mant) as f64 * pow2(exp_field as i32 - f.bias - m as i32),
    };
    let v = magnitude as f32;
    if negative {
        -v
    } else {
        v
    }
}

/// Round `value` onto the representable set of `fmt` (encode then decode).
pub fn round_to(value: f32, fmt: Format) -> f32 {
    decode(encode(value, fmt), fmt)
}

/// Raw binary32 fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fp32Fields {
    pub sign: u8,
    pub exponent_field: u8,
    pub mantissa_field: u32,
}

impl Fp32Fields {
    /// The exponent part `2^(exponent_field - 127)` as an E8M0 code.
    pub fn exponent_code(&self) -> u8 {
        self.exponent_field
    }
}

/// Split a normal FP32 number into its fields.
pub fn decompose_fp32(x: f32) -> Result<Fp32Fields, FormatError> {
    if !x.is_normal() {
        return Err(FormatError::NotNormal(x));
    }
    let bits = x.to_bits();
    Ok(Fp32Fields {
        sign: (bits >> 31) as u8,
        exponent_field: ((bits >> 23) & 0xFF) as u8,
        mantissa_field: bits & 0x7F_FFFF,
    })
}

pub fn compose_fp32(f: Fp32Fields) -> f32 {
    f32::from_bits(
        ((f.sign as u32 & 1) << 31) | ((f.exponent_field as u32) << 23) | (f.mantissa_field & 0x7F_FFFF),
    )
}

/// The 23-bit mantissa field of a normal FP32 number.
pub fn mantissa_field(x: f32) -> u32 {
    x.to_bits() & 0x7F_FFFF
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueClass {
    Normal,
    Subnormal,
    Zero,
    Nan,
    Inf,
}

/// One row of an exported decode table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub code: String,
    pub value: String,
    pub class: ValueClass,
}

pub fn classify(code: u32, fmt: Format) -> ValueClass {
    let v = decode(code, fmt);
    if v.is_nan() {
        ValueClass::Nan
    } else if v.is_infinite() {
        ValueClass::Inf
    } else if v == 0.0 {
        ValueClass::Zero
    } else if v.abs() < fmt.info().min_normal {
        ValueClass::Subnormal
    } else {
        ValueClass::Normal
    }
}

/// Every code of an 8-bit format with its exact decimal value.
pub fn decode_table(fmt: Format) -> Result<Vec<TableEntry>, FormatError> {
    if !matches!(fmt, Format::E4M3 | Format::E5M2) {
        return Err(FormatError::TableUnsupported(fmt));
    }
    Ok((0u32..256)
        .map(|code| {
            let v = decode(code, fmt);
            // f64 Display is exact for these short dyadic fractions
            let value = if v.is_nan() {
                "nan".to_string()
            } else if v.is_infinite() {
                if v > 0.0 { "inf" } else { "-inf" }.to_string()
            } else if v == 0.0 && v.is_sign_negative() {
                "-0".to_string()
            } else {
                format!("{}", v as f64)
            };
            TableEntry {
                code: format!("0x{code:02x}"),
                value,
                class: classify(code, fmt),
            }
        })
        .collect())
}
