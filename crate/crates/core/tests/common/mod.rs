//! Scalar reference model shared by the integration tests.
//!
//! Nothing here calls into the library's codecs or scale computations.
//! Decoding reads the bit layouts directly, rounding searches a table of
//! every finite code, scales are found by exact search, and BF16 comes from
//! the `half` crate.

#![allow(dead_code)]

use std::ops::Range;

use morq_core::mor::RepType;
use morq_core::tensor::{Axis, PartitionSpec, TensorF32};
use morq_core::ScalingStrategy;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

pub const E4M3_MAX: f32 = 448.0;
pub const E5M2_MAX: f32 = 57344.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fp8 {
    E4M3,
    E5M2,
}

impl Fp8 {
    pub fn max(self) -> f32 {
        match self {
            Fp8::E4M3 => E4M3_MAX,
            Fp8::E5M2 => E5M2_MAX,
        }
    }

    pub fn rep(self) -> RepType {
        match self {
            Fp8::E4M3 => RepType::E4M3,
            Fp8::E5M2 => RepType::E5M2,
        }
    }

    /// Highest finite magnitude code.
    pub fn max_code(self) -> u8 {
        match self {
            Fp8::E4M3 => 0x7E,
            Fp8::E5M2 => 0x7B,
        }
    }
}

/// Value of an 8-bit code from its fields.
pub fn decode_bits(code: u8, f: Fp8) -> f64 {
    let (ebits, mbits, bias) = match f {
        Fp8::E4M3 => (4u32, 3u32, 7i32),
        Fp8::E5M2 => (5, 2, 15),
    };
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let e = ((code >> mbits) as u32) & ((1 << ebits) - 1);
    let m = (code as u32) & ((1 << mbits) - 1);
    let emax = (1 << ebits) - 1;
    match f {
        Fp8::E4M3 if e == emax && m == (1 << mbits) - 1 => return f64::NAN,
        Fp8::E5M2 if e == emax => return if m == 0 { sign * f64::INFINITY } else { f64::NAN },
        _ => {}
    }
    let frac = m as f64 / (1u32 << mbits) as f64;
    if e == 0 {
        sign * frac * 2f64.powi(1 - bias)
    } else {
        sign * (1.0 + frac) * 2f64.powi(e as i32 - bias)
    }
}

/// Nearest code by exhaustive table search, ties to the even code,
/// saturating at the largest finite magnitude.
pub fn round_code(v: f32, f: Fp8) -> u8 {
    let sign = if v.is_sign_negative() { 0x80 } else { 0 };
    let a = v.abs() as f64;
    let mut best = 0u8;
    let mut best_d = f64::INFINITY;
    for c in 0..=f.max_code() {
        let d = (decode_bits(c, f) - a).abs();
        if d < best_d || (d == best_d && c % 2 == 0) {
            best = c;
            best_d = d;
        }
    }
    if a >= f.max() as f64 {
        best = f.max_code();
    }
    best | sign
}

/// Faster equivalent of [`round_code`] through a precomputed table; checked
/// against it in the tests.
pub struct Table {
    f: Fp8,
    vals: Vec<f64>,
}

impl Table {
    pub fn new(f: Fp8) -> Self {
        Self {
            f,
            vals: (0..=f.max_code()).map(|c| decode_bits(c, f)).collect(),
        }
    }

    pub fn round(&self, v: f32) -> u8 {
        let sign = if v.is_sign_negative() { 0x80 } else { 0 };
        let a = v.abs() as f64;
        let top = self.vals.len() - 1;
        if a >= self.vals[top] {
            return top as u8 | sign;
        }
        // first code whose value exceeds a
        let hi = self.vals.partition_point(|&x| x <= a);
        let lo = hi - 1;
        let (dl, dh) = (a - self.vals[lo], self.vals[hi] - a);
        let c = if dl < dh || (dl == dh && lo % 2 == 0) { lo } else { hi };
        c as u8 | sign
    }

    pub fn value(&self, code: u8) -> f32 {
        let v = self.vals[(code & 0x7F) as usize] as f32;
        if code & 0x80 != 0 {
            -v
        } else {
            v
        }
    }

    pub fn fake(&self, x: f32, scale: f32) -> f32 {
        self.value(self.round(x * scale)) / scale
    }

    pub fn format(&self) -> Fp8 {
        self.f
    }
}

pub fn bf16_round(x: f32) -> f32 {
    half::bf16::from_f32(x).to_f32()
}

fn exact_le(s: f32, amax: f32, q: f32) -> bool {
    s as f64 * amax as f64 <= q as f64
}

/// Largest f32 `s` with `s * amax <= q` exactly; 1 for a zero amax.
pub fn ideal(amax: f32, q: f32) -> f32 {
    if amax == 0.0 {
        return 1.0;
    }
    let r = q as f64 / amax as f64;
    if r >= f32::MAX as f64 {
        return f32::MAX;
    }
    let mut s = r as f32;
    while !exact_le(s, amax, q) {
        s = s.next_down();
    }
    while s < f32::MAX && exact_le(s.next_up(), amax, q) {
        s = s.next_up();
    }
    s
}

/// Largest power of two `p` with `p * amax <= q`, as a clamped E8M0 value.
pub fn pow2_scale(amax: f32, q: f32) -> f32 {
    if amax == 0.0 {
        return 1.0;
    }
    let mut e = 127i32;
    while e > -149 && 2f64.powi(e) * amax as f64 > q as f64 {
        e -= 1;
    }
    2f32.powi(e.clamp(-126, 127))
}

/// GAM scales for blocks sharing groups.
pub fn gam_scales(amaxes: &[f32], group_of: &[usize], q: f32) -> Vec<f32> {
    let n_groups = group_of.iter().max().map_or(0, |m| m + 1);
    let mut gmax = vec![0.0f32; n_groups];
    for (&a, &g) in amaxes.iter().zip(group_of) {
        gmax[g] = gmax[g].max(a);
    }
    let mant = |s: f32| s.to_bits() & 0x7F_FFFF;
    let expo = |s: f32| ((s.to_bits() >> 23) as i32).max(1);
    amaxes
        .iter()
        .zip(group_of)
        .map(|(&a, &g)| {
            let mg = mant(ideal(gmax[g], q));
            let e = if a == 0.0 {
                127
            } else {
                let s = ideal(a, q);
                if mg <= mant(s) {
                    expo(s)
                } else {
                    (expo(s) - 1).max(1)
                }
            };
            f32::from_bits(((e as u32) << 23) | mg)
        })
        .collect()
}

pub fn scales(amaxes: &[f32], strategy: ScalingStrategy, q: f32) -> Vec<f32> {
    match strategy {
        ScalingStrategy::Gam => gam_scales(amaxes, &vec![0; amaxes.len()], q),
        ScalingStrategy::Fp32Amax => amaxes.iter().map(|&a| ideal(a, q)).collect(),
        ScalingStrategy::E8m0 => amaxes.iter().map(|&a| pow2_scale(a, q)).collect(),
    }
}

/// Row-major tiles of a partition.
pub fn tiles(rows: usize, cols: usize, p: &PartitionSpec) -> Vec<(Range<usize>, Range<usize>)> {
    let (tr, tc) = match *p {
        PartitionSpec::PerTensor => (rows, cols),
        PartitionSpec::Block { rows, cols } => (rows, cols),
        PartitionSpec::PerChannel(Axis::Row) => (1, cols),
        PartitionSpec::PerChannel(Axis::Column) => (rows, 1),
        PartitionSpec::SubChannel { axis: Axis::Row, len } => (1, len),
        PartitionSpec::SubChannel { axis: Axis::Column, len } => (len, 1),
    };
    let mut out = Vec::new();
    let mut r = 0;
    while r < rows {
        let mut c = 0;
        while c < cols {
            out.push((r..(r + tr).min(rows), c..(c + tc).min(cols)));
            c += tc;
        }
        r += tr;
    }
    out
}

fn block_vals(t: &TensorF32, b: &(Range<usize>, Range<usize>)) -> Vec<f32> {
    let mut v = Vec::with_capacity(b.0.len() * b.1.len());
    for r in b.0.clone() {
        for c in b.1.clone() {
            v.push(t.get(r, c));
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleRecipe {
    Tensor(f64),
    TwoWay,
    ThreeWay,
    Bf16,
}

#[derive(Debug, Clone)]
pub struct OracleOut {
    pub values: Vec<f32>,
    pub tags: Vec<RepType>,
    pub global_rel_error: f64,
    pub block_rel_errors: Vec<f64>,
}

/// `(sum, count)` of `|x - q| / |x|` over a block's nonzero elements.
pub fn err_sum(vals: &[f32], q: impl Fn(f32) -> f32) -> (f64, usize) {
    let mut s = 0.0;
    let mut n = 0;
    for &x in vals {
        if x != 0.0 {
            s += ((x as f64 - q(x) as f64) / x as f64).abs();
            n += 1;
        }
    }
    (s, n)
}

pub fn oracle_quantize(t: &TensorF32, recipe: OracleRecipe, p: &PartitionSpec, strategy: ScalingStrategy, e4: &Table, e5: &Table) -> OracleOut {
    let bl = tiles(t.rows(), t.cols(), p);
    let vals: Vec<Vec<f32>> = bl.iter().map(|b| block_vals(t, b)).collect();
    let amax: Vec<f32> = vals.iter().map(|v| v.iter().fold(0.0f32, |m, x| m.max(x.abs()))).collect();
    let s4 = scales(&amax, strategy, E4M3_MAX);
    let s5 = scales(&amax, strategy, E5M2_MAX);
    let err4: Vec<(f64, usize)> = vals.iter().zip(&s4).map(|(v, &s)| err_sum(v, |x| e4.fake(x, s))).collect();
    let (mut gs, mut gn) = (0.0, 0);
    for &(s, n) in &err4 {
        gs += s;
        gn += n;
    }
    let global = if gn == 0 { 0.0 } else { gs / gn as f64 };
    let tags: Vec<RepType> = match recipe {
        OracleRecipe::Bf16 => vec![RepType::BF16; bl.len()],
        OracleRecipe::Tensor(th) => vec![if global < th { RepType::E4M3 } else { RepType::BF16 }; bl.len()],
        OracleRecipe::TwoWay | OracleRecipe::ThreeWay => (0..bl.len())
            .map(|i| {
                let e5s = err_sum(&vals[i], |x| e5.fake(x, s5[i])).0;
                if err4[i].0 < e5s {
                    return RepType::E4M3;
                }
                if recipe == OracleRecipe::TwoWay {
                    return RepType::BF16;
                }
                let minabs = vals[i].iter().filter(|x| **x != 0.0).fold(f32::INFINITY, |m, x| m.min(x.abs()));
                if minabs.is_infinite() || (amax[i] as f64) < 57344.0 * 16384.0 * minabs as f64 {
                    RepType::E5M2
                } else {
                    RepType::BF16
                }
            })
            .collect(),
    };
    let mut out = t.values().to_vec();
    for (i, b) in bl.iter().enumerate() {
        for r in b.0.clone() {
            for c in b.1.clone() {
                let x = t.get(r, c);
                out[r * t.cols() + c] = match tags[i] {
                    RepType::E4M3 => e4.fake(x, s4[i]),
                    RepType::E5M2 => e5.fake(x, s5[i]),
                    RepType::BF16 => bf16_round(x),
                };
            }
        }
    }
    OracleOut {
        values: out,
        tags,
        global_rel_error: global,
        block_rel_errors: err4.iter().map(|&(s, n)| if n == 0 { 0.0 } else { s / n as f64 }).collect(),
    }
}

/// Random tensor with a mix of shapes and value distributions: Gaussian at
/// random scales, outlier rows or columns, wide-range lognormal, zeros.
pub fn random_tensor(rng: &mut ChaCha8Rng, max_dim: usize) -> TensorF32 {
    let rows = rng.random_range(1..=max_dim);
    let cols = rng.random_range(1..=max_dim);
    let scale = 10f32.powf(rng.random_range(-3.0..3.0));
    let kind = rng.random_range(0..10);
    let normal = Normal::new(0.0f32, scale).unwrap();
    let wide = LogNormal::new(0.0f32, rng.random_range(1.0..6.0)).unwrap();
    let out_rows = rng.random_bool(0.5);
    let gain = 10f32.powf(rng.random_range(1.0..4.0));
    let p_out = rng.random_range(0.0..0.1);
    let mut vals = Vec::with_capacity(rows * cols);
    let outlier: Vec<bool> = (0..rows.max(cols)).map(|_| rng.random_bool(p_out)).collect();
    for r in 0..rows {
        for c in 0..cols {
            let v = match kind {
                0..=4 => normal.sample(rng),
                5 | 6 => {
                    let g = if outlier[if out_rows { r } else { c }] { gain } else { 1.0 };
                    normal.sample(rng) * g
                }
                7 | 8 => {
                    let s = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
                    s * scale * wide.sample(rng)
                }
                _ => {
                    if rng.random_bool(0.3) {
                        0.0
                    } else {
                        normal.sample(rng)
                    }
                }
            };
            vals.push(if v.is_finite() { v } else { 0.0 });
        }
    }
    TensorF32::new(rows, cols, vals).unwrap()
}

/// Every partition kind, with block and run sizes drawn so edges are ragged.
pub fn all_partitions(rng: &mut ChaCha8Rng) -> Vec<PartitionSpec> {
    vec![
        PartitionSpec::PerTensor,
        PartitionSpec::DEFAULT,
        PartitionSpec::block(rng.random_range(1..=40), rng.random_range(1..=40)),
        PartitionSpec::PerChannel(Axis::Row),
        PartitionSpec::PerChannel(Axis::Column),
        PartitionSpec::SubChannel {
            axis: Axis::Row,
            len: rng.random_range(1..=48),
        },
        PartitionSpec::SubChannel {
            axis: Axis::Column,
            len: rng.random_range(1..=48),
        },
    ]
}
