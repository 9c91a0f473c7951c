//! Scaling factors: Group Amax Mantissa (GAM) scaling and the two per-block
//! alternatives it is compared against, full FP32 amax scaling and
//! power-of-two (E8M0) scaling.
//!
//! GAM splits each scale into a 23-bit mantissa shared by every block of a
//! group and an 8-bit biased exponent per block. The group mantissa comes from
//! the scale that maps the group amax onto the target format's max. Each block
//! takes the exponent of its own ideal scale, one step lower whenever the
//! shared mantissa is larger than the block's own mantissa, so a reconstructed
//! scale never exceeds the block's ideal scale.
//!
//! Ideal scales are `q_amax / amax` in FP32, rounded toward zero: a plain
//! round-to-nearest quotient can land one ulp above the exact ratio, and
//! `scale * amax` would then exceed `q_amax`.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{compose_fp32, Fp32Fields};
use crate::tensor::{block_amax, BlockView, TensorF32};

/// Smallest and largest E8M0 codes used for block scales; both compose a
/// normal FP32 number.
pub const E8M0_MIN_CODE: u8 = 1;
pub const E8M0_MAX_CODE: u8 = 254;
/// E8M0 code of 2^0.
pub const E8M0_ONE: u8 = 127;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GamError {
    #[error("q_amax must be positive and finite, got {0}")]
    BadQAmax(f32),
    #[error("group map covers {map} blocks but the partition has {blocks}")]
    GroupMapMismatch { map: usize, blocks: usize },
    #[error("group ids must be dense in 0..{0}")]
    SparseGroups(usize),
    #[error("unknown scaling strategy `{0}`")]
    UnknownStrategy(String),
}

/// Block-to-group assignment. Group ids are dense, `0..n_groups`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMap {
    group_of_block: Vec<usize>,
    n_groups: usize,
}

impl GroupMap {
    /// One group spanning every block.
    pub fn single(n_blocks: usize) -> Self {
        Self {
            group_of_block: vec![0; n_blocks],
            n_groups: usize::from(n_blocks > 0),
        }
    }

    /// Every block is its own group.
    pub fn per_block(n_blocks: usize) -> Self {
        Self {
            group_of_block: (0..n_blocks).collect(),
            n_groups: n_blocks,
        }
    }

    pub fn from_assignment(group_of_block: Vec<usize>) -> Result<Self, GamError> {
        let n_groups = group_of_block.iter().max().map_or(0, |m| m + 1);
        let mut used = vec![false; n_groups];
        for &g in &group_of_block {
            used[g] = true;
        }
        if used.iter().any(|u| !u) {
            return Err(GamError::SparseGroups(n_groups));
        }
        Ok(Self {
            group_of_block,
            n_groups,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn n_blocks(&self) -> usize {
        self.group_of_block.len()
    }

    pub fn group_of(&self, block: usize) -> usize {
        self.group_of_block[block]
    }
}

/// Largest FP32 value not above `q_amax / amax`; 1.0 when `amax` is zero.
///
/// Ratios beyond the FP32 range clamp to `f32::MAX`.
pub fn ideal_scale(amax: f32, q_amax: f32) -> f32 {
    if amax == 0.0 {
        return 1.0;
    }
    let s = q_amax / amax;
    if s.is_infinite() {
        return f32::MAX;
    }
    // both factors have 24-bit significands, so the f64 product is exact
    if s as f64 * amax as f64 > q_amax as f64 {
        s.next_down()
    } else {
        s
    }
}

/// Per-block FP32 amax scale.
pub fn fp32_amax_scale(b_amax: f32, q_amax: f32) -> f32 {
    ideal_scale(b_amax, q_amax)
}

/// E8M0 code of the largest power of two not above `q_amax / b_amax`,
/// clamped to `E8M0_MIN_CODE..=E8M0_MAX_CODE`.
pub fn e8m0_scale(b_amax: f32, q_amax: f32) -> u8 {
    if b_amax == 0.0 {
        return E8M0_ONE;
    }
    let s = ideal_scale(b_amax, q_amax);
    let exp_field = (s.to_bits() >> 23) as u8;
    exp_field.clamp(E8M0_MIN_CODE, E8M0_MAX_CODE)
}

pub fn e8m0_value(code: u8) -> f32 {
    f32::from_bits((code as u32) << 23)
}

/// Output of GAM: group mantissas, per-block E8M0 exponents and the grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct GamScale {
    pub group_mantissas: Vec<u32>,
    pub block_exponents: Vec<u8>,
    pub groups: GroupMap,
    pub q_amax: f32,
    /// Blocks whose exponent had to be clamped into the normal range.
    pub clamped_blocks: Vec<usize>,
}

impl GamScale {
    pub fn n_blocks(&self) -> usize {
        self.block_exponents.len()
    }

    /// Reconstructed FP32 scale of one block.
    pub fn reconstruct(&self, block_id: usize) -> f32 {
        let exponent_field = self.block_exponents[block_id];
        debug_assert!((E8M0_MIN_CODE..=E8M0_MAX_CODE).contains(&exponent_field));
        compose_fp32(Fp32Fields {
            sign: 0,
            exponent_field,
            mantissa_field: self.group_mantissas[self.groups.group_of(block_id)],
        })
    }

    /// 23 bits per group plus 8 bits per block.
    pub fn storage_bits(&self) -> usize {
        23 * self.groups.n_groups() + 8 * self.n_blocks()
    }
}

pub fn gam_reconstruct(s: &GamScale, block_id: usize) -> f32 {
    s.reconstruct(block_id)
}

#[derive(Serialize, Deserialize)]
struct GamScaleJson {
    group_mantissas: Vec<String>,
    block_exponents: Vec<u8>,
    group_of_block: Vec<usize>,
    q_amax: f32,
}

impl Serialize for GamScale {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        GamScaleJson {
            group_mantissas: self.group_mantissas.iter().map(|m| format!("0x{m:06x}")).collect(),
            block_exponents: self.block_exponents.clone(),
            group_of_block: self.groups.group_of_block.clone(),
            q_amax: self.q_amax,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GamScale {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let j = GamScaleJson::deserialize(d)?;
        let group_mantissas = j
            .group_mantissas
            .iter()
            .map(|h| u32::from_str_radix(h.trim_start_matches("0x"), 16).map_err(D::Error::custom))
            .collect::<Result<_, _>>()?;
        Ok(GamScale {
            group_mantissas,
            block_exponents: j.block_exponents,
            groups: GroupMap::from_assignment(j.group_of_block).map_err(D::Error::custom)?,
            q_amax: j.q_amax,
            clamped_blocks: Vec::new(),
        })
    }
}

/// Split a scale into (mantissa field, exponent field), clamping the exponent
/// to the normal range. The flag reports a clamp.
fn split_scale(s: f32) -> (u32, u8, bool) {
    let bits = s.to_bits();
    let mantissa = bits & 0x7F_FFFF;
    let exp = (bits >> 23) as u8;
    if exp < E8M0_MIN_CODE {
        (mantissa, E8M0_MIN_CODE, true)
    } else {
        (mantissa, exp, false)
    }
}

fn check_q_amax(q_amax: f32) -> Result<(), GamError> {
    if q_amax > 0.0 && q_amax.is_finite() {
        Ok(())
    } else {
        Err(GamError::BadQAmax(q_amax))
    }
}

/// Group Amax Mantissa scaling over a partition with a group assignment.
pub fn gam_compute(
    t: &TensorF32,
    blocks: &[BlockView],
    groups: &GroupMap,
    q_amax: f32,
) -> Result<GamScale, GamError> {
    let amaxes: Vec<f32> = blocks.par_iter().map(|b| block_amax(t, b)).collect();
    gam_from_amaxes(&amaxes, groups, q_amax)
}

/// GAM given precomputed block amaxes.
pub fn gam_from_amaxes(amaxes: &[f32], groups: &GroupMap, q_amax: f32) -> Result<GamScale, GamError> {
    check_q_amax(q_amax)?;
    if groups.n_blocks() != amaxes.len() {
        return Err(GamError::GroupMapMismatch {
            map: groups.n_blocks(),
            blocks: amaxes.len(),
        });
    }
    let mut group_amax = vec![0.0f32; groups.n_groups()];
    for (b, &a) in amaxes.iter().enumerate() {
        let g = groups.group_of(b);
        group_amax[g] = group_amax[g].max(a);
    }
    let group_mantissas: Vec<u32> = group_amax
        .iter()
        .map(|&ga| split_scale(ideal_scale(ga, q_amax)).0)
        .collect();

    let mut clamped_blocks = Vec::new();
    let block_exponents = amaxes
        .iter()
        .enumerate()
        .map(|(b, &ba)| {
            if ba == 0.0 {
                return E8M0_ONE;
            }
            let (m_b, e_b, clamped) = split_scale(ideal_scale(ba, q_amax));
            let m_g = group_mantissas[groups.group_of(b)];
            let exp = if m_g <= m_b {
                e_b
            } else if e_b > E8M0_MIN_CODE {
                e_b - 1
            } else {
                clamped_blocks.push(b);
                return E8M0_MIN_CODE;
            };
            if clamped {
                clamped_blocks.push(b);
            }
            exp
        })
        .collect();

    Ok(GamScale {
        group_mantissas,
        block_exponents,
        groups: groups.clone(),
        q_amax,
        clamped_blocks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingStrategy {
    #[default]
    Gam,
    #[serde(rename = "amax")]
    Fp32Amax,
    E8m0,
}

impl ScalingStrategy {
    pub const ALL: [ScalingStrategy; 3] = [ScalingStrategy::Gam, ScalingStrategy::Fp32Amax, ScalingStrategy::E8m0];
}

impl std::fmt::Display for ScalingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScalingStrategy::Gam => "gam",
            ScalingStrategy::Fp32Amax => "amax",
            ScalingStrategy::E8m0 => "e8m0",
        })
    }
}

impl FromStr for ScalingStrategy {
    type Err = GamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gam" => Ok(ScalingStrategy::Gam),
            "amax" | "fp32" => Ok(ScalingStrategy::Fp32Amax),
            "e8m0" => Ok(ScalingStrategy::E8m0),
            other => Err(GamError::UnknownStrategy(other.to_string())),
        }
    }
}

/// Strategy-specific scale metadata.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", content = "data", rename_all = "lowercase")]
pub enum ScaleMeta {
    Gam(GamScale),
    Fp32(Vec<f32>),
    E8m0(Vec<u8>),
}

/// Effective per-block scales for one target format.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScales {
    pub q_amax: f32,
    pub scales: Vec<f32>,
    pub meta: ScaleMeta,
}

impl BlockScales {
    pub fn storage_bits(&self) -> usize {
        match &self.meta {
            ScaleMeta::Gam(g) => g.storage_bits(),
            ScaleMeta::Fp32(v) => 32 * v.len(),
            ScaleMeta::E8m0(v) => 8 * v.len(),
        }
    }
}

/// Scales for precomputed block amaxes. GAM uses a single group unless a map
/// is given.
pub fn scales_from_amaxes(
    amaxes: &[f32],
    strategy: ScalingStrategy,
    q_amax: f32,
    groups: Option<&GroupMap>,
) -> Result<BlockScales, GamError> {
    check_q_amax(q_amax)?;
    Ok(match strategy {
        ScalingStrategy::Gam => {
            let single;
            let groups = match groups {
                Some(g) => g,
                None => {
                    single = GroupMap::single(amaxes.len());
                    &single
                }
            };
            let gam = gam_from_amaxes(amaxes, groups, q_amax)?;
            BlockScales {
                q_amax,
                scales: (0..amaxes.len()).map(|b| gam.reconstruct(b)).collect(),
                meta: ScaleMeta::Gam(gam),
            }
        }
        ScalingStrategy::Fp32Amax => {
            let scales: Vec<f32> = amaxes.iter().map(|&a| fp32_amax_scale(a, q_amax)).collect();
            BlockScales {
                q_amax,
                scales: scales.clone(),
                meta: ScaleMeta::Fp32(scales),
            }
        }
        ScalingStrategy::E8m0 => {
            let codes: Vec<u8> = amaxes.iter().map(|&a| e8m0_scale(a, q_amax)).collect();
            BlockScales {
                q_amax,
                scales: codes.iter().map(|&c| e8m0_value(c)).collect(),
                meta: ScaleMeta::E8m0(codes),
            }
        }
    })
}

pub fn compute_scales(
    t: &TensorF32,
    blocks: &[BlockView],
    strategy: ScalingStrategy,
    q_amax: f32,
    groups: Option<&GroupMap>,
) -> Result<BlockScales, GamError> {
    let amaxes: Vec<f32> = blocks.par_iter().map(|b| block_amax(t, b)).collect();
    scales_from_amaxes(&amaxes, strategy, q_amax, groups)
}
