//! Blockwise mixed-precision GEMM emulation.
//!
//! The numeric result is the FP32 product of the dequantized operands,
//! accumulated in a fixed order (k ascending). Block tags only drive the
//! precision-class cost: a pair of overlapping operand blocks runs in FP8
//! when both are FP8, otherwise in BF16, and a pair with exactly one FP8
//! side counts as an upcast.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mor::{QuantizedTensor, RepType};
use crate::tensor::{BlockView, TensorF32};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GemmError {
    #[error("inner dimensions differ: {a_rows}x{a_cols} times {b_rows}x{b_cols}")]
    ShapeMismatch {
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("output tile size must be at least 1")]
    ZeroTile,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionCost {
    pub fp8_macs: u64,
    pub bf16_macs: u64,
    pub upcast_blocks: u64,
}

impl PrecisionCost {
    pub fn total_macs(&self) -> u64 {
        self.fp8_macs + self.bf16_macs
    }

    /// Speedup over all-BF16 assuming FP8 runs at twice the BF16 rate.
    pub fn speedup_estimate(&self) -> f64 {
        let t = self.total_macs() as f64;
        if t == 0.0 {
            return 1.0;
        }
        t / (self.bf16_macs as f64 + self.fp8_macs as f64 / 2.0)
    }

    pub fn add(&mut self, other: &PrecisionCost) {
        self.fp8_macs += other.fp8_macs;
        self.bf16_macs += other.bf16_macs;
        self.upcast_blocks += other.upcast_blocks;
    }
}

fn check_shapes(a: (usize, usize), b: (usize, usize)) -> Result<(), GemmError> {
    if a.1 != b.0 {
        return Err(GemmError::ShapeMismatch {
            a_rows: a.0,
            a_cols: a.1,
            b_rows: b.0,
            b_cols: b.1,
        });
    }
    Ok(())
}

/// Naive triple loop, FP32 multiply-accumulate with k ascending.
pub fn reference_gemm(a: &TensorF32, b: &TensorF32) -> Result<TensorF32, GemmError> {
    check_shapes(a.shape(), b.shape())?;
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += a.get(i, p) * b.get(p, j);
            }
            out[i * n + j] = acc;
        }
    }
    Ok(TensorF32::new(m, n, out).expect("finite operands"))
}

/// MAC counts for `A (m x k) * B (k x n)` given each operand's tagged blocks.
/// A's column ranges and B's row ranges live on the contraction axis.
pub fn precision_cost(a_blocks: &[(BlockView, RepType)], b_blocks: &[(BlockView, RepType)]) -> PrecisionCost {
    let mut cost = PrecisionCost::default();
    for (av, at) in a_blocks {
        for (bv, bt) in b_blocks {
            let lo = av.cols.start.max(bv.rows.start);
            let hi = av.cols.end.min(bv.rows.end);
            if lo >= hi {
                continue;
            }
            let macs = (av.rows.len() * bv.cols.len() * (hi - lo)) as u64;
            match (at.is_fp8(), bt.is_fp8()) {
                (true, true) => cost.fp8_macs += macs,
                (false, false) => cost.bf16_macs += macs,
                _ => {
                    cost.bf16_macs += macs;
                    cost.upcast_blocks += 1;
                }
            }
        }
    }
    cost
}

fn tagged_blocks(q: &QuantizedTensor) -> Vec<(BlockView, RepType)> {
    q.blocks.iter().map(|b| (b.view.clone(), b.tag)).collect()
}

/// Emulated GEMM of two quantized operands, computed in `tile x tile`
/// output tiles.
pub fn block_gemm(aq: &QuantizedTensor, bq: &QuantizedTensor, tile: usize) -> Result<(TensorF32, PrecisionCost), GemmError> {
    check_shapes((aq.rows, aq.cols), (bq.rows, bq.cols))?;
    if tile == 0 {
        return Err(GemmError::ZeroTile);
    }
    let cost = precision_cost(&tagged_blocks(aq), &tagged_blocks(bq));

    let a = aq.dequantize();
    let bt = bq.dequantize().transpose();
    let (m, k, n) = (aq.rows, aq.cols, bq.cols);
    let (av, bv) = (a.values(), bt.values());

    let tiles: Vec<(usize, usize)> = (0..m)
        .step_by(tile)
        .flat_map(|i0| (0..n).step_by(tile).map(move |j0| (i0, j0)))
        .collect();
    let computed: Vec<Vec<f32>> = tiles
        .par_iter()
        .map(|&(i0, j0)| {
            let (i1, j1) = ((i0 + tile).min(m), (j0 + tile).min(n));
            let mut acc = Vec::with_capacity((i1 - i0) * (j1 - j0));
            for i in i0..i1 {
                let arow = &av[i * k..(i + 1) * k];
                for j in j0..j1 {
                    let bcol = &bv[j * k..(j + 1) * k];
                    let mut s = 0.0f32;
                    for p in 0..k {
                        s += arow[p] * bcol[p];
                    }
                    acc.push(s);
                }
            }
            acc
        })
        .collect();

    let mut out = vec![0.0f32; m * n];
    for (&(i0, j0), vals) in tiles.iter().zip(&computed) {
        let w = (j0 + tile).min(n) - j0;
        for (r, chunk) in vals.chunks(w).enumerate() {
            out[(i0 + r) * n + j0..(i0 + r) * n + j0 + w].copy_from_slice(chunk);
        }
    }
    Ok((TensorF32::new(m, n, out).expect("finite operands"), cost))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gam::ScalingStrategy;
    use crate::mor::{mor_quantize, Recipe};
    use crate::tensor::PartitionSpec;

    fn t(rows: usize, cols: usize, v: &[f32]) -> TensorF32 {
        TensorF32::new(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn reference_small_cases() {
        let a = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(reference_gemm(&a, &b).unwrap().values(), &[19.0, 22.0, 43.0, 50.0]);
        let eye = t(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(reference_gemm(&eye, &a).unwrap(), a);
        let z = TensorF32::zeros(3, 2);
        assert!(reference_gemm(&z, &a).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(matches!(reference_gemm(&a, &z), Err(GemmError::ShapeMismatch { .. })));
    }

    #[test]
    fn tag_mixtures() {
        let a = TensorF32::from_fn(8, 12, |r, c| (r as f32 - c as f32) * 0.25).unwrap();
        let b = TensorF32::from_fn(12, 6, |r, c| (r * c) as f32 * 0.125 - 1.0).unwrap();
        let p = PartitionSpec::block(4, 4);
        let e4 = |x: &TensorF32| mor_quantize(x, &Recipe::tensor_level(1.0), &p, ScalingStrategy::Gam).unwrap();
        let bf = |x: &TensorF32| mor_quantize(x, &Recipe::bf16_only(), &p, ScalingStrategy::Gam).unwrap();

        let (_, c) = block_gemm(&e4(&a), &e4(&b), 3).unwrap();
        assert_eq!((c.upcast_blocks, c.bf16_macs, c.fp8_macs), (0, 0, 8 * 12 * 6));
        let (out, c) = block_gemm(&bf(&a), &e4(&b), 3).unwrap();
        assert_eq!(c.fp8_macs, 0);
        // 2x3 A blocks, 3x2 B blocks, each A block meets the 2 B blocks sharing its k range
        assert_eq!(c.upcast_blocks, 6 * 2);
        assert_eq!(c.total_macs(), 8 * 12 * 6);
        let reference = reference_gemm(&bf(&a).dequantize(), &e4(&b).dequantize()).unwrap();
        assert_eq!(out, reference);
    }

    #[test]
    fn speedup() {
        let c = PrecisionCost {
            fp8_macs: 100,
            bf16_macs: 0,
            upcast_blocks: 0,
        };
        assert_eq!(c.speedup_estimate(), 2.0);
        let c = PrecisionCost {
            fp8_macs: 50,
            bf16_macs: 50,
            upcast_blocks: 3,
        };
        assert!((c.speedup_estimate() - 100.0 / 75.0).abs() < 1e-12);
    }

    #[test]
    fn zero_tile_rejected() {
        let a = TensorF32::zeros(2, 2);
        let q = mor_quantize(&a, &Recipe::two_way(), &PartitionSpec::PerTensor, ScalingStrategy::Gam).unwrap();
        assert_eq!(block_gemm(&q, &q, 0).unwrap_err(), GemmError::ZeroTile);
    }
}
