//! Emulation toolkit for mixture-of-representations FP8 quantization.
//!
//! - [`formats`]: bit-exact E4M3 / E5M2 / BF16 / E8M0 codecs.
//! - [`tensor`]: 2-D tensors, partitions into scaling blocks, MORT dumps.
//! - [`gam`]: GAM, FP32-amax and E8M0 scaling factors.
//! - [`mor`]: per-tensor and per-block format selection.
//! - [`fakequant`] and [`gemm`]: fake quantization and blockwise GEMM emulation.
//! - [`stats`]: relative-error histograms, fallback counters, heatmaps.
//! - [`harness`]: synthetic tensor streams, replay, and a toy MLP trainer.

pub mod fakequant;
pub mod formats;
pub mod gam;
pub mod gemm;
pub mod harness;
pub mod mor;
pub mod stats;
pub mod tensor;

pub use fakequant::{fake_quantize, FakeQuantized};
pub use formats::{decode, encode, Format};
pub use gam::{GamScale, ScalingStrategy};
pub use gemm::{block_gemm, reference_gemm, PrecisionCost};
pub use mor::{mor_quantize, QuantizedTensor, Recipe, RepType};
pub use stats::{StatsState, TensorKey};
pub use tensor::{PartitionSpec, TensorF32};
