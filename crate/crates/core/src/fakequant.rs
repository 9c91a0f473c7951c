//! Fake quantization: scale, encode to the decided format, decode and
//! descale, keeping the result in FP32. BF16 blocks round through BF16.

use crate::formats::{decode, encode, Format};
use crate::gam::ScalingStrategy;
use crate::mor::{mor_quantize, quantize_scalar, DecisionRecord, MorError, QuantizedTensor, Recipe};
use crate::tensor::{PartitionSpec, TensorF32};

/// Fake-quantized tensor together with the decisions that produced it.
#[derive(Debug, Clone)]
pub struct FakeQuantized {
    pub output: TensorF32,
    pub quantized: QuantizedTensor,
}

impl FakeQuantized {
    pub fn record(&self) -> DecisionRecord {
        let mut r = self.quantized.record();
        r.tensor_key = self.output.key.map(|k| k.to_string());
        r
    }
}

pub fn fake_quantize(
    t: &TensorF32,
    recipe: &Recipe,
    partition: &PartitionSpec,
    strategy: ScalingStrategy,
) -> Result<FakeQuantized, MorError> {
    let quantized = mor_quantize(t, recipe, partition, strategy)?;
    let mut output = quantized.dequantize();
    output.key = t.key;
    Ok(FakeQuantized { output, quantized })
}

/// Re-apply frozen decisions and scales to a tensor of the same shape.
///
/// # Panics
///
/// Panics if `t` does not have the shape `plan` was built for.
pub fn apply_plan(t: &TensorF32, plan: &QuantizedTensor) -> TensorF32 {
    assert_eq!(t.shape(), (plan.rows, plan.cols), "plan shape mismatch");
    let mut out = t.values().to_vec();
    for b in &plan.blocks {
        for r in b.view.rows.clone() {
            for c in b.view.cols.clone() {
                let i = r * plan.cols + c;
                out[i] = if b.tag.is_fp8() {
                    quantize_scalar(out[i], b.scale, b.tag.format()).1
                } else {
                    decode(encode(out[i], Format::BF16), Format::BF16)
                };
            }
        }
    }
    let mut t2 = TensorF32::new(plan.rows, plan.cols, out).expect("quantized values are finite");
    t2.key = t.key;
    t2
}
