//! Replay a sequence of tensors through MoR, collecting statistics and a
//! decision log.
//!
//! Tensors are quantized in parallel and recorded in step order. Each
//! tensor contributes one histogram entry (the tensor-wide E4M3 mean
//! relative error) and one fallback decision per block.

use rayon::prelude::*;

use super::stream::{generate_range, TensorStreamSpec};
use super::HarnessError;
use crate::gam::ScalingStrategy;
use crate::mor::{mor_quantize, DecisionRecord, Granularity, QuantizedTensor, Recipe};
use crate::stats::{Direction, LinearModule, Pass, Role, StatsState, TensorKey, DEFAULT_RESET_PERIOD};
use crate::tensor::{PartitionSpec, TensorF32};

/// Steps generated and quantized together.
const CHUNK: u64 = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayConfig {
    pub recipe: Recipe,
    pub partition: PartitionSpec,
    pub strategy: ScalingStrategy,
    pub reset_period: u64,
    /// Key under which a synthetic stream is recorded.
    pub key: TensorKey,
}

impl ReplayConfig {
    pub fn new(recipe: Recipe, partition: PartitionSpec, strategy: ScalingStrategy) -> Self {
        Self {
            recipe,
            partition,
            strategy,
            reset_period: DEFAULT_RESET_PERIOD,
            key: TensorKey::new(0, LinearModule::LinearQkv, Role::Input, Direction::RowPartition, Pass::Forward),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReplayOutput {
    pub stats: StatsState,
    pub log: Vec<DecisionRecord>,
}

struct Observation {
    key: TensorKey,
    step: u64,
    q: QuantizedTensor,
}

/// Add one quantized tensor to the statistics.
pub(crate) fn observe(stats: &mut StatsState, key: TensorKey, step: u64, q: &QuantizedTensor) {
    match q.granularity {
        Granularity::TensorLevel => stats.record(key, step, q.global_rel_error, q.blocks[0].tag),
        Granularity::SubTensorLevel => stats.record_decisions(key, step, q.global_rel_error, &q.decisions()),
    }
}

fn record(out: &mut ReplayOutput, obs: Observation) {
    let Observation { key, step, q } = obs;
    observe(&mut out.stats, key, step, &q);
    let mut r = q.record();
    r.tensor_key = Some(key.to_string());
    r.step = Some(step);
    out.log.push(r);
}

fn empty_output(cfg: &ReplayConfig) -> Result<ReplayOutput, HarnessError> {
    cfg.recipe.validate()?;
    Ok(ReplayOutput {
        stats: StatsState::new(cfg.reset_period)?,
        log: Vec::new(),
    })
}

/// Replay a synthetic stream under `cfg.key`.
pub fn run_replay(spec: &TensorStreamSpec, cfg: &ReplayConfig) -> Result<ReplayOutput, HarnessError> {
    spec.validate()?;
    let mut out = empty_output(cfg)?;
    let outliers = spec.outlier_channels();
    let mut start = 0;
    while start < spec.steps {
        let end = (start + CHUNK).min(spec.steps);
        let tensors = generate_range(spec, &outliers, start..end)?;
        let obs = tensors
            .par_iter()
            .enumerate()
            .map(|(i, t)| {
                let q = mor_quantize(t, &cfg.recipe, &cfg.partition, cfg.strategy)?;
                Ok(Observation {
                    key: cfg.key,
                    step: start + i as u64,
                    q,
                })
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        for o in obs {
            record(&mut out, o);
        }
        start = end;
    }
    Ok(out)
}

/// Replay explicitly labelled tensors. Records are taken in the given order.
pub fn run_replay_tensors(items: &[(TensorKey, u64, TensorF32)], cfg: &ReplayConfig) -> Result<ReplayOutput, HarnessError> {
    let mut out = empty_output(cfg)?;
    let obs = items
        .par_iter()
        .map(|(key, step, t)| {
            let q = mor_quantize(t, &cfg.recipe, &cfg.partition, cfg.strategy)?;
            Ok(Observation {
                key: *key,
                step: *step,
                q,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    for o in obs {
        record(&mut out, o);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::stream::generate_stream;
    use crate::mor::RepType;
    use crate::stats::{HeatmapOrdering, KeyFilter};

    #[test]
    fn constant_stream_constant_decision() {
        // with a single step repeated, every record is identical
        let spec = TensorStreamSpec::gaussian(8, 32, 1, 11);
        let t = generate_stream(&spec).unwrap().remove(0);
        let cfg = ReplayConfig::new(Recipe::tensor_level(0.045), PartitionSpec::PerTensor, ScalingStrategy::Gam);
        let items: Vec<_> = (0..20).map(|s| (cfg.key, s, t.clone())).collect();
        let out = run_replay_tensors(&items, &cfg).unwrap();
        assert_eq!(out.log.len(), 20);
        assert!(out.log.windows(2).all(|w| w[0].decision == w[1].decision
            && w[0].global_rel_error == w[1].global_rel_error));
        assert_eq!(out.stats.total_records(), 20);
    }

    #[test]
    fn synthetic_matches_explicit() {
        let mut spec = TensorStreamSpec::gaussian(16, 64, 300, 2);
        spec.outlier_channel_fraction = 0.1;
        spec.outlier_magnitude = 100.0;
        spec.drift = 1.01;
        let mut cfg = ReplayConfig::new(Recipe::three_way(), PartitionSpec::block(8, 32), ScalingStrategy::Gam);
        cfg.reset_period = 100;
        let a = run_replay(&spec, &cfg).unwrap();
        let items: Vec<_> = generate_stream(&spec)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(s, t)| (cfg.key, s as u64, t))
            .collect();
        let b = run_replay_tensors(&items, &cfg).unwrap();
        assert_eq!(a.stats, b.stats);
        assert_eq!(a.log, b.log);
        assert_eq!(a.stats.snapshot_count(&cfg.key), 3);
        let f = a.stats.fallback(&cfg.key).unwrap();
        assert_eq!(f.decisions_total, 300 * 4);
    }

    #[test]
    fn subtensor_records_every_block() {
        let spec = TensorStreamSpec::gaussian(4, 8, 3, 0);
        let cfg = ReplayConfig::new(Recipe::two_way(), PartitionSpec::block(2, 4), ScalingStrategy::Gam);
        let out = run_replay(&spec, &cfg).unwrap();
        assert_eq!(out.stats.fallback(&cfg.key).unwrap().decisions_total, 12);
        assert!(out.log.iter().all(|r| r.decisions.as_ref().unwrap().len() == 4));
        assert!(out.log.iter().flat_map(|r| r.decisions.clone().unwrap()).all(|d| d != RepType::E5M2));
        let h = out.stats.export_heatmap(&HeatmapOrdering::ByTensor);
        assert_eq!(h.rows.len(), 1);
        assert!(out.stats.fallback_percentage(&KeyFilter::all()).is_some());
    }
}
