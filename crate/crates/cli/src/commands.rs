//! Subcommand implementations.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use morq_core::fakequant::fake_quantize;
use morq_core::formats::decode_table;
use morq_core::gemm::{block_gemm, precision_cost, reference_gemm, PrecisionCost};
use morq_core::harness::{
    self, generate_step, run_replay, run_replay_tensors, HarnessError, ReplayConfig, TensorStreamSpec, ToyModelConfig,
};
use morq_core::mor::{mor_quantize, Granularity, Recipe, RecipeName, RepType};
use morq_core::stats::HeatmapOrdering;
use morq_core::tensor::{partition_shape, Axis, BlockView, TensorError};
use morq_core::{Format, PartitionSpec, ScalingStrategy, TensorF32, TensorKey};
use serde::Serialize;

use crate::output::{ensure_dir, io_err, write_atomic, write_json, CliError};
use crate::QuantArgs;

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config { .. } | HarnessError::Tensor(_) => CliError::Format(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

fn recipe(q: &QuantArgs) -> Result<Recipe, CliError> {
    let r = q.recipe.build(q.threshold);
    r.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(r)
}

fn read_mort(path: &Path) -> Result<TensorF32, CliError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    TensorF32::read_mort(BufReader::new(f)).map_err(|e| match e {
        TensorError::Io(e) => io_err(path, e),
        e => CliError::Format(format!("{}: {e}", path.display())),
    })
}

pub fn quantize(
    input: &Path,
    output: &Path,
    log: &Path,
    label: Option<&str>,
    step: Option<u64>,
    q: &QuantArgs,
) -> Result<(), CliError> {
    let recipe = recipe(q)?;
    let t = read_mort(input)?;
    let fq = fake_quantize(&t, &recipe, &q.partition, q.strategy).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut record = fq.record();
    record.tensor_key = label.map(str::to_string);
    record.step = step;
    record.per_block_errors = Some(fq.quantized.block_rel_errors.clone());
    let mut line = serde_json::to_string(&record).map_err(|e| CliError::Format(e.to_string()))?;
    line.push('\n');
    write_atomic(output, &fq.output.to_mort_bytes())?;
    write_atomic(log, line.as_bytes())
}

/// `<label>@<step>.mort`
fn parse_dump_name(path: &Path) -> Result<(TensorKey, u64), CliError> {
    let bad = || {
        CliError::Format(format!(
            "{}: expected a file named <label>@<step>.mort",
            path.display()
        ))
    };
    let stem = path.file_stem().and_then(|s| s.to_str()).ok_or_else(bad)?;
    let (label, step) = stem.rsplit_once('@').ok_or_else(bad)?;
    let key = label
        .parse::<TensorKey>()
        .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    let step = step.parse().map_err(|_| bad())?;
    Ok((key, step))
}

fn mort_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mort"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("{}: no .mort files", dir.display())));
    }
    Ok(files)
}

pub fn analyze(
    input_dir: &Path,
    out_dir: &Path,
    reset_period: u64,
    by_step: Option<&str>,
    q: &QuantArgs,
) -> Result<(), CliError> {
    let mut cfg = ReplayConfig::new(recipe(q)?, q.partition, q.strategy);
    cfg.reset_period = reset_period;
    let ordering = match by_step {
        Some(l) => HeatmapOrdering::ByStep(l.parse().map_err(|e| CliError::Usage(format!("--by-step: {e}")))?),
        None => HeatmapOrdering::ByTensor,
    };
    let mut items = Vec::new();
    for p in mort_files(input_dir)? {
        let (key, step) = parse_dump_name(&p)?;
        items.push((key, step, read_mort(&p)?));
    }
    items.sort_by_key(|(k, s, _)| (*k, *s));
    let out = run_replay_tensors(&items, &cfg)?;
    ensure_dir(out_dir)?;
    let heatmap = out.stats.export_heatmap(&ordering);
    write_atomic(&out_dir.join("heatmap.csv"), heatmap.to_csv().as_bytes())?;
    write_json(&out_dir.join("fallback.json"), &out.stats.fallback_report())
}

fn load_stream(path: &Path, seed: Option<u64>) -> Result<TensorStreamSpec, CliError> {
    let mut spec: TensorStreamSpec = harness::load_config(path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    Ok(spec)
}

fn transposed(tags: &[(BlockView, RepType)]) -> Vec<(BlockView, RepType)> {
    tags.iter()
        .map(|(v, t)| {
            (
                BlockView {
                    id: v.id,
                    rows: v.cols.clone(),
                    cols: v.rows.clone(),
                },
                *t,
            )
        })
        .collect()
}

struct SweepRow {
    partition: PartitionSpec,
    strategy: ScalingStrategy,
    fallback_fraction: f64,
    mean_rel_error: f64,
    fp8_element_fraction: f64,
    cost: PrecisionCost,
}

/// One grid cell. Cost is that of the Gram product `X X^T` with both
/// operands carrying the tensor's decisions, summed over steps.
fn sweep_cell(spec: &TensorStreamSpec, recipe: Recipe, partition: PartitionSpec, strategy: ScalingStrategy) -> Result<SweepRow, CliError> {
    let cfg = ReplayConfig::new(recipe, partition, strategy);
    let out = run_replay(spec, &cfg)?;
    let blocks = partition_shape(spec.shape[0], spec.shape[1], &partition);
    let elems = (spec.shape[0] * spec.shape[1]) as f64;
    let mut cost = PrecisionCost::default();
    let mut fp8 = 0.0;
    for r in &out.log {
        let tags: Vec<RepType> = match (&r.decision, &r.decisions) {
            (Some(d), _) => vec![*d; blocks.len()],
            (None, Some(ds)) => ds.clone(),
            (None, None) => unreachable!("every record carries its decisions"),
        };
        let tagged: Vec<(BlockView, RepType)> = blocks.iter().cloned().zip(tags).collect();
        fp8 += tagged.iter().filter(|(_, t)| t.is_fp8()).map(|(v, _)| v.len()).sum::<usize>() as f64 / elems;
        cost.add(&precision_cost(&tagged, &transposed(&tagged)));
    }
    let n = out.log.len().max(1) as f64;
    Ok(SweepRow {
        partition,
        strategy,
        fallback_fraction: out.stats.fallback_report().overall.unwrap_or(0.0),
        mean_rel_error: out.log.iter().map(|r| r.global_rel_error).sum::<f64>() / n,
        fp8_element_fraction: fp8 / n,
        cost,
    })
}

pub fn sweep(
    stream: &Path,
    thresholds: &[f64],
    partitions: &[PartitionSpec],
    strategies: &[ScalingStrategy],
    recipe_name: RecipeName,
    seed: Option<u64>,
    output: &Path,
) -> Result<(), CliError> {
    let spec = load_stream(stream, seed)?;
    let mut csv = String::from(
        "threshold,partition,strategy,fallback_fraction,mean_rel_error,fp8_element_fraction,fp8_macs,bf16_macs,upcast_blocks,speedup_estimate\n",
    );
    for &th in thresholds {
        let recipe = recipe_name.build(th);
        recipe.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        for &p in partitions {
            for &s in strategies {
                let row = sweep_cell(&spec, recipe.clone(), p, s)?;
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    th,
                    row.partition,
                    row.strategy,
                    row.fallback_fraction,
                    row.mean_rel_error,
                    row.fp8_element_fraction,
                    row.cost.fp8_macs,
                    row.cost.bf16_macs,
                    row.cost.upcast_blocks,
                    row.cost.speedup_estimate()
                ));
            }
        }
    }
    write_atomic(output, csv.as_bytes())
}

pub fn train_toy(config: &Path, output: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg: ToyModelConfig = harness::load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let report = harness::train_toy(&cfg)?;
    write_json(output, &report)?;
    match report.diverged_at {
        Some(step) => Err(CliError::Diverged { step }),
        None => Ok(()),
    }
}

pub struct GemmShape {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub tile: usize,
}

#[derive(Debug, Serialize)]
struct GemmSummary {
    m: usize,
    k: usize,
    n: usize,
    recipe: String,
    partition_a: PartitionSpec,
    partition_b: PartitionSpec,
    strategy: ScalingStrategy,
    decisions_a: Vec<RepType>,
    decisions_b: Vec<RepType>,
    fp8_macs: u64,
    bf16_macs: u64,
    upcast_blocks: u64,
    total_macs: u64,
    expected_macs: u64,
    speedup_estimate: f64,
    /// Emulated result equals the plain FP32 GEMM of the dequantized operands.
    bit_exact: bool,
    /// Frobenius error against the FP32 GEMM of the unquantized operands,
    /// relative to that GEMM's norm.
    frobenius_rel_error: f64,
}

fn frobenius_rel(a: &TensorF32, b: &TensorF32) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (x, y) in a.values().iter().zip(b.values()) {
        num += (*x as f64 - *y as f64).powi(2);
        den += (*y as f64).powi(2);
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

pub fn gemm_bench(
    shape: &GemmShape,
    seed: u64,
    outlier_fraction: f64,
    outlier_magnitude: f64,
    output: Option<&Path>,
    q: &QuantArgs,
) -> Result<(), CliError> {
    let recipe = recipe(q)?;
    let GemmShape { m, k, n, tile } = *shape;
    if tile == 0 {
        return Err(CliError::Usage("--tile must be at least 1".into()));
    }
    let mut sa = TensorStreamSpec::gaussian(m, k, 1, seed);
    sa.outlier_channel_fraction = outlier_fraction;
    sa.outlier_magnitude = outlier_magnitude;
    let sb = TensorStreamSpec::gaussian(k, n, 1, seed.wrapping_add(1));
    let (a, b) = (generate_step(&sa, 0)?, generate_step(&sb, 0)?);

    // Channels run along the contraction axis: rows of A, columns of B.
    let (pa, pb) = (q.partition.with_axis(Axis::Row), q.partition.with_axis(Axis::Column));
    let usage = |e: morq_core::mor::MorError| CliError::Usage(e.to_string());
    let aq = mor_quantize(&a, &recipe, &pa, q.strategy).map_err(usage)?;
    let bq = mor_quantize(&b, &recipe, &pb, q.strategy).map_err(usage)?;
    let gemm = |e: morq_core::gemm::GemmError| CliError::Usage(e.to_string());
    let (c, cost) = block_gemm(&aq, &bq, tile).map_err(gemm)?;
    let exact = reference_gemm(&aq.dequantize(), &bq.dequantize()).map_err(gemm)?;
    let fp32 = reference_gemm(&a, &b).map_err(gemm)?;

    let summary = GemmSummary {
        m,
        k,
        n,
        recipe: q.recipe.to_string(),
        partition_a: pa,
        partition_b: pb,
        strategy: q.strategy,
        decisions_a: compact(&aq.decisions(), aq.granularity),
        decisions_b: compact(&bq.decisions(), bq.granularity),
        fp8_macs: cost.fp8_macs,
        bf16_macs: cost.bf16_macs,
        upcast_blocks: cost.upcast_blocks,
        total_macs: cost.total_macs(),
        expected_macs: (m * k * n) as u64,
        speedup_estimate: cost.speedup_estimate(),
        bit_exact: c.values().iter().zip(exact.values()).all(|(x, y)| x.to_bits() == y.to_bits()),
        frobenius_rel_error: frobenius_rel(&c, &fp32),
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Format(e.to_string()))?;
    println!("{text}");
    if let Some(p) = output {
        write_json(p, &summary)?;
    }
    Ok(())
}

/// A tensor-level decision is reported once rather than per block.
fn compact(d: &[RepType], g: Granularity) -> Vec<RepType> {
    match g {
        Granularity::TensorLevel => d.iter().take(1).copied().collect(),
        Granularity::SubTensorLevel => d.to_vec(),
    }
}

#[derive(Serialize)]
struct TableFile<'a> {
    format: Format,
    entries: &'a [morq_core::formats::TableEntry],
}

pub fn tables(out_dir: &Path) -> Result<(), CliError> {
    ensure_dir(out_dir)?;
    for (fmt, name) in [(Format::E4M3, "e4m3.json"), (Format::E5M2, "e5m2.json")] {
        let entries = decode_table(fmt).map_err(|e| CliError::Usage(e.to_string()))?;
        write_json(
            &out_dir.join(name),
            &TableFile {
                format: fmt,
                entries: &entries,
            },
        )?;
    }
    Ok(())
}

pub fn gen_stream(spec: &Path, out_dir: &Path, label: &str, seed: Option<u64>) -> Result<(), CliError> {
    let spec = load_stream(spec, seed)?;
    let key: TensorKey = label.parse().map_err(|e| CliError::Usage(format!("--label: {e}")))?;
    ensure_dir(out_dir)?;
    for step in 0..spec.steps {
        let t = generate_step(&spec, step)?;
        write_atomic(&out_dir.join(format!("{key}@{step}.mort")), &t.to_mort_bytes())?;
    }
    Ok(())
}
