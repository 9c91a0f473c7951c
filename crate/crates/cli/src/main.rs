//! `morq`: command-line front end for MoR quantization experiments.
//!
//! Exit codes: 0 on success, 2 on usage or file-format errors, 3 when
//! `train-toy` diverges. Failures print one JSON object to stderr.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use morq_core::mor::{RecipeName, DEFAULT_THRESHOLD};
use morq_core::stats::DEFAULT_RESET_PERIOD;
use morq_core::{PartitionSpec, ScalingStrategy};

use output::CliError;

#[derive(Debug, Parser)]
#[command(name = "morq", version, about = "Mixture-of-representations FP8 quantization emulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand that quantizes.
#[derive(Debug, Clone, Args)]
struct QuantArgs {
    /// tensor | two-way | three-way | bf16
    #[arg(long, default_value_t = RecipeName::Tensor)]
    recipe: RecipeName,
    /// tensor | block:RxC | channel:row|col | subchannel:row|col:N
    #[arg(long, default_value_t = PartitionSpec::DEFAULT)]
    partition: PartitionSpec,
    /// gam | amax | e8m0
    #[arg(long, default_value_t = ScalingStrategy::Gam)]
    strategy: ScalingStrategy,
    /// E4M3 acceptance threshold for the tensor-level recipe.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fake-quantize one MORT tensor and log the decision.
    Quantize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Decision log (JSON lines).
        #[arg(long, default_value = "decisions.jsonl")]
        log: PathBuf,
        /// Tensor label recorded in the log.
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        step: Option<u64>,
        #[command(flatten)]
        quant: QuantArgs,
    },
    /// Replay a directory of `<label>@<step>.mort` dumps into a heatmap and
    /// fallback report.
    Analyze {
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RESET_PERIOD)]
        reset_period: u64,
        /// One heatmap row per window of this tensor instead of one per tensor.
        #[arg(long)]
        by_step: Option<String>,
        #[command(flatten)]
        quant: QuantArgs,
    },
    /// Fallback, error and cost over a threshold x partition x strategy grid.
    Sweep {
        /// Stream spec (TOML or JSON).
        #[arg(long)]
        stream: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.045")]
        thresholds: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "block:128x128")]
        partitions: Vec<PartitionSpec>,
        #[arg(long, value_delimiter = ',', default_value = "gam")]
        strategies: Vec<ScalingStrategy>,
        #[arg(long, default_value_t = RecipeName::Tensor)]
        recipe: RecipeName,
        /// Overrides the seed in the stream spec.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "sweep.csv")]
        output: PathBuf,
    },
    /// Train the toy MLP from a TOML or JSON config.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "report.json")]
        output: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Quantize a random GEMM and report its precision cost.
    GemmBench {
        #[arg(long, default_value_t = 256)]
        m: usize,
        #[arg(long, default_value_t = 512)]
        k: usize,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of A's rows scaled up as outliers.
        #[arg(long, default_value_t = 0.0)]
        outlier_fraction: f64,
        #[arg(long, default_value_t = 1.0)]
        outlier_magnitude: f64,
        #[arg(long, default_value_t = 64)]
        tile: usize,
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        quant: QuantArgs,
    },
    /// Write the E4M3 and E5M2 decode tables as JSON.
    Tables {
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Dump a synthetic stream as `<label>@<step>.mort` files.
    GenStream {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "decoder.layer.0.linear_qkv.input.row")]
        label: String,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("MORQ_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("MORQ_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Quantize {
            input,
            output,
            log,
            label,
            step,
            quant,
        } => commands::quantize(&input, &output, &log, label.as_deref(), step, &quant),
        Command::Analyze {
            input_dir,
            out_dir,
            reset_period,
            by_step,
            quant,
        } => commands::analyze(&input_dir, &out_dir, reset_period, by_step.as_deref(), &quant),
        Command::Sweep {
            stream,
            thresholds,
            partitions,
            strategies,
            recipe,
            seed,
            output,
        } => commands::sweep(&stream, &thresholds, &partitions, &strategies, recipe, seed, &output),
        Command::TrainToy { config, output, seed } => commands::train_toy(&config, &output, seed),
        Command::GemmBench {
            m,
            k,
            n,
            seed,
            outlier_fraction,
            outlier_magnitude,
            tile,
            output,
            quant,
        } => commands::gemm_bench(
            &commands::GemmShape { m, k, n, tile },
            seed,
            outlier_fraction,
            outlier_magnitude,
            output.as_deref(),
            &quant,
        ),
        Command::Tables { out_dir } => commands::tables(&out_dir),
        Command::GenStream {
            spec,
            out_dir,
            label,
            seed,
        } => commands::gen_stream(&spec, &out_dir, &label, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return CliError::Usage(e.to_string()).report(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}
