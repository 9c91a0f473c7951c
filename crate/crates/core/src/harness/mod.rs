//! Desk-scale workloads: synthetic tensor streams, replay through MoR with
//! statistics, and a small MLP trained with fake-quantized GEMM operands.

use std::path::Path;

use serde::de::DeserializeOwned;
use thiserror::Error;

use crate::mor::MorError;
use crate::stats::StatsError;
use crate::tensor::TensorError;

pub mod replay;
pub mod stream;
pub mod toy;

pub use replay::{run_replay, run_replay_tensors, ReplayConfig, ReplayOutput};
pub use stream::{generate_step, generate_stream, BaseDistribution, TensorStreamSpec};
pub use toy::{gradient_check, train_toy, GradCheck, QuantConfig, Quantization, RoleSwitches, ToyModelConfig, TrainReport};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot read config {path}: {msg}")]
    Config { path: String, msg: String },
    #[error(transparent)]
    Mor(#[from] MorError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Read a TOML or JSON config, chosen by file extension (TOML otherwise).
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let err = |msg: String| HarnessError::Config {
        path: path.display().to_string(),
        msg,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    parse_config(&text, path.extension().and_then(|e| e.to_str()) == Some("json")).map_err(err)
}

pub fn parse_config<T: DeserializeOwned>(text: &str, json: bool) -> Result<T, String> {
    if json {
        serde_json::from_str(text).map_err(|e| e.to_string())
    } else {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}
