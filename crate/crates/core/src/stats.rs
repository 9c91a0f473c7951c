//! Relative-error histograms and BF16 fallback accounting per tensor stream.
//!
//! Each observation (one tensor at one step) adds one count to a 12-bin
//! histogram: eleven half-open 0.5%-wide bins starting at 0 and one open bin
//! for 5.5% and beyond. A value exactly on an edge lands in the higher bin.
//!
//! Histograms live in fixed windows of `reset_period` steps aligned at step 0
//! (window `w` covers `[w * period, (w + 1) * period)`). A window becomes a
//! snapshot once its last step has been recorded, or once a later step shows
//! up. Counts are stored as integers and only normalized at export, so shards
//! merge exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mor::RepType;

pub const N_BINS: usize = 12;
pub const DEFAULT_RESET_PERIOD: u64 = 6000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("cannot merge states with reset periods {0} and {1}")]
    PeriodMismatch(u64, u64),
    #[error("invalid tensor label `{0}`")]
    BadLabel(String),
    #[error("reset period must be at least 1")]
    ZeroPeriod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearModule {
    LinearQkv,
    LinearProj,
    Fc1,
    Fc2,
}

impl LinearModule {
    pub const ALL: [LinearModule; 4] = [
        LinearModule::LinearQkv,
        LinearModule::LinearProj,
        LinearModule::Fc1,
        LinearModule::Fc2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LinearModule::LinearQkv => "linear_qkv",
            LinearModule::LinearProj => "linear_proj",
            LinearModule::Fc1 => "fc1",
            LinearModule::Fc2 => "fc2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Input,
    Weight,
    Grad,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Input => "input",
            Role::Weight => "weight",
            Role::Grad => "grad",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    RowPartition,
    ColPartition,
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pass {
    Forward,
    Backward,
}

/// Identity of one tracked tensor stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TensorKey {
    pub layer_index: usize,
    pub module: LinearModule,
    pub role: Role,
    pub direction: Direction,
    pub pass: Pass,
}

impl TensorKey {
    pub fn new(layer_index: usize, module: LinearModule, role: Role, direction: Direction, pass: Pass) -> Self {
        Self {
            layer_index,
            module,
            role,
            direction,
            pass,
        }
    }
}

/// `decoder.layer.{n}.{module}.{role}[.{row|col}]`
impl fmt::Display for TensorKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "decoder.layer.{}.{}.{}",
            self.layer_index,
            self.module.as_str(),
            self.role.as_str()
        )?;
        match self.direction {
            Direction::RowPartition => write!(f, ".row"),
            Direction::ColPartition => write!(f, ".col"),
            Direction::NotApplicable => Ok(()),
        }
    }
}

/// Parses the label grammar. The label carries no pass; gradients are taken
/// to be backward-pass tensors and everything else forward.
impl FromStr for TensorKey {
    type Err = StatsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || StatsError::BadLabel(s.to_string());
        let rest = s.strip_prefix("decoder.layer.").ok_or_else(bad)?;
        let parts: Vec<&str> = rest.split('.').collect();
        if !(3..=4).contains(&parts.len()) {
            return Err(bad());
        }
        let layer_index = parts[0].parse().map_err(|_| bad())?;
        let module = LinearModule::ALL
            .into_iter()
            .find(|m| m.as_str() == parts[1])
            .ok_or_else(bad)?;
        let role = [Role::Input, Role::Weight, Role::Grad]
            .into_iter()
            .find(|r| r.as_str() == parts[2])
            .ok_or_else(bad)?;
        let direction = match parts.get(3) {
            None => Direction::NotApplicable,
            Some(&"row") => Direction::RowPartition,
            Some(&"col") => Direction::ColPartition,
            Some(_) => return Err(bad()),
        };
        let pass = if role == Role::Grad { Pass::Backward } else { Pass::Forward };
        Ok(TensorKey::new(layer_index, module, role, direction, pass))
    }
}

/// Lower edge of bin `i`: `i / 200`, i.e. the double nearest `0.005 * i`.
pub fn bin_edge(i: usize) -> f64 {
    i as f64 / 200.0
}

/// Bin of a relative error. NaN goes to the open last bin.
pub fn bin_index(rel_error: f64) -> usize {
    if rel_error.is_nan() {
        return N_BINS - 1;
    }
    (1..N_BINS).take_while(|&i| rel_error >= bin_edge(i)).count()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorHistogram {
    pub bins: [u64; N_BINS],
    pub total: u64,
    pub window_start_step: u64,
}

impl ErrorHistogram {
    pub fn new(window_start_step: u64) -> Self {
        Self {
            window_start_step,
            ..Default::default()
        }
    }

    pub fn add(&mut self, rel_error: f64) {
        self.bins[bin_index(rel_error)] += 1;
        self.total += 1;
    }

    pub fn merge(&mut self, other: &ErrorHistogram) {
        for (a, b) in self.bins.iter_mut().zip(other.bins) {
            *a += b;
        }
        self.total += other.total;
    }

    /// Row normalized to sum to one; all zeros when empty.
    pub fn normalized(&self) -> [f64; N_BINS] {
        let mut out = [0.0; N_BINS];
        if self.total > 0 {
            for (o, &c) in out.iter_mut().zip(&self.bins) {
                *o = c as f64 / self.total as f64;
            }
        }
        out
    }

    /// Bin holding the median observation.
    pub fn median_bin(&self) -> Option<usize> {
        if self.total == 0 {
            return None;
        }
        let half = self.total.div_ceil(2);
        let mut seen = 0;
        self.bins.iter().position(|&c| {
            seen += c;
            seen >= half
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackCounter {
    pub decisions_total: u64,
    pub decisions_bf16: u64,
}

impl FallbackCounter {
    pub fn add(&mut self, decision: RepType) {
        self.decisions_total += 1;
        if decision == RepType::BF16 {
            self.decisions_bf16 += 1;
        }
    }

    pub fn fraction(&self) -> Option<f64> {
        (self.decisions_total > 0).then(|| self.decisions_bf16 as f64 / self.decisions_total as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct KeyStats {
    windows: BTreeMap<u64, ErrorHistogram>,
    last_step: Option<u64>,
    fallback: FallbackCounter,
}

impl KeyStats {
    fn is_closed(&self, window: u64, period: u64) -> bool {
        self.last_step
            .is_some_and(|s| s as u128 + 1 >= (window as u128 + 1) * period as u128)
    }
}

/// Which observations go into the heatmap rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeatmapOrdering {
    /// One row per tensor key, from its most recent nonempty window.
    ByTensor,
    /// One row per window of a single tensor, oldest first.
    ByStep(TensorKey),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyFilter {
    pub layer: Option<usize>,
    pub module: Option<LinearModule>,
    pub role: Option<Role>,
    pub direction: Option<Direction>,
    pub pass: Option<Pass>,
}

impl KeyFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn matches(&self, k: &TensorKey) -> bool {
        self.layer.is_none_or(|l| l == k.layer_index)
            && self.module.is_none_or(|m| m == k.module)
            && self.role.is_none_or(|r| r == k.role)
            && self.direction.is_none_or(|d| d == k.direction)
            && self.pass.is_none_or(|p| p == k.pass)
    }
}

/// Accumulated statistics over all tracked tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsState {
    reset_period: u64,
    keys: BTreeMap<TensorKey, KeyStats>,
}

impl Default for StatsState {
    fn default() -> Self {
        Self::new(DEFAULT_RESET_PERIOD).expect("nonzero default period")
    }
}

impl StatsState {
    pub fn new(reset_period: u64) -> Result<Self, StatsError> {
        if reset_period == 0 {
            return Err(StatsError::ZeroPeriod);
        }
        Ok(Self {
            reset_period,
            keys: BTreeMap::new(),
        })
    }

    pub fn reset_period(&self) -> u64 {
        self.reset_period
    }

    pub fn keys(&self) -> impl Iterator<Item = &TensorKey> {
        self.keys.keys()
    }

    pub fn record(&mut self, key: TensorKey, step: u64, rel_error: f64, decision: RepType) {
        debug_assert!(!(rel_error < 0.0), "relative error must be nonnegative");
        let window = step / self.reset_period;
        let ks = self.keys.entry(key).or_default();
        ks.windows
            .entry(window)
            .or_insert_with(|| ErrorHistogram::new(window * self.reset_period))
            .add(rel_error);
        ks.last_step = Some(ks.last_step.map_or(step, |s| s.max(step)));
        ks.fallback.add(decision);
    }

    /// One error observation carrying several block decisions, as produced
    /// by sub-tensor recipes. Every decision counts toward the fallback
    /// counter; the histogram gets a single entry.
    pub fn record_decisions(&mut self, key: TensorKey, step: u64, rel_error: f64, decisions: &[RepType]) {
        let Some((&first, rest)) = decisions.split_first() else {
            return;
        };
        self.record(key, step, rel_error, first);
        let ks = self.keys.get_mut(&key).expect("recorded above");
        for &d in rest {
            ks.fallback.add(d);
        }
    }

    /// Fold another shard into this one.
    pub fn merge(&mut self, other: &StatsState) -> Result<(), StatsError> {
        if self.reset_period != other.reset_period {
            return Err(StatsError::PeriodMismatch(self.reset_period, other.reset_period));
        }
        for (key, theirs) in &other.keys {
            let ours = self.keys.entry(*key).or_default();
            for (w, h) in &theirs.windows {
                ours.windows
                    .entry(*w)
                    .or_insert_with(|| ErrorHistogram::new(h.window_start_step))
                    .merge(h);
            }
            ours.last_step = match (ours.last_step, theirs.last_step) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            };
            ours.fallback.decisions_total += theirs.fallback.decisions_total;
            ours.fallback.decisions_bf16 += theirs.fallback.decisions_bf16;
        }
        Ok(())
    }

    /// Closed windows of one tensor, oldest first.
    pub fn snapshots(&self, key: &TensorKey) -> Vec<&ErrorHistogram> {
        let Some(ks) = self.keys.get(key) else {
            return Vec::new();
        };
        ks.windows
            .iter()
            .filter(|(w, _)| ks.is_closed(**w, self.reset_period))
            .map(|(_, h)| h)
            .collect()
    }

    /// The open window: counts recorded since the last closed window.
    pub fn current_window(&self, key: &TensorKey) -> ErrorHistogram {
        let Some(ks) = self.keys.get(key) else {
            return ErrorHistogram::default();
        };
        match ks.windows.iter().next_back() {
            Some((w, h)) if !ks.is_closed(*w, self.reset_period) => h.clone(),
            Some((w, _)) => ErrorHistogram::new((w + 1) * self.reset_period),
            None => ErrorHistogram::default(),
        }
    }

    pub fn snapshot_count(&self, key: &TensorKey) -> usize {
        self.snapshots(key).len()
    }

    /// Every window of a key with data, oldest first.
    pub fn windows(&self, key: &TensorKey) -> Vec<&ErrorHistogram> {
        self.keys
            .get(key)
            .map(|ks| ks.windows.values().collect())
            .unwrap_or_default()
    }

    pub fn total_records(&self) -> u64 {
        self.keys
            .values()
            .flat_map(|k| k.windows.values())
            .map(|h| h.total)
            .sum()
    }

    pub fn fallback(&self, key: &TensorKey) -> Option<FallbackCounter> {
        self.keys.get(key).map(|k| k.fallback)
    }

    /// BF16 share of all decisions over keys matching `filter`.
    pub fn fallback_percentage(&self, filter: &KeyFilter) -> Option<f64> {
        let mut total = FallbackCounter::default();
        for (k, ks) in &self.keys {
            if filter.matches(k) {
                total.decisions_total += ks.fallback.decisions_total;
                total.decisions_bf16 += ks.fallback.decisions_bf16;
            }
        }
        total.fraction()
    }

    pub fn export_heatmap(&self, ordering: &HeatmapOrdering) -> Heatmap {
        let rows = match ordering {
            HeatmapOrdering::ByTensor => self
                .keys
                .iter()
                .filter_map(|(k, ks)| {
                    ks.windows.values().next_back().map(|h| HeatmapRow::new(k.to_string(), h))
                })
                .collect(),
            HeatmapOrdering::ByStep(key) => self
                .windows(key)
                .into_iter()
                .map(|h| {
                    let label = format!("step.{}-{}", h.window_start_step, h.window_start_step + self.reset_period - 1);
                    HeatmapRow::new(label, h)
                })
                .collect(),
        };
        Heatmap { rows }
    }

    pub fn fallback_report(&self) -> FallbackReport {
        FallbackReport {
            overall: self.fallback_percentage(&KeyFilter::all()),
            tensors: self
                .keys
                .iter()
                .map(|(k, ks)| FallbackEntry {
                    label: k.to_string(),
                    key: *k,
                    decisions_total: ks.fallback.decisions_total,
                    decisions_bf16: ks.fallback.decisions_bf16,
                    fraction: ks.fallback.fraction(),
                })
                .collect(),
        }
    }
}

/// Free-function form of [`StatsState::record`].
pub fn record(state: &mut StatsState, key: TensorKey, step: u64, rel_error: f64, decision: RepType) {
    state.record(key, step, rel_error, decision)
}

pub fn fallback_percentage(state: &StatsState, filter: &KeyFilter) -> Option<f64> {
    state.fallback_percentage(filter)
}

pub fn export_heatmap(state: &StatsState, ordering: &HeatmapOrdering) -> Heatmap {
    state.export_heatmap(ordering)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub label: String,
    pub counts: [u64; N_BINS],
    pub normalized: [f64; N_BINS],
}

impl HeatmapRow {
    fn new(label: String, h: &ErrorHistogram) -> Self {
        Self {
            label,
            counts: h.bins,
            normalized: h.normalized(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub rows: Vec<HeatmapRow>,
}

impl Heatmap {
    pub fn column_labels() -> Vec<String> {
        (0..N_BINS)
            .map(|i| {
                let pct = bin_edge(i) * 100.0;
                if i + 1 == N_BINS {
                    format!("{pct:.1}%+")
                } else {
                    format!("{pct:.1}%")
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for c in Self::column_labels() {
            out.push(',');
            out.push_str(&c);
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.label);
            for v in row.normalized {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "bin_edges": (0..N_BINS).map(bin_edge).collect::<Vec<_>>(),
            "columns": Self::column_labels(),
            "rows": self.rows,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackEntry {
    pub label: String,
    pub key: TensorKey,
    pub decisions_total: u64,
    pub decisions_bf16: u64,
    pub fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackReport {
    pub overall: Option<f64>,
    pub tensors: Vec<FallbackEntry>,
}
