//! Dense 2-D tensors and the partition machinery that defines scaling blocks.

use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::TensorKey;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor must be nonempty, got {rows}x{cols}")]
    Empty { rows: usize, cols: usize },
    #[error("expected {expected} values for the shape, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("invalid partition spec `{0}`")]
    BadPartition(String),
    #[error("bad MORT file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major FP32 matrix. All values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF32 {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
    pub key: Option<TensorKey>,
}

impl TensorF32 {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self, TensorError> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::Empty { rows, cols });
        }
        if values.len() != rows * cols {
            return Err(TensorError::LengthMismatch {
                expected: rows * cols,
                actual: values.len(),
            });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { index, value });
        }
        Ok(Self {
            rows,
            cols,
            values,
            key: None,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols]).expect("zeros on a nonempty shape")
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self, TensorError> {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Self::new(rows, cols, values)
    }

    pub fn with_key(mut self, key: TensorKey) -> Self {
        self.key = Some(key);
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.cols + c]
    }

    pub fn transpose(&self) -> TensorF32 {
        let mut out = Vec::with_capacity(self.values.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.get(r, c));
            }
        }
        TensorF32 {
            rows: self.cols,
            cols: self.rows,
            values: out,
            key: self.key,
        }
    }

    /// Iterate the values of one block in row-major order.
    pub fn block_values<'a>(&'a self, b: &'a BlockView) -> impl Iterator<Item = f32> + 'a {
        b.rows
            .clone()
            .flat_map(move |r| self.values[r * self.cols + b.cols.start..r * self.cols + b.cols.end].iter().copied())
    }

    /// Write the MORT dump: magic, version, rows, cols, then LE f32 values.
    pub fn write_mort<W: Write>(&self, mut w: W) -> Result<(), TensorError> {
        w.write_all(MORT_MAGIC)?;
        w.write_all(&MORT_VERSION.to_le_bytes())?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_mort_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.values.len() * 4);
        self.write_mort(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_mort<R: Read>(mut r: R) -> Result<Self, TensorError> {
        let mut header = [0u8; 14];
        r.read_exact(&mut header)
            .map_err(|_| TensorError::Format("truncated header".into()))?;
        if &header[0..4] != MORT_MAGIC {
            return Err(TensorError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != MORT_VERSION {
            return Err(TensorError::Format(format!("unsupported version {version}")));
        }
        let rows = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| TensorError::Format("shape overflows".into()))?;
        if payload.len() != expected {
            return Err(TensorError::Format(format!(
                "expected {expected} payload bytes for {rows}x{cols}, found {}",
                payload.len()
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(rows, cols, values)
    }
}

pub const MORT_MAGIC: &[u8; 4] = b"MORT";
pub const MORT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Each row is a channel.
    Row,
    /// Each column is a channel.
    Column,
}

/// Scaling granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartitionSpec {
    PerTensor,
    Block { rows: usize, cols: usize },
    PerChannel(Axis),
    /// Runs of `len` elements along each channel of `axis`, e.g. 1x128 for rows.
    SubChannel { axis: Axis, len: usize },
}

impl PartitionSpec {
    pub const DEFAULT: PartitionSpec = PartitionSpec::Block { rows: 128, cols: 128 };

    pub fn block(rows: usize, cols: usize) -> Self {
        PartitionSpec::Block { rows, cols }
    }

    /// Replace the channel axis of channel-style partitions; others unchanged.
    pub fn with_axis(self, axis: Axis) -> Self {
        match self {
            PartitionSpec::PerChannel(_) => PartitionSpec::PerChannel(axis),
            PartitionSpec::SubChannel { len, .. } => PartitionSpec::SubChannel { axis, len },
            other => other,
        }
    }

    /// Tile sizes (block rows, block cols) for a tensor of the given shape.
    fn tile(&self, rows: usize, cols: usize) -> (usize, usize) {
        match *self {
            PartitionSpec::PerTensor => (rows, cols),
            PartitionSpec::Block { rows: br, cols: bc } => (br, bc),
            PartitionSpec::PerChannel(Axis::Row) => (1, cols),
            PartitionSpec::PerChannel(Axis::Column) => (rows, 1),
            PartitionSpec::SubChannel { axis: Axis::Row, len } => (1, len),
            PartitionSpec::SubChannel { axis: Axis::Column, len } => (len, 1),
        }
    }

    fn validate(&self) -> Result<(), TensorError> {
        match *self {
            PartitionSpec::Block { rows, cols } if rows == 0 || cols == 0 => {
                Err(TensorError::BadPartition(self.to_string()))
            }
            PartitionSpec::SubChannel { len: 0, .. } => Err(TensorError::BadPartition(self.to_string())),
            _ => Ok(()),
        }
    }
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl fmt::Display for PartitionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let axis = |a: &Axis| match a {
            Axis::Row => "row",
            Axis::Column => "col",
        };
        match self {
            PartitionSpec::PerTensor => write!(f, "tensor"),
            PartitionSpec::Block { rows, cols } => write!(f, "block:{rows}x{cols}"),
            PartitionSpec::PerChannel(a) => write!(f, "channel:{}", axis(a)),
            PartitionSpec::SubChannel { axis: a, len } => write!(f, "subchannel:{}:{len}", axis(a)),
        }
    }
}

impl FromStr for PartitionSpec {
    type Err = TensorError;

    /// Accepts `tensor`, `block:RxC`, `channel:row|col` and `subchannel:row|col:N`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TensorError::BadPartition(s.to_string());
        let axis = |a: &str| match a {
            "row" => Ok(Axis::Row),
            "col" | "column" => Ok(Axis::Column),
            _ => Err(bad()),
        };
        let parts: Vec<&str> = s.trim().split(':').collect();
        let spec = match parts.as_slice() {
            ["tensor"] => PartitionSpec::PerTensor,
            ["block", dims] => {
                let (r, c) = dims.split_once('x').ok_or_else(bad)?;
                PartitionSpec::Block {
                    rows: r.parse().map_err(|_| bad())?,
                    cols: c.parse().map_err(|_| bad())?,
                }
            }
            ["channel", a] => PartitionSpec::PerChannel(axis(a)?),
            ["subchannel", a, n] => PartitionSpec::SubChannel {
                axis: axis(a)?,
                len: n.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl Serialize for PartitionSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PartitionSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One block of a partition: half-open row and column ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockView {
    pub id: usize,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl BlockView {
    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.rows.contains(&r) && self.cols.contains(&c)
    }
}

/// Enumerate the blocks of a `rows x cols` tensor in row-major block order.
/// Edge blocks are ragged when the dims do not divide the tile.
///
/// # Panics
///
/// Panics on a zero-sized tile (rejected by `PartitionSpec::from_str`).
pub fn partition_shape(rows: usize, cols: usize, spec: &PartitionSpec) -> Vec<BlockView> {
    let (tr, tc) = spec.tile(rows, cols);
    assert!(tr > 0 && tc > 0, "zero-sized partition tile in {spec}");
    let mut blocks = Vec::with_capacity(rows.div_ceil(tr) * cols.div_ceil(tc));
    for r0 in (0..rows).step_by(tr) {
        for c0 in (0..cols).step_by(tc) {
            blocks.push(BlockView {
                id: blocks.len(),
                rows: r0..(r0 + tr).min(rows),
                cols: c0..(c0 + tc).min(cols),
            });
        }
    }
    blocks
}

pub fn partition_blocks(t: &TensorF32, spec: &PartitionSpec) -> Vec<BlockView> {
    partition_shape(t.rows, t.cols, spec)
}

/// Maximum absolute value over the block; 0 for an all-zero block.
pub fn block_amax(t: &TensorF32, b: &BlockView) -> f32 {
    t.block_values(b).fold(0.0f32, |m, v| m.max(v.abs()))
}

/// Minimum absolute value over the nonzero elements, `None` if all zero.
pub fn nonzero_minabs(t: &TensorF32, b: &BlockView) -> Option<f32> {
    t.block_values(b)
        .map(f32::abs)
        .filter(|&a| a > 0.0)
        .fold(None, |m: Option<f32>, a| Some(m.map_or(a, |m| m.min(a))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coverage(rows: usize, cols: usize, spec: &PartitionSpec) -> Vec<u32> {
        let mut seen = vec![0u32; rows * cols];
        for b in partition_shape(rows, cols, spec) {
            for r in b.rows.clone() {
                for c in b.cols.clone() {
                    seen[r * cols + c] += 1;
                }
            }
        }
        seen
    }

    #[test]
    fn block_counts() {
        assert_eq!(partition_shape(256, 384, &PartitionSpec::block(128, 128)).len(), 6);
        assert_eq!(partition_shape(7, 9, &PartitionSpec::PerTensor).len(), 1);
        let rows = partition_shape(5, 9, &PartitionSpec::PerChannel(Axis::Row));
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|b| b.rows.len() == 1 && b.cols.len() == 9));
        let cols = partition_shape(5, 9, &PartitionSpec::PerChannel(Axis::Column));
        assert_eq!(cols.len(), 9);
    }

    #[test]
    fn ragged_edges() {
        let blocks = partition_shape(100, 100, &PartitionSpec::block(64, 64));
        assert_eq!(blocks.len(), 4);
        assert_eq!(blocks[1].cols, 64..100);
        assert_eq!(blocks[3].rows.len(), 36);
        assert_eq!(blocks[3].cols.len(), 36);
        assert!(coverage(100, 100, &PartitionSpec::block(64, 64)).iter().all(|&n| n == 1));
    }

    #[test]
    fn subchannel_tiles() {
        let blocks = partition_shape(2, 300, &PartitionSpec::SubChannel { axis: Axis::Row, len: 128 });
        assert_eq!(blocks.len(), 6);
        assert_eq!(blocks[2].cols, 256..300);
        assert!(coverage(300, 3, &PartitionSpec::SubChannel { axis: Axis::Column, len: 128 })
            .iter()
            .all(|&n| n == 1));
    }

    #[test]
    fn amax_and_minabs() {
        let t = TensorF32::new(1, 3, vec![1.0, -3.0, 2.0]).unwrap();
        let b = &partition_blocks(&t, &PartitionSpec::PerTensor)[0];
        assert_eq!(block_amax(&t, b), 3.0);
        let t = TensorF32::new(1, 3, vec![0.0, 0.5, -2.0]).unwrap();
        assert_eq!(nonzero_minabs(&t, b), Some(0.5));
        let z = TensorF32::zeros(2, 2);
        let b = &partition_blocks(&z, &PartitionSpec::PerTensor)[0];
        assert_eq!(block_amax(&z, b), 0.0);
        assert_eq!(nonzero_minabs(&z, b), None);
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(matches!(TensorF32::new(0, 3, vec![]), Err(TensorError::Empty { .. })));
        assert!(matches!(
            TensorF32::new(2, 2, vec![1.0; 3]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(matches!(
            TensorF32::new(1, 2, vec![1.0, f32::NAN]),
            Err(TensorError::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn partition_strings() {
        for s in ["tensor", "block:128x128", "block:64x32", "channel:row", "channel:col", "subchannel:row:128"] {
            let p: PartitionSpec = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        for s in ["block:0x4", "block:12", "channel:diag", "subchannel:row:0", "blocks"] {
            assert!(s.parse::<PartitionSpec>().is_err(), "{s}");
        }
    }

    #[test]
    fn mort_round_trip_and_errors() {
        let t = TensorF32::new(2, 3, vec![1.0, -2.5, 0.0, 3.25, 1e-8, -7.0]).unwrap();
        let bytes = t.to_mort_bytes();
        assert_eq!(&bytes[..4], b"MORT");
        assert_eq!(bytes.len(), 14 + 24);
        let back = TensorF32::read_mort(bytes.as_slice()).unwrap();
        assert_eq!(back, t);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TensorF32::read_mort(bad.as_slice()).is_err());
        assert!(TensorF32::read_mort(&bytes[..bytes.len() - 1]).is_err());
        assert!(TensorF32::read_mort(&bytes[..6]).is_err());
    }

    #[test]
    fn transpose_swaps() {
        let t = TensorF32::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let tt = t.transpose();
        assert_eq!(tt.shape(), (3, 2));
        assert_eq!(tt.values(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
