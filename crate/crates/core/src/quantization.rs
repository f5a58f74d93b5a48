//! Discrete level sets for the quantized variant, nearest-level projection,
//! and the bit-packed message codec.
//!
//! Wire format of one message (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       2     layer id (u16)
//! 2       4     rows (u32)
//! 6       4     cols (u32)
//! 10      2     m, number of levels (u16); 0 marks a dense f64 payload
//! 12      ..    payload
//! ```
//!
//! A quantized payload stores the level index of every entry in row-major
//! order using `bits_per_entry` bits each. Entry `i` occupies bits
//! `[i·b, (i+1)·b)` of the payload, where bit `j` is bit `j mod 8` of byte
//! `j / 8` (least significant first). The final byte is zero-padded.
//! A dense payload is the row-major entries as little-endian `f64`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::phi::{grad_input, PhiInputs};

/// Size of the fixed message header in bytes.
pub const HEADER_BYTES: usize = 12;

/// Configuration of a uniform level set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizationSpec {
    pub levels: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for QuantizationSpec {
    fn default() -> Self {
        QuantizationSpec { levels: 16, lo: -1.0, hi: 1.0 }
    }
}

impl QuantizationSpec {
    pub fn build(&self) -> Result<QuantizationSet> {
        make_uniform_levels(self.lo, self.hi, self.levels)
    }
}

/// A strictly increasing, finite set of admissible values.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationSet {
    levels: Vec<f64>,
}

impl QuantizationSet {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::invalid("a level set needs at least 2 levels"));
        }
        if levels.len() > u16::MAX as usize {
            return Err(Error::invalid("too many levels for the wire header"));
        }
        if levels.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("levels must be finite"));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("levels must be strictly increasing"));
        }
        Ok(QuantizationSet { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// `ceil(log2 m)`.
    pub fn bits_per_entry(&self) -> usize {
        (usize::BITS - (self.levels.len() - 1).leading_zeros()) as usize
    }

    /// Index of the level nearest to `v`; exact midpoints go to the lower level.
    pub fn nearest_index(&self, v: f64) -> usize {
        let lv = &self.levels;
        let i = lv.partition_point(|&d| d < v);
        if i == 0 {
            return 0;
        }
        if i == lv.len() {
            return lv.len() - 1;
        }
        if v - lv[i - 1] <= lv[i] - v {
            i - 1
        } else {
            i
        }
    }

    pub fn nearest(&self, v: f64) -> f64 {
        self.levels[self.nearest_index(v)]
    }

    /// Index of `v` if it is exactly one of the levels.
    pub fn index_of(&self, v: f64) -> Option<usize> {
        let i = self.levels.partition_point(|&d| d < v);
        (i < self.levels.len() && self.levels[i] == v).then_some(i)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.index_of(v).is_some()
    }

    pub fn contains_all(&self, x: &ArrayView2<'_, f64>) -> bool {
        x.iter().all(|&v| self.contains(v))
    }

    pub fn project(&self, x: &ArrayView2<'_, f64>) -> Array2<f64> {
        x.mapv(|v| self.nearest(v))
    }

    pub fn project_in_place(&self, x: &mut Array2<f64>) {
        x.mapv_inplace(|v| self.nearest(v));
    }

    /// Payload bytes for `entries` packed indices.
    pub fn payload_bytes(&self, entries: usize) -> usize {
        (entries * self.bits_per_entry()).div_ceil(8)
    }
}

/// `m` equally spaced levels from `lo` to `hi` inclusive.
pub fn make_uniform_levels(lo: f64, hi: f64, m: usize) -> Result<QuantizationSet> {
    if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
        return Err(Error::invalid(format!("level range [{lo}, {hi}] is empty")));
    }
    if m < 2 {
        return Err(Error::invalid("a level set needs at least 2 levels"));
    }
    let span = hi - lo;
    let last = (m - 1) as f64;
    let mut levels: Vec<f64> = (0..m).map(|i| lo + span * (i as f64 / last)).collect();
    levels[m - 1] = hi;
    QuantizationSet::new(levels)
}

/// Quantized input step: `project(p − ∇φ/τ)` with `τ = ρ + ν‖W‖²_F`.
/// Returns the new input and the step parameter used.
pub fn update_p_quantized(
    inputs: &PhiInputs<'_>,
    p: &ArrayView2<'_, f64>,
    set: &QuantizationSet,
) -> (Array2<f64>, f64) {
    let tau = inputs.rho + inputs.nu * inputs.weight.iter().map(|w| w * w).sum::<f64>();
    let grad = grad_input(inputs, p);
    let target = p - &(grad / tau);
    (set.project(&target.view()), tau)
}

fn write_header(buf: &mut Vec<u8>, layer: u16, rows: usize, cols: usize, m: u16) -> Result<()> {
    let rows = u32::try_from(rows).map_err(|_| Error::Codec("row count exceeds u32".into()))?;
    let cols = u32::try_from(cols).map_err(|_| Error::Codec("column count exceeds u32".into()))?;
    buf.extend_from_slice(&layer.to_le_bytes());
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    buf.extend_from_slice(&m.to_le_bytes());
    Ok(())
}

/// Parsed message header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageHeader {
    pub layer: u16,
    pub rows: usize,
    pub cols: usize,
    pub levels: u16,
}

impl MessageHeader {
    pub fn parse(buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER_BYTES {
            return Err(Error::Codec(format!("message of {} bytes has no header", buf.len())));
        }
        let u16_at = |o: usize| u16::from_le_bytes([buf[o], buf[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        Ok(MessageHeader {
            layer: u16_at(0),
            rows: u32_at(2) as usize,
            cols: u32_at(6) as usize,
            levels: u16_at(10),
        })
    }
}

/// Packs the level indices of `x` (row-major). Fails if an entry is off-grid.
pub fn encode(x: &ArrayView2<'_, f64>, set: &QuantizationSet) -> Result<Vec<u8>> {
    let bits = set.bits_per_entry();
    let mut out = Vec::with_capacity(set.payload_bytes(x.len()));
    let mut acc: u64 = 0;
    let mut filled = 0;
    for (n, &v) in x.iter().enumerate() {
        let idx = set
            .index_of(v)
            .ok_or_else(|| Error::Codec(format!("entry {n} = {v} is not a level")))?;
        acc |= (idx as u64) << filled;
        filled += bits;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    Ok(out)
}

/// Inverse of [`encode`] for a known shape.
pub fn decode(buf: &[u8], set: &QuantizationSet, shape: (usize, usize)) -> Result<Array2<f64>> {
    let entries = shape.0 * shape.1;
    let need = set.payload_bytes(entries);
    if buf.len() != need {
        return Err(Error::Codec(format!("payload has {} bytes, expected {need}", buf.len())));
    }
    let bits = set.bits_per_entry();
    let mask = (1u64 << bits) - 1;
    let mut values = Vec::with_capacity(entries);
    let mut acc: u64 = 0;
    let mut filled = 0;
    let mut bytes = buf.iter();
    for n in 0..entries {
        while filled < bits {
            acc |= (*bytes.next().unwrap() as u64) << filled;
            filled += 8;
        }
        let idx = (acc & mask) as usize;
        acc >>= bits;
        filled -= bits;
        let v = set
            .levels()
            .get(idx)
            .ok_or_else(|| Error::Codec(format!("entry {n} has level index {idx} out of range")))?;
        values.push(*v);
    }
    Ok(Array2::from_shape_vec(shape, values).expect("shape matches entry count"))
}

/// Header plus quantized payload.
pub fn encode_message(layer: u16, x: &ArrayView2<'_, f64>, set: &QuantizationSet) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(HEADER_BYTES + set.payload_bytes(x.len()));
    write_header(&mut buf, layer, x.nrows(), x.ncols(), set.len() as u16)?;
    buf.extend(encode(x, set)?);
    Ok(buf)
}

/// Header plus dense little-endian `f64` payload.
pub fn encode_dense_message(layer: u16, x: &ArrayView2<'_, f64>) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(HEADER_BYTES + 8 * x.len());
    write_header(&mut buf, layer, x.nrows(), x.ncols(), 0)?;
    for v in x {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

/// Decodes either message kind; a quantized message needs the level set.
pub fn decode_message(buf: &[u8], set: Option<&QuantizationSet>) -> Result<(u16, Array2<f64>)> {
    let h = MessageHeader::parse(buf)?;
    let payload = &buf[HEADER_BYTES..];
    let shape = (h.rows, h.cols);
    if h.levels == 0 {
        if payload.len() != 8 * h.rows * h.cols {
            return Err(Error::Codec("dense payload length mismatch".into()));
        }
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        return Ok((h.layer, Array2::from_shape_vec(shape, values).unwrap()));
    }
    let set = set.ok_or_else(|| Error::Codec("quantized message without a level set".into()))?;
    if set.len() != h.levels as usize {
        return Err(Error::Codec(format!(
            "message uses {} levels, receiver has {}",
            h.levels,
            set.len()
        )));
    }
    Ok((h.layer, decode(payload, set, shape)?))
}
