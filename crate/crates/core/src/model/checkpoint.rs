//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "PDAD"                 magic
//! u32                    version
//! u32                    L
//! u64                    N (samples)
//! L × (u64 in, u64 out)  layer shapes
//! per layer, in order:
//!   f64 τ, f64 θ
//!   W (out × in), b (out), z (out × N), p (in × N)
//!   q (out × N), u (out × N)      hidden layers only
//! ```
//!
//! Matrices are row-major. The first layer's `p` holds the input features.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};

use super::{LayerInput, LayerShape, LayerState, ModelState};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDAD";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn f64s<'a>(&mut self, values: impl IntoIterator<Item = &'a f64>) {
        for v in values {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint("dimension overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::Checkpoint("matrix too large".into()))?;
        let bytes = self.take(n * 8)?;
        let v = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Array2::from_shape_vec((rows, cols), v).unwrap())
    }
}

pub(crate) fn to_bytes(state: &ModelState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    w.0.extend_from_slice(&(state.depth() as u32).to_le_bytes());
    w.0.extend_from_slice(&(state.samples() as u64).to_le_bytes());
    for s in state.shapes() {
        w.0.extend_from_slice(&(s.in_dim as u64).to_le_bytes());
        w.0.extend_from_slice(&(s.out_dim as u64).to_le_bytes());
    }
    for layer in &state.layers {
        w.f64s([&layer.input_step, &layer.weight_step]);
        w.f64s(layer.weight.iter());
        w.f64s(layer.bias.iter());
        w.f64s(layer.preact.iter());
        w.f64s(layer.input.view().iter());
        if let (Some(q), Some(u)) = (&layer.output, &layer.dual) {
            w.f64s(q.iter());
            w.f64s(u.iter());
        }
    }
    w.0
}

pub(crate) fn from_bytes(buf: &[u8]) -> Result<ModelState> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let depth = r.u32()? as usize;
    let samples = r.u64()?;
    if depth == 0 || samples == 0 {
        return Err(Error::Checkpoint("empty model".into()));
    }
    let mut shapes = Vec::with_capacity(depth.min(1024));
    for _ in 0..depth {
        shapes.push(LayerShape::new(r.u64()?, r.u64()?));
    }
    LayerShape::validate_chain(&shapes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut layers = Vec::with_capacity(depth);
    for (l, s) in shapes.iter().enumerate() {
        let input_step = r.f64()?;
        let weight_step = r.f64()?;
        let weight = r.matrix(s.out_dim, s.in_dim)?;
        let bias = Array1::from_vec(r.matrix(1, s.out_dim)?.into_raw_vec_and_offset().0);
        let preact = r.matrix(s.out_dim, samples)?;
        let p = r.matrix(s.in_dim, samples)?;
        let input = if l == 0 { LayerInput::Features(Arc::new(p)) } else { LayerInput::Free(p) };
        let (output, dual) = if l + 1 < depth {
            (Some(r.matrix(s.out_dim, samples)?), Some(r.matrix(s.out_dim, samples)?))
        } else {
            (None, None)
        };
        layers.push(LayerState { weight, bias, preact, input, output, dual, input_step, weight_step });
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(ModelState { layers })
}

pub fn write_checkpoint(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
