//! Binary network checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "EXPNETCK" | version u32 | input_side u64 | output_dim u64 | n_layers u64
//! descriptor table: per layer a kind byte then six u64 shape fields
//! payloads: per parameterized layer, weights row-major then bias, as f64
//! ```

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{Layer, Params, RegressorNet};
use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 8] = b"EXPNETCK";
pub const FORMAT_VERSION: u32 = 1;

const KIND_DENSE: u8 = 0;
const KIND_CONV: u8 = 1;
const KIND_POOL: u8 = 2;
const KIND_RELU: u8 = 3;

fn descriptor(layer: &Layer) -> (u8, [usize; 6]) {
    match layer {
        Layer::Dense { params } => (KIND_DENSE, [params.weights.ncols(), params.weights.nrows(), 0, 0, 0, 0]),
        Layer::Conv { in_channels, out_channels, kernel, height, width, .. } => {
            (KIND_CONV, [*in_channels, *out_channels, *kernel, *height, *width, 0])
        }
        Layer::Pool { channels, height, width } => (KIND_POOL, [*channels, *height, *width, 0, 0, 0]),
        Layer::Relu { size } => (KIND_RELU, [*size, 0, 0, 0, 0, 0]),
    }
}

pub fn to_bytes(net: &RegressorNet) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * net.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [net.input_side, net.output_dim, net.layers.len()] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for layer in &net.layers {
        let (kind, fields) = descriptor(layer);
        out.push(kind);
        for f in fields {
            out.extend_from_slice(&(f as u64).to_le_bytes());
        }
    }
    for p in net.layers.iter().filter_map(Layer::params) {
        for r in 0..p.weights.nrows() {
            for c in 0..p.weights.ncols() {
                out.extend_from_slice(&p.weights[(r, c)].to_le_bytes());
            }
        }
        for b in p.bias.iter() {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::parse("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::parse("dimension overflows usize"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::parse("payload size overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn read_params(r: &mut Reader, rows: usize, cols: usize) -> Result<Params> {
    let weights = DMatrix::from_row_slice(rows, cols, &r.f64s(rows * cols)?);
    let bias = DVector::from_vec(r.f64s(rows)?);
    Ok(Params { weights, bias })
}

pub fn from_bytes(buf: &[u8]) -> Result<RegressorNet> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::parse("not a network checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let (input_side, output_dim, n_layers) = (r.u64()?, r.u64()?, r.u64()?);
    let mut table = Vec::new();
    for _ in 0..n_layers {
        let kind = r.take(1)?[0];
        let mut f = [0usize; 6];
        for v in f.iter_mut() {
            *v = r.u64()?;
        }
        table.push((kind, f));
    }
    let mut layers = Vec::with_capacity(table.len());
    for (kind, f) in table {
        let layer = match kind {
            KIND_DENSE => Layer::Dense { params: read_params(&mut r, f[1], f[0])? },
            KIND_CONV => {
                let cols = f[0].checked_mul(f[2] * f[2]).ok_or_else(|| Error::parse("payload size overflow"))?;
                Layer::Conv {
                    in_channels: f[0],
                    out_channels: f[1],
                    kernel: f[2],
                    height: f[3],
                    width: f[4],
                    params: read_params(&mut r, f[1], cols)?,
                }
            }
            KIND_POOL => Layer::Pool { channels: f[0], height: f[1], width: f[2] },
            KIND_RELU => Layer::Relu { size: f[0] },
            other => return Err(Error::parse(format!("unknown layer kind {other}"))),
        };
        layers.push(layer);
    }
    if r.pos != buf.len() {
        return Err(Error::Inconsistent(format!("{} trailing bytes after payload", buf.len() - r.pos)));
    }
    RegressorNet::new(layers, input_side, output_dim).map_err(|e| match e {
        Error::Contract(msg) => Error::Inconsistent(msg),
        other => other,
    })
}

pub fn save_checkpoint(net: &RegressorNet, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &to_bytes(net))
}

pub fn load_checkpoint(path: &Path) -> Result<RegressorNet> {
    from_bytes(&fsutil::read(path)?)
}
