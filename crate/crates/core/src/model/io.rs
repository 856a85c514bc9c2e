//! Model files.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! "EXPR3DMM"           8 bytes magic
//! version              u32 (currently 1)
//! n, s, m, L           u64 each
//! mean_shape           3n   f64
//! shape_basis          3n*s f64, column-major
//! expr_basis           3n*m f64, column-major
//! expr_stddev          m    f64
//! landmark_indices     L    u32
//! [triangle count T    u64
//!  triangles           3T   u32]   optional trailer, omitted when absent
//! ```
//!
//! A JSON mirror with the same field names (bases as arrays of columns) is
//! accepted by [`load_model`] for hand-authored models.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::MorphableModel;
use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 8] = b"EXPR3DMM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelJson {
    format: String,
    version: u32,
    n_vertices: usize,
    s: usize,
    m: usize,
    mean_shape: Vec<f64>,
    shape_basis: Vec<Vec<f64>>,
    expr_basis: Vec<Vec<f64>>,
    expr_stddev: Vec<f64>,
    landmark_indices: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    triangles: Option<Vec<[u32; 3]>>,
}

pub fn to_bytes(model: &MorphableModel) -> Vec<u8> {
    let n = model.n_vertices();
    let (s, m, l) = (model.shape_dim(), model.expr_dim(), model.n_landmarks());
    let mut out = Vec::with_capacity(8 + 4 + 32 + 8 * (3 * n * (1 + s + m) + m) + 4 * l);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in [n, s, m, l] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let floats = model
        .mean_shape()
        .iter()
        .chain(model.shape_basis().as_slice())
        .chain(model.expr_basis().as_slice())
        .chain(model.expr_stddev().iter());
    for v in floats {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &i in model.landmark_indices() {
        out.extend_from_slice(&(i as u32).to_le_bytes());
    }
    if let Some(tris) = model.triangles() {
        out.extend_from_slice(&(tris.len() as u64).to_le_bytes());
        for v in tris.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::parse(format!(
                "file truncated while reading {what} at byte {} ({} bytes total)",
                self.pos,
                self.buf.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = count
            .checked_mul(8)
            .ok_or_else(|| Error::parse(format!("{what}: size overflow")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn u32s(&mut self, count: usize, what: &str) -> Result<Vec<u32>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::parse(format!("{what}: size overflow")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<MorphableModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::parse("missing EXPR3DMM magic"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let mut dims = [0usize; 4];
    for (d, name) in dims.iter_mut().zip(["n", "s", "m", "L"]) {
        *d = usize::try_from(r.u64(name)?).map_err(|_| Error::parse(format!("dimension {name} too large")))?;
    }
    let [n, s, m, l] = dims;
    let rows = n
        .checked_mul(3)
        .ok_or_else(|| Error::parse("dimension n too large"))?;
    let mean = r.f64s(rows, "mean_shape")?;
    let shape = r.f64s(rows.saturating_mul(s), "shape_basis")?;
    let expr = r.f64s(rows.saturating_mul(m), "expr_basis")?;
    let stddev = r.f64s(m, "expr_stddev")?;
    let landmarks = r.u32s(l, "landmark_indices")?;
    let triangles = if r.remaining() > 0 {
        let t = usize::try_from(r.u64("triangle count")?).map_err(|_| Error::parse("triangle count too large"))?;
        let flat = r.u32s(t.saturating_mul(3), "triangles")?;
        if r.remaining() > 0 {
            return Err(Error::parse(format!("{} trailing bytes after triangle list", r.remaining())));
        }
        Some(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    } else {
        None
    };

    let model = MorphableModel::new(
        DVector::from_vec(mean),
        DMatrix::from_vec(rows, s, shape),
        DMatrix::from_vec(rows, m, expr),
        DVector::from_vec(stddev),
        landmarks.into_iter().map(|i| i as usize).collect(),
    )?;
    match triangles {
        Some(t) => model.with_triangles(t),
        None => Ok(model),
    }
}

fn from_json(text: &str) -> Result<MorphableModel> {
    let j: ModelJson = serde_json::from_str(text).map_err(|e| Error::parse(format!("model JSON: {e}")))?;
    if j.format != "EXPR3DMM" {
        return Err(Error::parse(format!("unexpected format tag {:?}", j.format)));
    }
    if j.version != FORMAT_VERSION {
        return Err(Error::Version { found: j.version, expected: FORMAT_VERSION });
    }
    let rows = 3 * j.n_vertices;
    let check = |what: &str, got: usize, want: usize| {
        if got == want {
            Ok(())
        } else {
            Err(Error::Inconsistent(format!("{what} has {got} entries, declared dimensions imply {want}")))
        }
    };
    check("mean_shape", j.mean_shape.len(), rows)?;
    check("shape_basis columns", j.shape_basis.len(), j.s)?;
    check("expr_basis columns", j.expr_basis.len(), j.m)?;
    check("expr_stddev", j.expr_stddev.len(), j.m)?;
    for (k, c) in j.shape_basis.iter().enumerate() {
        check(&format!("shape_basis column {k}"), c.len(), rows)?;
    }
    for (k, c) in j.expr_basis.iter().enumerate() {
        check(&format!("expr_basis column {k}"), c.len(), rows)?;
    }
    let shape = DMatrix::from_vec(rows, j.s, j.shape_basis.concat());
    let expr = DMatrix::from_vec(rows, j.m, j.expr_basis.concat());
    let model = MorphableModel::new(
        DVector::from_vec(j.mean_shape),
        shape,
        expr,
        DVector::from_vec(j.expr_stddev),
        j.landmark_indices.into_iter().map(|i| i as usize).collect(),
    )?;
    match j.triangles {
        Some(t) => model.with_triangles(t),
        None => Ok(model),
    }
}

pub fn to_json(model: &MorphableModel) -> Result<String> {
    let cols = |m: &DMatrix<f64>| m.column_iter().map(|c| c.iter().copied().collect()).collect();
    let j = ModelJson {
        format: "EXPR3DMM".into(),
        version: FORMAT_VERSION,
        n_vertices: model.n_vertices(),
        s: model.shape_dim(),
        m: model.expr_dim(),
        mean_shape: model.mean_shape().iter().copied().collect(),
        shape_basis: cols(model.shape_basis()),
        expr_basis: cols(model.expr_basis()),
        expr_stddev: model.expr_stddev().iter().copied().collect(),
        landmark_indices: model.landmark_indices().iter().map(|&i| i as u32).collect(),
        triangles: model.triangles().map(|t| t.to_vec()),
    };
    Ok(serde_json::to_string(&j)?)
}

/// Load a binary model file, or its JSON mirror when the file starts with `{`.
pub fn load_model(path: &Path) -> Result<MorphableModel> {
    let bytes = fsutil::read(path)?;
    if bytes.starts_with(MAGIC) {
        return from_bytes(&bytes);
    }
    let first = bytes.iter().find(|b| !b.is_ascii_whitespace());
    if first == Some(&b'{') {
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::parse("model JSON is not UTF-8"))?;
        return from_json(text);
    }
    from_bytes(&bytes)
}

pub fn save_model(model: &MorphableModel, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &to_bytes(model))
}

pub fn save_model_json(model: &MorphableModel, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, to_json(model)?.as_bytes())
}
