//! Wavefront OBJ export of synthesized meshes.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::{synthesize, ExpressionCoeffs, MorphableModel, ShapeCoeffs};

/// One `v x y z` line per vertex at eight decimals, then 1-indexed `f`
/// lines when the model carries triangles.
pub fn obj_string(model: &MorphableModel, alpha: &ShapeCoeffs, eta: &ExpressionCoeffs) -> Result<String> {
    let shape = synthesize(model, alpha, eta)?;
    let mut s = String::with_capacity(40 * model.n_vertices());
    for c in shape.0.as_slice().chunks_exact(3) {
        let _ = writeln!(s, "v {:.8} {:.8} {:.8}", c[0], c[1], c[2]);
    }
    for t in model.triangles().unwrap_or_default() {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    Ok(s)
}

pub fn export_obj(model: &MorphableModel, alpha: &ShapeCoeffs, eta: &ExpressionCoeffs, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, obj_string(model, alpha, eta)?.as_bytes())
}

/// Vertex positions from OBJ text; everything but `v` lines is ignored.
pub fn parse_obj_vertices(text: &str) -> Result<Vec<Vector3<f64>>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        if it.next() != Some("v") {
            continue;
        }
        let nums: Vec<f64> = it
            .take(3)
            .map(|t| t.parse::<f64>().map_err(|_| Error::parse(format!("line {}: bad coordinate {t:?}", i + 1))))
            .collect::<Result<_>>()?;
        if nums.len() != 3 {
            return Err(Error::parse(format!("line {}: vertex needs 3 coordinates", i + 1)));
        }
        out.push(Vector3::new(nums[0], nums[1], nums[2]));
    }
    Ok(out)
}
