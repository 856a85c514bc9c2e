//! Linear morphable face model: `S' = mean + S·alpha + E·eta`.
//!
//! Vertex data is interleaved (`x0, y0, z0, x1, ...`), so every basis matrix
//! has `3n` rows. The rows belonging to landmark vertices are copied into a
//! small cached affine map at construction time; the fitter only ever
//! touches those.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;

pub mod io;

pub use io::{load_model, save_model, save_model_json};

pub const DEFAULT_SHAPE_DIM: usize = 99;
pub const DEFAULT_EXPR_DIM: usize = 29;

/// Identity-shape coefficients (`alpha`).
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCoeffs(pub DVector<f64>);

/// Expression coefficients (`eta`).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionCoeffs(pub DVector<f64>);

/// Synthesized vertex positions, same layout as the model's mean shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape3D(pub DVector<f64>);

macro_rules! coeff_vec {
    ($ty:ident) => {
        impl $ty {
            pub fn zeros(len: usize) -> Self {
                $ty(DVector::zeros(len))
            }

            pub fn from_vec(v: Vec<f64>) -> Self {
                $ty(DVector::from_vec(v))
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn as_slice(&self) -> &[f64] {
                self.0.as_slice()
            }
        }
    };
}

coeff_vec!(ShapeCoeffs);
coeff_vec!(ExpressionCoeffs);
coeff_vec!(Shape3D);

/// Landmark rows of the model, `mean + shape·alpha + expr·eta` restricted to
/// `3L` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkBasis {
    pub mean: DVector<f64>,
    pub shape: DMatrix<f64>,
    pub expr: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    mean_shape: DVector<f64>,
    shape_basis: DMatrix<f64>,
    expr_basis: DMatrix<f64>,
    expr_stddev: DVector<f64>,
    landmark_indices: Vec<usize>,
    triangles: Option<Vec<[u32; 3]>>,
    landmark_basis: LandmarkBasis,
}

impl MorphableModel {
    /// Validates every invariant and caches the landmark-restricted bases.
    pub fn new(
        mean_shape: DVector<f64>,
        shape_basis: DMatrix<f64>,
        expr_basis: DMatrix<f64>,
        expr_stddev: DVector<f64>,
        landmark_indices: Vec<usize>,
    ) -> Result<Self> {
        let rows = mean_shape.len();
        if rows == 0 || rows % 3 != 0 {
            return Err(Error::validation(format!(
                "mean_shape length {rows} is not a positive multiple of 3"
            )));
        }
        let n = rows / 3;
        if shape_basis.nrows() != rows {
            return Err(Error::validation(format!(
                "shape_basis has {} rows, expected 3n = {rows}",
                shape_basis.nrows()
            )));
        }
        if expr_basis.nrows() != rows {
            return Err(Error::validation(format!(
                "expr_basis has {} rows, expected 3n = {rows}",
                expr_basis.nrows()
            )));
        }
        let m = expr_basis.ncols();
        if expr_stddev.len() != m {
            return Err(Error::validation(format!(
                "expr_stddev has length {}, expected m = {m}",
                expr_stddev.len()
            )));
        }
        if let Some(j) = expr_stddev.iter().position(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::validation(format!(
                "expr_stddev must be strictly positive: entry {j} is {}",
                expr_stddev[j]
            )));
        }
        let all_finite = mean_shape.iter().all(|v| v.is_finite())
            && shape_basis.iter().all(|v| v.is_finite())
            && expr_basis.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::validation("model arrays contain non-finite values"));
        }
        let mut seen = HashSet::with_capacity(landmark_indices.len());
        for &i in &landmark_indices {
            if i >= n {
                return Err(Error::validation(format!(
                    "landmark index {i} out of range for {n} vertices"
                )));
            }
            if !seen.insert(i) {
                return Err(Error::validation(format!("landmark index {i} repeated")));
            }
        }
        // 2L residuals must be able to pin down m unknowns.
        if 2 * landmark_indices.len() < m {
            return Err(Error::validation(format!(
                "{} landmarks cannot constrain {m} expression components",
                landmark_indices.len()
            )));
        }

        let landmark_basis = restrict_rows(&mean_shape, &shape_basis, &expr_basis, &landmark_indices);
        Ok(MorphableModel {
            mean_shape,
            shape_basis,
            expr_basis,
            expr_stddev,
            landmark_indices,
            triangles: None,
            landmark_basis,
        })
    }

    /// Attach a triangle list (0-based vertex indices) used only for mesh export.
    pub fn with_triangles(mut self, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = self.n_vertices() as u32;
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&v| v >= n)) {
            return Err(Error::validation(format!(
                "triangle {t:?} references a vertex outside 0..{n}"
            )));
        }
        self.triangles = Some(triangles);
        Ok(self)
    }

    pub fn n_vertices(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_basis.ncols()
    }

    pub fn expr_dim(&self) -> usize {
        self.expr_basis.ncols()
    }

    pub fn n_landmarks(&self) -> usize {
        self.landmark_indices.len()
    }

    pub fn mean_shape(&self) -> &DVector<f64> {
        &self.mean_shape
    }

    pub fn shape_basis(&self) -> &DMatrix<f64> {
        &self.shape_basis
    }

    pub fn expr_basis(&self) -> &DMatrix<f64> {
        &self.expr_basis
    }

    pub fn expr_stddev(&self) -> &DVector<f64> {
        &self.expr_stddev
    }

    pub fn landmark_indices(&self) -> &[usize] {
        &self.landmark_indices
    }

    pub fn triangles(&self) -> Option<&[[u32; 3]]> {
        self.triangles.as_deref()
    }

    pub fn landmark_basis(&self) -> &LandmarkBasis {
        &self.landmark_basis
    }

    /// Per-component bound `factor·δ_j`.
    pub fn expr_bounds(&self, factor: f64) -> DVector<f64> {
        self.expr_stddev.map(|d| factor * d)
    }

    pub(crate) fn check_coeffs(&self, alpha: &ShapeCoeffs, eta: &ExpressionCoeffs) -> Result<()> {
        if alpha.len() != self.shape_dim() {
            return Err(Error::contract(format!(
                "alpha has length {}, model shape dimension s = {}",
                alpha.len(),
                self.shape_dim()
            )));
        }
        if eta.len() != self.expr_dim() {
            return Err(Error::contract(format!(
                "eta has length {}, model expression dimension m = {}",
                eta.len(),
                self.expr_dim()
            )));
        }
        Ok(())
    }

    /// Landmark-restricted synthesis: the `3L` coordinates of the landmark
    /// vertices, without touching the other rows.
    pub fn landmark_shape(&self, alpha: &ShapeCoeffs, eta: &ExpressionCoeffs) -> Result<DVector<f64>> {
        self.check_coeffs(alpha, eta)?;
        let lb = &self.landmark_basis;
        let mut out = lb.mean.clone();
        out.gemv(1.0, &lb.shape, &alpha.0, 1.0);
        out.gemv(1.0, &lb.expr, &eta.0, 1.0);
        Ok(out)
    }
}

fn restrict_rows(
    mean: &DVector<f64>,
    shape: &DMatrix<f64>,
    expr: &DMatrix<f64>,
    indices: &[usize],
) -> LandmarkBasis {
    let rows: Vec<usize> = indices.iter().flat_map(|&v| [3 * v, 3 * v + 1, 3 * v + 2]).collect();
    LandmarkBasis {
        mean: DVector::from_iterator(rows.len(), rows.iter().map(|&r| mean[r])),
        shape: shape.select_rows(rows.iter()),
        expr: expr.select_rows(rows.iter()),
    }
}

/// `mean_shape + shape_basis·alpha + expr_basis·eta`.
pub fn synthesize(model: &MorphableModel, alpha: &ShapeCoeffs, eta: &ExpressionCoeffs) -> Result<Shape3D> {
    model.check_coeffs(alpha, eta)?;
    let mut v = model.mean_shape.clone();
    v.gemv(1.0, &model.shape_basis, &alpha.0, 1.0);
    v.gemv(1.0, &model.expr_basis, &eta.0, 1.0);
    Ok(Shape3D(v))
}

/// 3D coordinates of the landmark vertices, in `landmark_indices` order.
pub fn landmark_positions(model: &MorphableModel, shape: &Shape3D) -> Result<Vec<Vector3<f64>>> {
    if shape.len() != model.mean_shape.len() {
        return Err(Error::contract(format!(
            "shape has {} coordinates, model has 3n = {}",
            shape.len(),
            model.mean_shape.len()
        )));
    }
    let v = &shape.0;
    Ok(model
        .landmark_indices
        .iter()
        .map(|&i| Vector3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]))
        .collect())
}

/// Split an interleaved coordinate vector into points.
pub fn as_points(coords: &DVector<f64>) -> Vec<Vector3<f64>> {
    coords
        .as_slice()
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect()
}

// Face patch half-extents in model units; the patch faces -z (towards a
// camera looking down +z).
const FACE_RX: f64 = 8.0;
const FACE_RY: f64 = 10.0;
const FACE_RZ: f64 = 6.0;
const EXPR_STDDEV0: f64 = 0.7;
const EXPR_DECAY: f64 = 0.9;
const SHAPE_SCALE0: f64 = 0.5;
const SHAPE_DECAY: f64 = 0.85;
const BUMPS_PER_FIELD: usize = 4;

/// Seeded desk-scale stand-in for a real face basis.
///
/// The mean shape is a frontal ellipsoid patch with a nose bump. Basis
/// columns start as smooth random displacement fields (sums of Gaussian
/// bumps over the face parameterization, narrowing with column index), are
/// orthonormalized jointly (expression columns first) and rescaled to
/// geometrically decaying norms. `expr_stddev_j = |E_j| / sqrt(3n)`.
pub fn make_synthetic_model(seed: u64, n: usize, s: usize, m: usize, l: usize) -> Result<MorphableModel> {
    if n == 0 || m == 0 {
        return Err(Error::contract("synthetic model needs n > 0 and m > 0"));
    }
    if l > n {
        return Err(Error::contract(format!("L = {l} landmarks exceeds n = {n} vertices")));
    }
    if m > 3 * l {
        return Err(Error::contract(format!("m = {m} exceeds 3L = {}", 3 * l)));
    }
    if s + m > 3 * n {
        return Err(Error::contract(format!(
            "s + m = {} orthogonal columns do not fit in 3n = {} coordinates",
            s + m,
            3 * n
        )));
    }

    let mut rng = seed::derived_rng(seed, "model/mean", 0);
    let mut uv = Vec::with_capacity(n);
    while uv.len() < n {
        let u: f64 = rng.random_range(-1.0..1.0);
        let v: f64 = rng.random_range(-1.0..1.0);
        if u * u + v * v <= 1.0 {
            uv.push((u, v));
        }
    }
    let mut mean = DVector::zeros(3 * n);
    for (i, &(u, v)) in uv.iter().enumerate() {
        let r2 = u * u + v * v;
        let nose = 0.35 * (-(u * u + (v - 0.05) * (v - 0.05)) / 0.02).exp();
        mean[3 * i] = FACE_RX * u;
        mean[3 * i + 1] = FACE_RY * v;
        mean[3 * i + 2] = -FACE_RZ * ((1.0 - r2).max(0.0).sqrt() + nose);
    }

    let rows = 3 * n;
    let mut raw = DMatrix::zeros(rows, m + s);
    let mut rng = seed::derived_rng(seed, "model/basis", 0);
    for c in 0..m + s {
        let width = if c < m { 0.6 * 0.93f64.powi(c as i32) } else { 0.7 * 0.9f64.powi((c - m) as i32) };
        for axis in 0..3 {
            let bumps: Vec<(f64, f64, f64)> = (0..BUMPS_PER_FIELD)
                .map(|_| {
                    let cu = rng.random_range(-1.0..1.0);
                    let cv = rng.random_range(-1.0..1.0);
                    let a: f64 = StandardNormal.sample(&mut rng);
                    (cu, cv, a)
                })
                .collect();
            for (i, &(u, v)) in uv.iter().enumerate() {
                let val: f64 = bumps
                    .iter()
                    .map(|&(cu, cv, a)| a * (-((u - cu).powi(2) + (v - cv).powi(2)) / (2.0 * width * width)).exp())
                    .sum();
                raw[(3 * i + axis, c)] = val;
            }
        }
    }
    let q = orthonormal_columns(raw)?;

    let root = (rows as f64).sqrt();
    let mut expr_basis = DMatrix::zeros(rows, m);
    for j in 0..m {
        let scale = root * EXPR_STDDEV0 * EXPR_DECAY.powi(j as i32);
        expr_basis.set_column(j, &(q.column(j) * scale));
    }
    let mut shape_basis = DMatrix::zeros(rows, s);
    for j in 0..s {
        let scale = root * SHAPE_SCALE0 * SHAPE_DECAY.powi(j as i32);
        shape_basis.set_column(j, &(q.column(m + j) * scale));
    }
    let expr_stddev = DVector::from_iterator(m, expr_basis.column_iter().map(|c| c.norm() / root));

    let mut rng = seed::derived_rng(seed, "model/landmarks", 0);
    let landmark_indices = index::sample(&mut rng, n, l).into_vec();

    MorphableModel::new(mean, shape_basis, expr_basis, expr_stddev, landmark_indices)
}

/// Modified Gram-Schmidt with one re-orthogonalization pass.
fn orthonormal_columns(mut a: DMatrix<f64>) -> Result<DMatrix<f64>> {
    for j in 0..a.ncols() {
        for _ in 0..2 {
            for k in 0..j {
                let proj = a.column(k).dot(&a.column(j));
                let qk = a.column(k).clone_owned();
                a.column_mut(j).axpy(-proj, &qk, 1.0);
            }
        }
        let norm = a.column(j).norm();
        if norm < 1e-10 {
            return Err(Error::validation(format!("basis column {j} is degenerate")));
        }
        a.column_mut(j).unscale_mut(norm);
    }
    Ok(a)
}
