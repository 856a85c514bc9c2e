//! Pinhole camera: `Π = K·[R | t]` and full perspective projection.
//!
//! Image coordinates put the origin at the top-left image corner with x to
//! the right and y down; pixel `(row, col)` covers `[col, col+1) × [row, row+1)`.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExpressionCoeffs, MorphableModel, ShapeCoeffs};

/// Smallest admissible third homogeneous coordinate.
pub const EPS_DEPTH: f64 = 1e-6;

/// Head pose. `rotation` holds (pitch, yaw, roll) in radians, composed as
/// intrinsic rotations in that order: `R = Rx(pitch)·Ry(yaw)·Rz(roll)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose6DoF {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal: f64,
    pub principal_point: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix(pub Matrix3x4<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct Landmarks2D {
    pub points: Vec<Vector2<f64>>,
}

impl Pose6DoF {
    pub fn new(rotation: [f64; 3], translation: [f64; 3]) -> Self {
        Pose6DoF { rotation, translation }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(&self.translation).all(|v| v.is_finite()) {
            return Err(Error::validation("pose has non-finite components"));
        }
        if self.translation[2] <= 0.0 {
            return Err(Error::contract(format!(
                "translation z = {} must be positive (subject in front of the camera)",
                self.translation[2]
            )));
        }
        Ok(())
    }
}

impl CameraIntrinsics {
    pub fn new(focal: f64, principal_point: [f64; 2]) -> Self {
        CameraIntrinsics { focal, principal_point }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let [cx, cy] = self.principal_point;
        Matrix3::new(self.focal, 0.0, cx, 0.0, self.focal, cy, 0.0, 0.0, 1.0)
    }

    /// Intrinsics for the same camera after the image is resampled by `(sx, sy)`.
    /// Focal length follows the horizontal factor.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        CameraIntrinsics {
            focal: self.focal * sx,
            principal_point: [self.principal_point[0] * sx, self.principal_point[1] * sy],
        }
    }
}

impl Landmarks2D {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.x.is_finite() && p.y.is_finite())
    }

    /// Stacked `(x0, y0, x1, y1, ...)`.
    pub fn to_stacked(&self) -> DVector<f64> {
        DVector::from_iterator(2 * self.len(), self.points.iter().flat_map(|p| [p.x, p.y]))
    }

    pub fn from_stacked(v: &DVector<f64>) -> Self {
        Landmarks2D {
            points: v.as_slice().chunks_exact(2).map(|c| Vector2::new(c[0], c[1])).collect(),
        }
    }
}

pub fn rotation_matrix(pose: &Pose6DoF) -> Matrix3<f64> {
    let [pitch, yaw, roll] = pose.rotation;
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cr, -sr, 0.0, sr, cr, 0.0, 0.0, 0.0, 1.0);
    rx * ry * rz
}

pub fn projection_matrix(pose: &Pose6DoF, intr: &CameraIntrinsics) -> Result<ProjectionMatrix> {
    pose.validate()?;
    if !(intr.focal > 0.0 && intr.focal.is_finite()) {
        return Err(Error::contract(format!("focal length {} must be positive", intr.focal)));
    }
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation_matrix(pose));
    rt.set_column(3, &Vector3::from(pose.translation));
    Ok(ProjectionMatrix(intr.matrix() * rt))
}

impl ProjectionMatrix {
    /// Homogeneous image of one point.
    #[inline]
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.0.fixed_view::<3, 3>(0, 0) * x + self.0.column(3)
    }
}

pub fn project(pi: &ProjectionMatrix, points: &[Vector3<f64>]) -> Result<Landmarks2D> {
    let mut out = Vec::with_capacity(points.len());
    for (index, x) in points.iter().enumerate() {
        let h = pi.apply(x);
        if !(h.z > EPS_DEPTH) {
            return Err(Error::Degenerate { index, depth: h.z });
        }
        out.push(Vector2::new(h.x / h.z, h.y / h.z));
    }
    Ok(Landmarks2D { points: out })
}

/// Projection of the model's landmarks as a function of `eta` alone, with
/// `alpha` and `Π` frozen. Used by the fitter for residuals and Jacobians.
#[derive(Debug, Clone)]
pub struct LandmarkProjector<'a> {
    pi: ProjectionMatrix,
    base: DVector<f64>,
    expr: &'a DMatrix<f64>,
    /// Rows of `Π[:, :3] · E_i`, three per landmark.
    projected_expr: DMatrix<f64>,
}

impl<'a> LandmarkProjector<'a> {
    pub fn new(model: &'a MorphableModel, pi: &ProjectionMatrix, alpha: &ShapeCoeffs) -> Result<Self> {
        if alpha.len() != model.shape_dim() {
            return Err(Error::contract(format!(
                "alpha has length {}, model shape dimension s = {}",
                alpha.len(),
                model.shape_dim()
            )));
        }
        let lb = model.landmark_basis();
        let mut base = lb.mean.clone();
        base.gemv(1.0, &lb.shape, &alpha.0, 1.0);
        let a = pi.0.fixed_view::<3, 3>(0, 0).into_owned();
        let l = model.n_landmarks();
        let m = model.expr_dim();
        let mut projected_expr = DMatrix::zeros(3 * l, m);
        for i in 0..l {
            let block = a * lb.expr.fixed_rows::<3>(3 * i);
            projected_expr.fixed_rows_mut::<3>(3 * i).copy_from(&block);
        }
        Ok(LandmarkProjector { pi: *pi, base, expr: &lb.expr, projected_expr })
    }

    pub fn n_landmarks(&self) -> usize {
        self.base.len() / 3
    }

    pub fn expr_dim(&self) -> usize {
        self.expr.ncols()
    }

    fn homogeneous(&self, eta: &DVector<f64>) -> Result<Vec<Vector3<f64>>> {
        if eta.len() != self.expr_dim() {
            return Err(Error::contract(format!(
                "eta has length {}, model expression dimension m = {}",
                eta.len(),
                self.expr_dim()
            )));
        }
        let mut coords = self.base.clone();
        coords.gemv(1.0, self.expr, eta, 1.0);
        let mut out = Vec::with_capacity(self.n_landmarks());
        for (index, c) in coords.as_slice().chunks_exact(3).enumerate() {
            let h = self.pi.apply(&Vector3::new(c[0], c[1], c[2]));
            if !(h.z > EPS_DEPTH) {
                return Err(Error::Degenerate { index, depth: h.z });
            }
            out.push(h);
        }
        Ok(out)
    }

    /// Stacked projected landmarks `(x0, y0, x1, y1, ...)`.
    pub fn project(&self, eta: &DVector<f64>) -> Result<DVector<f64>> {
        let h = self.homogeneous(eta)?;
        Ok(DVector::from_iterator(2 * h.len(), h.iter().flat_map(|h| [h.x / h.z, h.y / h.z])))
    }

    /// Projected landmarks and their `2L × m` Jacobian with respect to `eta`.
    pub fn project_with_jacobian(&self, eta: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let h = self.homogeneous(eta)?;
        let m = self.expr_dim();
        let mut proj = DVector::zeros(2 * h.len());
        let mut jac = DMatrix::zeros(2 * h.len(), m);
        for (i, h) in h.iter().enumerate() {
            let (u, v) = (h.x / h.z, h.y / h.z);
            proj[2 * i] = u;
            proj[2 * i + 1] = v;
            let inv = 1.0 / h.z;
            for j in 0..m {
                let d0 = self.projected_expr[(3 * i, j)];
                let d1 = self.projected_expr[(3 * i + 1, j)];
                let d2 = self.projected_expr[(3 * i + 2, j)];
                jac[(2 * i, j)] = (d0 - u * d2) * inv;
                jac[(2 * i + 1, j)] = (d1 - v * d2) * inv;
            }
        }
        Ok((proj, jac))
    }
}

/// `∂(projected landmark i, coordinate c) / ∂eta_j` at row `2i + c`, column `j`.
pub fn landmark_jacobian(
    model: &MorphableModel,
    pi: &ProjectionMatrix,
    alpha: &ShapeCoeffs,
    eta: &ExpressionCoeffs,
) -> Result<DMatrix<f64>> {
    model.check_coeffs(alpha, eta)?;
    let proj = LandmarkProjector::new(model, pi, alpha)?;
    Ok(proj.project_with_jacobian(&eta.0)?.1)
}
