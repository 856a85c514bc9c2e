//! Box-constrained expression fitting to 2D landmarks.
//!
//! Minimizes `‖p − Π S'(eta)‖₂` subject to `|eta_j| ≤ box_factor·δ_j` with a
//! damped Gauss-Newton iteration started at `eta = 0`:
//!
//! 1. Linearize the projected landmarks: residual `r = p − proj(eta)`,
//!    Jacobian `J = ∂proj/∂eta`.
//! 2. Components sitting on a bound whose gradient pushes further out are
//!    held fixed for this step; the rest solve `(JᵀJ + λI) Δ = Jᵀr`.
//! 3. The candidate `clamp(eta + tΔ)` is accepted for the first
//!    `t ∈ {1, ½, ¼, ...}` (at most 20 halvings) that does not increase the
//!    objective.
//!
//! Termination is checked in a fixed order: squared step norm below
//! `step_tol`, then relative objective decrease below `residual_tol`, then
//! the iteration cap. Shape coefficients and `Π` stay fixed throughout.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExpressionCoeffs, MorphableModel, ShapeCoeffs};
use crate::projection::{Landmarks2D, LandmarkProjector, ProjectionMatrix};

const MAX_HALVINGS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitterConfig {
    pub max_iters: usize,
    /// Threshold on the squared norm of the accepted step.
    pub step_tol: f64,
    /// Threshold on `(f_old − f_new) / f_old`.
    pub residual_tol: f64,
    /// Constant λ added to the diagonal of `JᵀJ`.
    pub damping: f64,
    /// Bound multiplier on `expr_stddev`.
    pub box_factor: f64,
    /// Record the objective after every accepted iteration.
    #[serde(default)]
    pub trace: bool,
}

impl Default for FitterConfig {
    fn default() -> Self {
        FitterConfig {
            max_iters: 50,
            step_tol: 1e-10,
            residual_tol: 1e-12,
            damping: 1e-6,
            box_factor: 3.0,
            trace: false,
        }
    }
}

impl FitterConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("step_tol", self.step_tol),
            ("residual_tol", self.residual_tol),
            ("damping", self.damping),
            ("box_factor", self.box_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("fitter {name} must be positive, got {v}")));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::validation("fitter max_iters must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    StepTol,
    ResidualTol,
    /// No halving of the step kept the objective from increasing.
    LineSearch,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub eta: ExpressionCoeffs,
    /// Final `‖p − Π S'‖₂` in pixels.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    /// Components with `|eta_j| == box_factor·δ_j`.
    pub active_constraints: Vec<usize>,
    /// Objective at start and after each accepted iteration, when requested.
    pub trace: Option<Vec<f64>>,
}

fn check_landmarks(model: &MorphableModel, p: &Landmarks2D) -> Result<()> {
    if p.len() != model.n_landmarks() {
        return Err(Error::contract(format!(
            "{} landmarks given, model defines {}",
            p.len(),
            model.n_landmarks()
        )));
    }
    if !p.is_finite() {
        return Err(Error::validation("landmarks contain non-finite coordinates"));
    }
    Ok(())
}

/// Euclidean norm of the stacked `2L` landmark differences.
pub fn residual_norm(
    model: &MorphableModel,
    alpha: &ShapeCoeffs,
    eta: &ExpressionCoeffs,
    pi: &ProjectionMatrix,
    p: &Landmarks2D,
) -> Result<f64> {
    model.check_coeffs(alpha, eta)?;
    check_landmarks(model, p)?;
    let proj = LandmarkProjector::new(model, pi, alpha)?;
    Ok((p.to_stacked() - proj.project(&eta.0)?).norm())
}

fn clamp_into(x: &DVector<f64>, bounds: &DVector<f64>) -> DVector<f64> {
    x.zip_map(bounds, |v, b| v.clamp(-b, b))
}

pub fn fit_expression(
    model: &MorphableModel,
    alpha: &ShapeCoeffs,
    pi: &ProjectionMatrix,
    p: &Landmarks2D,
    config: &FitterConfig,
) -> Result<FitResult> {
    config.validate()?;
    check_landmarks(model, p)?;
    let m = model.expr_dim();
    let projector = LandmarkProjector::new(model, pi, alpha)?;
    let bounds = model.expr_bounds(config.box_factor);
    let target = p.to_stacked();

    let mut eta = DVector::zeros(m);
    let (pred, mut jac) = projector.project_with_jacobian(&eta)?;
    let mut residual = &target - pred;
    let mut objective = residual.norm();
    let mut trace = config.trace.then(|| vec![objective]);
    let mut iterations = 0;
    let mut termination = Termination::MaxIters;

    let objective_at = |x: &DVector<f64>| -> Option<(f64, DVector<f64>)> {
        projector.project(x).ok().map(|pred| {
            let r = &target - pred;
            (r.norm(), r)
        })
    };

    while iterations < config.max_iters {
        let grad = jac.tr_mul(&residual);
        let free: Vec<usize> = (0..m)
            .filter(|&j| {
                let pinned_hi = eta[j] >= bounds[j] && grad[j] > 0.0;
                let pinned_lo = eta[j] <= -bounds[j] && grad[j] < 0.0;
                !(pinned_hi || pinned_lo)
            })
            .collect();

        let mut step = DVector::zeros(m);
        if !free.is_empty() {
            let jf = jac.select_columns(free.iter());
            let mut normal: DMatrix<f64> = jf.tr_mul(&jf);
            for k in 0..free.len() {
                normal[(k, k)] += config.damping;
            }
            let rhs = DVector::from_iterator(free.len(), free.iter().map(|&j| grad[j]));
            let chol = normal
                .cholesky()
                .ok_or_else(|| Error::Solver("damped normal equations are not positive definite".into()))?;
            let delta = chol.solve(&rhs);
            for (k, &j) in free.iter().enumerate() {
                step[j] = delta[k];
            }
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = clamp_into(&(&eta + &step * t), &bounds);
            if let Some((obj, r)) = objective_at(&cand) {
                if obj <= objective {
                    accepted = Some((cand, obj, r));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cand, new_obj, new_residual)) = accepted else {
            termination = Termination::LineSearch;
            break;
        };

        let step_sq = (&cand - &eta).norm_squared();
        let rel_decrease = if objective > 0.0 { (objective - new_obj) / objective } else { 0.0 };
        eta = cand;
        objective = new_obj;
        residual = new_residual;
        iterations += 1;
        if let Some(tr) = trace.as_mut() {
            tr.push(objective);
        }

        if step_sq < config.step_tol {
            termination = Termination::StepTol;
            break;
        }
        if rel_decrease < config.residual_tol {
            termination = Termination::ResidualTol;
            break;
        }
        if iterations < config.max_iters {
            let (pred, j) = projector.project_with_jacobian(&eta)?;
            residual = &target - pred;
            jac = j;
        }
    }

    let active_constraints = (0..m).filter(|&j| eta[j].abs() == bounds[j]).collect();
    Ok(FitResult {
        eta: ExpressionCoeffs(eta),
        objective,
        iterations,
        converged: termination != Termination::MaxIters,
        termination,
        active_constraints,
        trace,
    })
}

/// One fitting job: fixed shape, camera and observed landmarks.
#[derive(Debug, Clone)]
pub struct FitItem {
    pub alpha: ShapeCoeffs,
    pub pi: ProjectionMatrix,
    pub landmarks: Landmarks2D,
}

#[derive(Debug)]
pub struct BatchEntry {
    pub result: Result<FitResult>,
    pub seconds: f64,
}

/// Fits every item independently. Runs on the ambient rayon pool; results
/// keep input order and do not depend on the thread count.
pub fn batch_fit(model: &MorphableModel, items: &[FitItem], config: &FitterConfig) -> Vec<BatchEntry> {
    items
        .par_iter()
        .map(|item| {
            let start = Instant::now();
            let result = fit_expression(model, &item.alpha, &item.pi, &item.landmarks, config);
            BatchEntry { result, seconds: start.elapsed().as_secs_f64() }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{landmark_positions, make_synthetic_model, synthesize};
    use crate::projection::{project, projection_matrix, CameraIntrinsics, Pose6DoF};
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera() -> ProjectionMatrix {
        projection_matrix(&Pose6DoF::new([0.05, -0.1, 0.02], [0.5, -0.3, 60.0]), &CameraIntrinsics::new(600.0, [80.0, 80.0]))
            .unwrap()
    }

    fn observe(model: &MorphableModel, alpha: &ShapeCoeffs, eta: &ExpressionCoeffs, pi: &ProjectionMatrix) -> Landmarks2D {
        let shape = synthesize(model, alpha, eta).unwrap();
        project(pi, &landmark_positions(model, &shape).unwrap()).unwrap()
    }

    fn inside_box(model: &MorphableModel, rng: &mut ChaCha8Rng, frac: f64) -> ExpressionCoeffs {
        let b = model.expr_bounds(3.0);
        ExpressionCoeffs(b.map(|bj| rng.random_range(-frac * bj..frac * bj)))
    }

    #[test]
    fn exact_landmarks_have_zero_residual() {
        let model = make_synthetic_model(19, 100, 5, 6, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let alpha = ShapeCoeffs::from_vec((0..5).map(|_| rng.random_range(-1.0..1.0)).collect());
        let eta = inside_box(&model, &mut rng, 0.8);
        let pi = camera();
        let p = observe(&model, &alpha, &eta, &pi);
        assert!(residual_norm(&model, &alpha, &eta, &pi, &p).unwrap() <= 1e-10);
    }

    #[test]
    fn single_offset_landmark_is_pythagorean() {
        let model = make_synthetic_model(19, 100, 5, 6, 20).unwrap();
        let (alpha, eta, pi) = (ShapeCoeffs::zeros(5), ExpressionCoeffs::zeros(6), camera());
        let mut p = observe(&model, &alpha, &eta, &pi);
        p.points[4] += Vector2::new(3.0, 4.0);
        assert!((residual_norm(&model, &alpha, &eta, &pi, &p).unwrap() - 5.0).abs() <= 1e-9);
    }

    #[test]
    fn residual_matches_scalar_accumulation() {
        let model = make_synthetic_model(19, 100, 5, 6, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let alpha = ShapeCoeffs::from_vec((0..5).map(|_| rng.random_range(-1.0..1.0)).collect());
        let eta = inside_box(&model, &mut rng, 1.0);
        let pi = camera();
        let p = Landmarks2D {
            points: (0..20).map(|_| Vector2::new(rng.random_range(0.0..160.0), rng.random_range(0.0..160.0))).collect(),
        };
        let shape = synthesize(&model, &alpha, &eta).unwrap();
        let mut acc = 0.0;
        for (k, &vi) in model.landmark_indices().iter().enumerate() {
            let x = [shape.0[3 * vi], shape.0[3 * vi + 1], shape.0[3 * vi + 2], 1.0];
            let h: Vec<f64> = (0..3).map(|r| (0..4).map(|c| pi.0[(r, c)] * x[c]).sum()).collect();
            let dx = p.points[k].x - h[0] / h[2];
            let dy = p.points[k].y - h[1] / h[2];
            acc += dx * dx + dy * dy;
        }
        let got = residual_norm(&model, &alpha, &eta, &pi, &p).unwrap();
        assert!((got - acc.sqrt()).abs() <= 1e-12 * acc.sqrt().max(1.0));
    }

    #[test]
    fn recovers_interior_expression() {
        let model = make_synthetic_model(23, 200, 8, 10, 30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let alpha = ShapeCoeffs::from_vec((0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        let truth = inside_box(&model, &mut rng, 0.9);
        let pi = camera();
        let p = observe(&model, &alpha, &truth, &pi);
        let fit = fit_expression(&model, &alpha, &pi, &p, &FitterConfig::default()).unwrap();
        assert!(fit.converged);
        assert!((&fit.eta.0 - &truth.0).amax() <= 1e-4, "{:?}", fit);
        assert!(fit.active_constraints.is_empty());
    }

    #[test]
    fn neutral_landmarks_fit_to_zero() {
        let model = make_synthetic_model(24, 150, 4, 8, 20).unwrap();
        let pi = camera();
        let p = observe(&model, &ShapeCoeffs::zeros(4), &ExpressionCoeffs::zeros(8), &pi);
        let fit = fit_expression(&model, &ShapeCoeffs::zeros(4), &pi, &p, &FitterConfig::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.eta.0.amax() <= 1e-6);
    }

    #[test]
    fn out_of_box_component_lands_on_bound() {
        let model = make_synthetic_model(25, 150, 4, 8, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut truth = inside_box(&model, &mut rng, 0.5);
        let d = model.expr_stddev();
        truth.0[2] = -5.0 * d[2];
        let pi = camera();
        let p = observe(&model, &ShapeCoeffs::zeros(4), &truth, &pi);
        let fit = fit_expression(&model, &ShapeCoeffs::zeros(4), &pi, &p, &FitterConfig::default()).unwrap();
        assert_eq!(fit.eta.0[2], -3.0 * d[2]);
        assert!(fit.active_constraints.contains(&2));
    }

    #[test]
    fn trace_is_monotone() {
        let model = make_synthetic_model(26, 150, 4, 8, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let truth = inside_box(&model, &mut rng, 1.6);
        let pi = camera();
        let mut p = observe(&model, &ShapeCoeffs::zeros(4), &truth, &pi);
        for q in &mut p.points {
            *q += Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        }
        let cfg = FitterConfig { trace: true, ..Default::default() };
        let fit = fit_expression(&model, &ShapeCoeffs::zeros(4), &pi, &p, &cfg).unwrap();
        let tr = fit.trace.unwrap();
        assert_eq!(tr.len(), fit.iterations + 1);
        assert!(tr.windows(2).all(|w| w[1] <= w[0]), "{tr:?}");
    }

    #[test]
    fn errors_are_classified() {
        let model = make_synthetic_model(27, 60, 3, 4, 10).unwrap();
        let pi = camera();
        let mut p = observe(&model, &ShapeCoeffs::zeros(3), &ExpressionCoeffs::zeros(4), &pi);
        p.points[0].x = f64::NAN;
        let cfg = FitterConfig::default();
        assert!(matches!(fit_expression(&model, &ShapeCoeffs::zeros(3), &pi, &p, &cfg), Err(Error::Validation(_))));

        let behind = projection_matrix(&Pose6DoF::new([0.0; 3], [0.0, 0.0, 1.0]), &CameraIntrinsics::new(500.0, [0.0, 0.0])).unwrap();
        let p = Landmarks2D { points: vec![Vector2::zeros(); 10] };
        assert!(matches!(fit_expression(&model, &ShapeCoeffs::zeros(3), &behind, &p, &cfg), Err(Error::Degenerate { .. })));

        let bad = FitterConfig { damping: 0.0, ..cfg };
        assert!(matches!(fit_expression(&model, &ShapeCoeffs::zeros(3), &pi, &p, &bad), Err(Error::Validation(_))));
    }

    #[test]
    fn fitting_is_deterministic() {
        let model = make_synthetic_model(28, 100, 4, 6, 15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let truth = inside_box(&model, &mut rng, 0.9);
        let pi = camera();
        let mut p = observe(&model, &ShapeCoeffs::zeros(4), &truth, &pi);
        p.points[3].x += 0.7;
        let cfg = FitterConfig::default();
        let a = fit_expression(&model, &ShapeCoeffs::zeros(4), &pi, &p, &cfg).unwrap();
        let b = fit_expression(&model, &ShapeCoeffs::zeros(4), &pi, &p, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_of_one_matches_single_call() {
        let model = make_synthetic_model(29, 100, 4, 6, 15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let truth = inside_box(&model, &mut rng, 0.9);
        let pi = camera();
        let p = observe(&model, &ShapeCoeffs::zeros(4), &truth, &pi);
        let cfg = FitterConfig::default();
        let single = fit_expression(&model, &ShapeCoeffs::zeros(4), &pi, &p, &cfg).unwrap();
        let batch = batch_fit(&model, &[FitItem { alpha: ShapeCoeffs::zeros(4), pi, landmarks: p }], &cfg);
        assert_eq!(batch.len(), 1);
        assert_eq!(batch[0].result.as_ref().unwrap(), &single);
        assert!(batch[0].seconds >= 0.0);
    }
}
