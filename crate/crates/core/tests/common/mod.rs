//! Helpers shared by the integration tests.
#![allow(dead_code)]

use expr3d::model::{landmark_positions, synthesize, ExpressionCoeffs, MorphableModel, ShapeCoeffs};
use expr3d::projection::{
    landmark_jacobian, project, projection_matrix, CameraIntrinsics, Landmarks2D, Pose6DoF, ProjectionMatrix,
};
use expr3d::regressor::preprocess::FaceRaster;
use expr3d::regressor::{loss_and_gradient, LayerKind, RegressorNet};
use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Below this magnitude derivatives are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random_batch(rng: &mut ChaCha8Rng, side: usize, m: usize, n: usize) -> Vec<(FaceRaster, ExpressionCoeffs)> {
    (0..n)
        .map(|_| {
            let x = DVector::from_fn(side * side, |_, _| rng.random_range(-1.0..1.0));
            let y = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
            (FaceRaster::new(side, x).unwrap(), ExpressionCoeffs(y))
        })
        .collect()
}

/// Sign pattern of every ReLU input over the batch.
fn relu_pattern(net: &RegressorNet, batch: &[(FaceRaster, ExpressionCoeffs)]) -> Vec<bool> {
    let mut pattern = Vec::new();
    for (x, _) in batch {
        let acts = net.activations(x).unwrap();
        for (layer, input) in net.layers.iter().zip(&acts) {
            if layer.kind() == LayerKind::Rectifier {
                pattern.extend(input.iter().map(|&v| v > 0.0));
            }
        }
    }
    pattern
}

/// Largest relative error between the analytic parameter gradient and
/// central differences with step `h`, over every weight and bias. A
/// parameter whose `±h` perturbation flips a ReLU is skipped: the loss is
/// not differentiable across that interval. Returns `(error, skipped)`.
pub fn max_gradient_error(net: &RegressorNet, batch: &[(FaceRaster, ExpressionCoeffs)], wd: f64, h: f64) -> (f64, usize) {
    let (_, grad) = loss_and_gradient(net, batch, wd).unwrap();
    let loss_at = |n: &RegressorNet| loss_and_gradient(n, batch, wd).unwrap().0;
    let base = relu_pattern(net, batch);
    let (mut worst, mut skipped) = (0.0f64, 0);
    let mut probe = net.clone();
    for (li, g) in grad.layers.iter().enumerate() {
        let Some(g) = g else { continue };
        for k in 0..g.weights.len() + g.bias.len() {
            let analytic = if k < g.weights.len() { g.weights.as_slice()[k] } else { g.bias[k - g.weights.len()] };
            let original = *param(&mut probe, li, k);
            *param(&mut probe, li, k) = original + h;
            let up = loss_at(&probe);
            let smooth_up = relu_pattern(&probe, batch) == base;
            *param(&mut probe, li, k) = original - h;
            let down = loss_at(&probe);
            let smooth_down = relu_pattern(&probe, batch) == base;
            *param(&mut probe, li, k) = original;
            if smooth_up && smooth_down {
                worst = worst.max(rel_err(analytic, (up - down) / (2.0 * h)));
            } else {
                skipped += 1;
            }
        }
    }
    (worst, skipped)
}

/// Parameter `k` of layer `li`: weights in storage order, then biases.
fn param(net: &mut RegressorNet, li: usize, k: usize) -> &mut f64 {
    let p = net.layers[li].params_mut().unwrap();
    let nw = p.weights.len();
    if k < nw {
        &mut p.weights.as_mut_slice()[k]
    } else {
        &mut p.bias[k - nw]
    }
}

/// Largest relative error of `landmark_jacobian` against central
/// differences of the projected landmarks.
pub fn max_jacobian_error(
    model: &MorphableModel,
    pi: &ProjectionMatrix,
    alpha: &ShapeCoeffs,
    eta: &ExpressionCoeffs,
    h: f64,
) -> f64 {
    let observe = |e: &ExpressionCoeffs| {
        let shape = synthesize(model, alpha, e).unwrap();
        project(pi, &landmark_positions(model, &shape).unwrap()).unwrap()
    };
    let jac = landmark_jacobian(model, pi, alpha, eta).unwrap();
    let mut worst = 0.0f64;
    for j in 0..eta.len() {
        let mut up = eta.clone();
        up.0[j] += h;
        let mut down = eta.clone();
        down.0[j] -= h;
        let (pu, pd) = (observe(&up), observe(&down));
        for i in 0..pu.points.len() {
            for c in 0..2 {
                let numeric = (pu.points[i][c] - pd.points[i][c]) / (2.0 * h);
                worst = worst.max(rel_err(jac[(2 * i + c, j)], numeric));
            }
        }
    }
    worst
}

/// Exhaustive reference: sort every training point by (distance, index),
/// count votes in the first `k`, break vote ties by the earliest-ranked class.
pub fn brute_force_knn(train: &[DVector<f64>], labels: &[usize], query: &DVector<f64>, k: usize) -> usize {
    let mut all: Vec<(f64, usize)> = train.iter().enumerate().map(|(i, x)| ((x - query).norm(), i)).collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut votes: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for &(_, i) in &all[..k] {
        *votes.entry(labels[i]).or_default() += 1;
    }
    let best = votes.values().copied().max().unwrap();
    all[..k].iter().map(|&(_, i)| labels[i]).find(|c| votes[c] == best).unwrap()
}

pub fn random_camera(rng: &mut ChaCha8Rng) -> ProjectionMatrix {
    let pose = Pose6DoF::new(
        [rng.random_range(-0.2..0.2), rng.random_range(-0.3..0.3), rng.random_range(-0.15..0.15)],
        [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(55.0..65.0)],
    );
    projection_matrix(&pose, &CameraIntrinsics::new(240.0, [80.0, 80.0])).unwrap()
}

pub fn random_alpha(rng: &mut ChaCha8Rng, s: usize) -> ShapeCoeffs {
    ShapeCoeffs(DVector::from_fn(s, |_, _| rng.random_range(-1.0..1.0)))
}

/// Uniform in the open box scaled by `frac`.
pub fn random_eta(model: &MorphableModel, rng: &mut ChaCha8Rng, frac: f64) -> ExpressionCoeffs {
    ExpressionCoeffs(model.expr_bounds(3.0 * frac).map(|b| rng.random_range(-b..b)))
}

pub fn observe(model: &MorphableModel, alpha: &ShapeCoeffs, eta: &ExpressionCoeffs, pi: &ProjectionMatrix) -> Landmarks2D {
    let shape = synthesize(model, alpha, eta).unwrap();
    project(pi, &landmark_positions(model, &shape).unwrap()).unwrap()
}
