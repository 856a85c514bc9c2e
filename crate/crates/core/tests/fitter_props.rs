mod common;

use expr3d::fitter::{batch_fit, fit_expression, FitItem, FitterConfig};
use expr3d::model::{make_synthetic_model, ExpressionCoeffs};
use expr3d::projection::{projection_matrix, CameraIntrinsics, Pose6DoF, ProjectionMatrix};
use nalgebra::Vector2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn max_abs_diff(a: &ExpressionCoeffs, b: &ExpressionCoeffs) -> f64 {
    (&a.0 - &b.0).amax()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

#[test]
fn noiseless_identifiability_with_two_m_landmarks() {
    let model = make_synthetic_model(23, 300, 10, 29, 58).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let config = FitterConfig::default();
    for trial in 0..100 {
        let pi = common::random_camera(&mut rng);
        let alpha = common::random_alpha(&mut rng, 10);
        let truth = common::random_eta(&model, &mut rng, 1.0);
        let fit = fit_expression(&model, &alpha, &pi, &common::observe(&model, &alpha, &truth, &pi), &config).unwrap();
        let err = max_abs_diff(&fit.eta, &truth);
        assert!(err <= 1e-3, "trial {trial}: error {err:e}");
    }
}

#[test]
fn median_error_grows_with_landmark_noise() {
    let model = make_synthetic_model(42, 500, 20, 29, 68).unwrap();
    let config = FitterConfig::default();
    let mut medians = Vec::new();
    for sigma in [0.0, 0.5, 1.0, 2.0] {
        // same instances for every sigma, only the noise level changes
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let errs: Vec<f64> = (0..50)
            .map(|_| {
                let pi = common::random_camera(&mut rng);
                let alpha = common::random_alpha(&mut rng, 20);
                let truth = common::random_eta(&model, &mut rng, 0.9);
                let mut p = common::observe(&model, &alpha, &truth, &pi);
                if sigma > 0.0 {
                    let noise = Normal::new(0.0, sigma).unwrap();
                    for q in &mut p.points {
                        *q += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                    }
                }
                max_abs_diff(&fit_expression(&model, &alpha, &pi, &p, &config).unwrap().eta, &truth)
            })
            .collect();
        medians.push(median(errs));
    }
    assert!(medians.windows(2).all(|w| w[0] <= w[1]), "medians {medians:?}");
}

#[test]
fn batch_equals_sequential_calls() {
    let model = make_synthetic_model(29, 200, 8, 12, 30).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let config = FitterConfig::default();
    let items: Vec<FitItem> = (0..100)
        .map(|_| {
            let pi = common::random_camera(&mut rng);
            let alpha = common::random_alpha(&mut rng, 8);
            let eta = common::random_eta(&model, &mut rng, 1.2);
            let mut landmarks = common::observe(&model, &alpha, &eta, &pi);
            landmarks.points.iter_mut().for_each(|q| *q += Vector2::new(rng.random_range(-1.0..1.0), 0.0));
            FitItem { alpha, pi, landmarks }
        })
        .collect();
    let batch = batch_fit(&model, &items, &config);
    assert_eq!(batch.len(), 100);
    for (item, entry) in items.iter().zip(&batch) {
        let single = fit_expression(&model, &item.alpha, &item.pi, &item.landmarks, &config).unwrap();
        let got = entry.result.as_ref().unwrap();
        assert_eq!(got, &single);
        assert!(entry.seconds >= 0.0);
    }
}

#[test]
fn batch_isolates_a_degenerate_item() {
    let model = make_synthetic_model(29, 200, 8, 12, 30).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let config = FitterConfig::default();
    let mut items: Vec<FitItem> = (0..100)
        .map(|_| {
            let pi = common::random_camera(&mut rng);
            let alpha = common::random_alpha(&mut rng, 8);
            let landmarks = common::observe(&model, &alpha, &common::random_eta(&model, &mut rng, 0.5), &pi);
            FitItem { alpha, pi, landmarks }
        })
        .collect();
    // camera behind the face: every landmark at negative depth
    let behind = projection_matrix(&Pose6DoF::new([0.0; 3], [0.0, 0.0, 60.0]), &CameraIntrinsics::new(240.0, [80.0, 80.0])).unwrap();
    items[57].pi = ProjectionMatrix(-behind.0);
    let batch = batch_fit(&model, &items, &config);
    let failures: Vec<usize> = batch.iter().enumerate().filter(|(_, e)| e.result.is_err()).map(|(i, _)| i).collect();
    assert_eq!(failures, vec![57]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn result_always_inside_the_box(seed in any::<u64>(), scale in 0.2f64..2.5, box_factor in 0.5f64..4.0) {
        let model = make_synthetic_model(5, 120, 6, 10, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = common::random_camera(&mut rng);
        let alpha = common::random_alpha(&mut rng, 6);
        let eta = common::random_eta(&model, &mut rng, scale);
        let mut p = common::observe(&model, &alpha, &eta, &pi);
        p.points.iter_mut().for_each(|q| *q += Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)));
        let config = FitterConfig { box_factor, ..Default::default() };
        let fit = fit_expression(&model, &alpha, &pi, &p, &config).unwrap();
        let bounds = model.expr_bounds(box_factor);
        for j in 0..fit.eta.len() {
            prop_assert!(fit.eta.0[j].abs() <= bounds[j]);
            prop_assert_eq!(fit.active_constraints.contains(&j), fit.eta.0[j].abs() == bounds[j]);
        }
        prop_assert!(fit.objective >= 0.0);
    }

    #[test]
    fn traced_objective_never_increases(seed in any::<u64>()) {
        let model = make_synthetic_model(6, 120, 6, 10, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = common::random_camera(&mut rng);
        let alpha = common::random_alpha(&mut rng, 6);
        let mut p = common::observe(&model, &alpha, &common::random_eta(&model, &mut rng, 2.0), &pi);
        p.points.iter_mut().for_each(|q| *q += Vector2::new(rng.random_range(-2.0..2.0), 0.0));
        let fit = fit_expression(&model, &alpha, &pi, &p, &FitterConfig { trace: true, ..Default::default() }).unwrap();
        let trace = fit.trace.unwrap();
        prop_assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    }
}
