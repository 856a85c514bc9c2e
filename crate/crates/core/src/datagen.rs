//! Synthetic data: identities, poses, expressions, splat-rendered frames,
//! per-subject shape pooling and landmark-fitted expression labels.
//!
//! Every frame draws from its own derived random stream, so generation runs
//! in parallel and still matches a sequential run exactly.

use std::collections::BTreeMap;

use nalgebra::{DVector, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Clip, Dataset, Frame, Protocol};
use crate::error::{Error, Result};
use crate::fitter::{batch_fit, FitItem, FitterConfig};
use crate::image::{GrayImage, Rect};
use crate::model::{as_points, landmark_positions, synthesize, ExpressionCoeffs, MorphableModel, ShapeCoeffs};
use crate::projection::{project, projection_matrix, CameraIntrinsics, Landmarks2D, Pose6DoF};
use crate::seed;

/// Blob width of the splat renderer, pixels.
pub const SPLAT_SIGMA: f64 = 1.5;
/// Sampled truths stay inside this fraction of the constraint box.
pub const TRUTH_BOX_FRACTION: f64 = 0.9;
pub const BOX_FACTOR: f64 = 3.0;

pub const EMOTIONS: [&str; 7] = ["angry", "contempt", "disgust", "fear", "happy", "sad", "surprise"];

/// Uniform sampling intervals for head pose. Angles in radians, translation
/// in model units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRanges {
    pub pitch: [f64; 2],
    pub yaw: [f64; 2],
    pub roll: [f64; 2],
    pub tx: [f64; 2],
    pub ty: [f64; 2],
    pub tz: [f64; 2],
}

impl Default for PoseRanges {
    fn default() -> Self {
        PoseRanges {
            pitch: [-0.2, 0.2],
            yaw: [-0.3, 0.3],
            roll: [-0.15, 0.15],
            tx: [-1.5, 1.5],
            ty: [-1.5, 1.5],
            tz: [55.0, 65.0],
        }
    }
}

impl PoseRanges {
    pub fn fixed(pose: Pose6DoF) -> Self {
        let [p, y, r] = pose.rotation;
        let [x, yy, z] = pose.translation;
        PoseRanges { pitch: [p, p], yaw: [y, y], roll: [r, r], tx: [x, x], ty: [yy, yy], tz: [z, z] }
    }

    fn validate(&self) -> Result<()> {
        let all = [self.pitch, self.yaw, self.roll, self.tx, self.ty, self.tz];
        if all.iter().any(|[lo, hi]| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
            return Err(Error::validation(format!("malformed pose ranges {self:?}")));
        }
        if self.tz[0] <= 0.0 {
            return Err(Error::validation("pose range puts the subject behind the camera (tz <= 0)"));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Pose6DoF {
        let mut draw = |[lo, hi]: [f64; 2]| if lo == hi { lo } else { rng.random_range(lo..=hi) };
        Pose6DoF::new(
            [draw(self.pitch), draw(self.yaw), draw(self.roll)],
            [draw(self.tx), draw(self.ty), draw(self.tz)],
        )
    }
}

/// Square image with the principal point at its centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSetup {
    pub image_size: usize,
    pub focal: f64,
}

impl Default for CameraSetup {
    fn default() -> Self {
        CameraSetup { image_size: 160, focal: 240.0 }
    }
}

impl CameraSetup {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        let c = self.image_size as f64 / 2.0;
        CameraIntrinsics::new(self.focal, [c, c])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub subjects: usize,
    pub frames_per_subject: usize,
    pub poses: PoseRanges,
    pub camera: CameraSetup,
    /// Pixel noise added to observed landmarks.
    pub landmark_noise_sigma: f64,
    /// Noise on each per-image shape estimate.
    pub alpha_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            subjects: 10,
            frames_per_subject: 10,
            poses: PoseRanges::default(),
            camera: CameraSetup::default(),
            landmark_noise_sigma: 0.0,
            alpha_noise_sigma: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSubject {
    pub subject_id: usize,
    pub alpha_true: ShapeCoeffs,
    pub alpha_estimates: Vec<ShapeCoeffs>,
}

fn gaussian_vec(rng: &mut impl Rng, len: usize, sigma: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    })
}

fn check_sigma(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::validation(format!("{name} must be finite and non-negative, got {v}")));
    }
    Ok(())
}

/// Identities and their per-image noisy shape estimates.
pub fn sample_subjects(model: &MorphableModel, config: &SampleConfig) -> Result<Vec<SyntheticSubject>> {
    check_sigma("alpha noise", config.alpha_noise_sigma)?;
    let s = model.shape_dim();
    Ok((0..config.subjects)
        .map(|i| {
            let mut rng = seed::derived_rng(config.seed, "datagen/subject", i as u64);
            let alpha_true = gaussian_vec(&mut rng, s, 1.0);
            let alpha_estimates = (0..config.frames_per_subject)
                .map(|f| {
                    let k = (i * config.frames_per_subject + f) as u64;
                    let mut rng = seed::derived_rng(config.seed, "datagen/alpha-estimate", k);
                    ShapeCoeffs(&alpha_true + gaussian_vec(&mut rng, s, config.alpha_noise_sigma))
                })
                .collect();
            SyntheticSubject { subject_id: i, alpha_true: ShapeCoeffs(alpha_true), alpha_estimates }
        })
        .collect())
}

/// Expression drawn uniformly inside `TRUTH_BOX_FRACTION` of the box.
pub fn sample_expression(model: &MorphableModel, rng: &mut impl Rng) -> ExpressionCoeffs {
    let b = model.expr_bounds(BOX_FACTOR * TRUTH_BOX_FRACTION);
    ExpressionCoeffs(b.map(|bj| rng.random_range(-bj..=bj)))
}

/// Splat rendering: every projected vertex deposits a Gaussian blob whose
/// weight falls from 1 at the nearest vertex depth to 0.35 at the farthest.
/// Blobs are cut off at `4σ` and shifted down to reach zero there, which
/// keeps the raster continuous in the vertex positions. The result is
/// divided by its maximum.
pub fn render_frame(
    model: &MorphableModel,
    alpha: &ShapeCoeffs,
    eta: &ExpressionCoeffs,
    pose: &Pose6DoF,
    intrinsics: &CameraIntrinsics,
    width: usize,
    height: usize,
) -> Result<GrayImage> {
    let shape = synthesize(model, alpha, eta)?;
    let pi = projection_matrix(pose, intrinsics)?;
    let points = as_points(&shape.0);
    let pixels = project(&pi, &points)?;
    let depths: Vec<f64> = points.iter().map(|p| pi.apply(p).z).collect();
    let neutral = synthesize(model, alpha, &ExpressionCoeffs::zeros(model.expr_dim()))?;
    let neutral_depths = as_points(&neutral.0).iter().map(|p| pi.apply(p).z).collect::<Vec<_>>();
    let near = neutral_depths.iter().copied().fold(f64::INFINITY, f64::min);
    let far = neutral_depths.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = far - near;

    let mut img = GrayImage::filled(width, height, 0.0);
    let cutoff = 4.0 * SPLAT_SIGMA;
    let reach = cutoff.ceil() as isize + 1;
    let inv2s2 = 1.0 / (2.0 * SPLAT_SIGMA * SPLAT_SIGMA);
    let floor = (-cutoff * cutoff * inv2s2).exp();
    for (p, &z) in pixels.points.iter().zip(&depths) {
        let shade = if span > 1e-12 { (0.35 + 0.65 * (far - z) / span).clamp(0.35, 1.0) } else { 1.0 };
        let (c0, r0) = (p.x.floor() as isize, p.y.floor() as isize);
        for r in (r0 - reach).max(0)..=(r0 + reach).min(height as isize - 1) {
            let dy = r as f64 + 0.5 - p.y;
            for c in (c0 - reach).max(0)..=(c0 + reach).min(width as isize - 1) {
                let dx = c as f64 + 0.5 - p.x;
                let d2 = dx * dx + dy * dy;
                if d2 < cutoff * cutoff {
                    img.data_mut()[r as usize * width + c as usize] += shade * ((-d2 * inv2s2).exp() - floor);
                }
            }
        }
    }
    let max = img.data().iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        img.data_mut().iter_mut().for_each(|v| *v /= max);
    }
    Ok(img)
}

fn bounding_rect(points: &[Vector2<f64>]) -> Rect {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    Rect::new(x0, y0, x1 - x0, y1 - y0)
}

struct FrameJob<'a> {
    id: usize,
    subject: usize,
    alpha_true: &'a ShapeCoeffs,
    alpha_estimate: ShapeCoeffs,
    eta: ExpressionCoeffs,
    pose: Pose6DoF,
}

/// Renders one frame and observes its landmarks. Landmarks must land at
/// positive depth and inside the image, otherwise the pose range is
/// rejected as infeasible.
fn build_frame(
    model: &MorphableModel,
    job: FrameJob,
    camera: &CameraSetup,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Result<Frame> {
    let intrinsics = camera.intrinsics();
    let side = camera.image_size;
    let infeasible = |why: String| Error::validation(format!("infeasible pose range: frame {} {why}", job.id));

    let pi = projection_matrix(&job.pose, &intrinsics)?;
    let shape = synthesize(model, job.alpha_true, &job.eta)?;
    let neutral = synthesize(model, job.alpha_true, &ExpressionCoeffs::zeros(model.expr_dim()))?;
    let all = project(&pi, &as_points(&neutral.0)).map_err(|e| infeasible(e.to_string()))?;
    let exact = project(&pi, &landmark_positions(model, &shape)?).map_err(|e| infeasible(e.to_string()))?;
    let inside = |p: &Vector2<f64>| p.x >= 0.0 && p.y >= 0.0 && p.x <= side as f64 && p.y <= side as f64;
    if let Some(i) = exact.points.iter().position(|p| !inside(p)) {
        return Err(infeasible(format!("landmark {i} projects outside the {side}x{side} image")));
    }
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::validation(e.to_string()))?;
    let landmarks = Landmarks2D {
        points: exact.points.iter().map(|p| p + Vector2::new(noise.sample(rng), noise.sample(rng))).collect(),
    };
    let image = render_frame(model, job.alpha_true, &job.eta, &job.pose, &intrinsics, side, side)?;
    Ok(Frame {
        id: job.id,
        subject: Some(job.subject),
        image,
        bbox: bounding_rect(&all.points),
        landmarks,
        pose: job.pose,
        intrinsics,
        eta_true: Some(job.eta),
        alpha: Some(job.alpha_estimate),
    })
}

/// `subjects × frames_per_subject` frames; frame `k` belongs to subject
/// `k / frames_per_subject`.
pub fn sample_frames(model: &MorphableModel, config: &SampleConfig) -> Result<Vec<Frame>> {
    config.poses.validate()?;
    check_sigma("landmark noise", config.landmark_noise_sigma)?;
    let subjects = sample_subjects(model, config)?;
    let fps = config.frames_per_subject;
    (0..config.subjects * fps)
        .into_par_iter()
        .map(|k| {
            let subject = &subjects[k / fps];
            let mut rng = seed::derived_rng(config.seed, "datagen/frame", k as u64);
            let pose = config.poses.sample(&mut rng);
            let eta = sample_expression(model, &mut rng);
            let job = FrameJob {
                id: k,
                subject: subject.subject_id,
                alpha_true: &subject.alpha_true,
                alpha_estimate: subject.alpha_estimates[k % fps].clone(),
                eta,
                pose,
            };
            build_frame(model, job, &config.camera, config.landmark_noise_sigma, &mut rng)
        })
        .collect()
}

/// Elementwise mean of per-image shape estimates.
pub fn pool_shape_coefficients(estimates: &[ShapeCoeffs]) -> Result<ShapeCoeffs> {
    let first = estimates.first().ok_or_else(|| Error::validation("no shape estimates to pool"))?;
    if estimates.iter().any(|e| e.len() != first.len()) {
        return Err(Error::validation("shape estimates have different lengths"));
    }
    let mut sum = DVector::zeros(first.len());
    for e in estimates {
        sum += &e.0;
    }
    Ok(ShapeCoeffs(sum / estimates.len() as f64))
}

#[derive(Debug, Clone, Default)]
pub struct LabelReport {
    /// `(frame id, fitted coefficients)` in input order.
    pub labels: Vec<(usize, ExpressionCoeffs)>,
    /// Frames whose fit failed, with the reason.
    pub skipped: Vec<(usize, String)>,
    /// Fit wall time per labeled frame.
    pub seconds: Vec<f64>,
}

/// Pooled shape per subject. Frames without a subject form their own group;
/// groups with no per-image estimates use the mean shape (zero `alpha`).
pub fn pooled_alphas(model: &MorphableModel, frames: &[Frame]) -> Result<Vec<ShapeCoeffs>> {
    let mut groups: BTreeMap<Option<usize>, Vec<ShapeCoeffs>> = BTreeMap::new();
    for f in frames {
        if let (Some(s), Some(a)) = (f.subject, &f.alpha) {
            groups.entry(Some(s)).or_default().push(a.clone());
        }
    }
    let mut pooled = BTreeMap::new();
    for (k, v) in &groups {
        pooled.insert(*k, pool_shape_coefficients(v)?);
    }
    Ok(frames
        .iter()
        .map(|f| match f.subject {
            Some(s) => pooled.get(&Some(s)).cloned(),
            None => f.alpha.clone(),
        })
        .map(|a| a.unwrap_or_else(|| ShapeCoeffs::zeros(model.shape_dim())))
        .collect())
}

/// Labels every frame by fitting its landmarks under its own pose with the
/// subject's pooled shape. Failing frames are skipped and reported.
pub fn generate_labels(model: &MorphableModel, frames: &[Frame], config: &FitterConfig) -> Result<LabelReport> {
    config.validate()?;
    let alphas = pooled_alphas(model, frames)?;
    let mut report = LabelReport::default();
    let mut items = Vec::with_capacity(frames.len());
    let mut item_frames = Vec::with_capacity(frames.len());
    for (f, alpha) in frames.iter().zip(alphas) {
        match projection_matrix(&f.pose, &f.intrinsics) {
            Ok(pi) => {
                items.push(FitItem { alpha, pi, landmarks: f.landmarks.clone() });
                item_frames.push(f.id);
            }
            Err(e) => report.skipped.push((f.id, e.to_string())),
        }
    }
    for (id, entry) in item_frames.into_iter().zip(batch_fit(model, &items, config)) {
        match entry.result {
            Ok(fit) => {
                report.labels.push((id, fit.eta));
                report.seconds.push(entry.seconds);
            }
            Err(e) => report.skipped.push((id, e.to_string())),
        }
    }
    let order: BTreeMap<usize, usize> = frames.iter().enumerate().map(|(i, f)| (f.id, i)).collect();
    report.skipped.sort_by_key(|(id, _)| order[id]);
    Ok(report)
}

/// Seven class anchors in whitened coefficient units (`eta_j / delta_j`)
/// plus the within-class spread used when sampling clips.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionPrototypeSet {
    pub classes: Vec<String>,
    pub anchors: Vec<DVector<f64>>,
    pub sigma_class: f64,
}

/// Anchor components are drawn from `U(±ANCHOR_SPREAD)` in whitened units.
pub const ANCHOR_SPREAD: f64 = 2.0;
pub const DEFAULT_SIGMA_CLASS: f64 = 0.3;

impl EmotionPrototypeSet {
    /// Anchors must be pairwise further apart than `4·sigma_class`.
    pub fn new(classes: Vec<String>, anchors: Vec<DVector<f64>>, sigma_class: f64) -> Result<Self> {
        check_sigma("sigma_class", sigma_class)?;
        if classes.len() != anchors.len() || classes.len() < 2 {
            return Err(Error::validation("need one anchor per class and at least two classes"));
        }
        for i in 0..anchors.len() {
            for j in 0..i {
                let d = (&anchors[i] - &anchors[j]).norm();
                if d <= 4.0 * sigma_class {
                    return Err(Error::validation(format!(
                        "anchors {j} and {i} are {d:.3} apart, need more than 4·sigma_class = {}",
                        4.0 * sigma_class
                    )));
                }
            }
        }
        Ok(EmotionPrototypeSet { classes, anchors, sigma_class })
    }

    pub fn seeded(model: &MorphableModel, seed: u64, sigma_class: f64) -> Result<Self> {
        let mut rng = seed::derived_rng(seed, "datagen/prototypes", 0);
        let m = model.expr_dim();
        let anchors = EMOTIONS
            .iter()
            .map(|_| DVector::from_fn(m, |_, _| rng.random_range(-ANCHOR_SPREAD..=ANCHOR_SPREAD)))
            .collect();
        EmotionPrototypeSet::new(EMOTIONS.iter().map(|s| s.to_string()).collect(), anchors, sigma_class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub clips_per_class: usize,
    pub frames_per_clip: usize,
    pub poses: PoseRanges,
    pub camera: CameraSetup,
    pub landmark_noise_sigma: f64,
    pub alpha_noise_sigma: f64,
    /// Per-frame expression jitter, whitened units.
    pub frame_jitter: f64,
    pub protocol: Protocol,
    pub seed: u64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            clips_per_class: 20,
            frames_per_clip: 5,
            poses: PoseRanges::default(),
            camera: CameraSetup::default(),
            landmark_noise_sigma: 0.0,
            alpha_noise_sigma: 0.05,
            frame_jitter: 0.1,
            protocol: Protocol::AllFrames,
            seed: 0,
        }
    }
}

/// Emotion-labeled clips. Clip `c` shows class `c / clips_per_class` on its
/// own identity; each frame's expression is anchor + clip offset + frame
/// jitter, scaled by `delta` and clamped into the truth box.
pub fn make_emotion_clips(model: &MorphableModel, prototypes: &EmotionPrototypeSet, config: &ClipConfig) -> Result<Dataset> {
    if config.clips_per_class == 0 || config.frames_per_clip == 0 {
        return Err(Error::validation("clips_per_class and frames_per_clip must be positive"));
    }
    config.poses.validate()?;
    check_sigma("landmark noise", config.landmark_noise_sigma)?;
    check_sigma("alpha noise", config.alpha_noise_sigma)?;
    check_sigma("frame jitter", config.frame_jitter)?;
    let m = model.expr_dim();
    if prototypes.anchors.iter().any(|a| a.len() != m) {
        return Err(Error::contract(format!("prototype anchors must have length m = {m}")));
    }
    let delta = model.expr_stddev().clone();
    let bound = model.expr_bounds(BOX_FACTOR * TRUTH_BOX_FRACTION);
    let s = model.shape_dim();
    let fpc = config.frames_per_clip;
    let n_clips = prototypes.classes.len() * config.clips_per_class;

    let clips: Result<Vec<Clip>> = (0..n_clips)
        .into_par_iter()
        .map(|c| {
            let class = c / config.clips_per_class;
            let mut rng = seed::derived_rng(config.seed, "datagen/clip", c as u64);
            let alpha_true = ShapeCoeffs(gaussian_vec(&mut rng, s, 1.0));
            let offset = gaussian_vec(&mut rng, m, prototypes.sigma_class);
            let base = &prototypes.anchors[class] + offset;
            let frames = (0..fpc)
                .map(|f| {
                    let id = c * fpc + f;
                    let mut rng = seed::derived_rng(config.seed, "datagen/clip-frame", id as u64);
                    let white = &base + gaussian_vec(&mut rng, m, config.frame_jitter);
                    let eta = white.component_mul(&delta).zip_map(&bound, |v, b| v.clamp(-b, b));
                    let alpha_estimate = ShapeCoeffs(&alpha_true.0 + gaussian_vec(&mut rng, s, config.alpha_noise_sigma));
                    let pose = config.poses.sample(&mut rng);
                    let job = FrameJob {
                        id,
                        subject: c,
                        alpha_true: &alpha_true,
                        alpha_estimate,
                        eta: ExpressionCoeffs(eta),
                        pose,
                    };
                    build_frame(model, job, &config.camera, config.landmark_noise_sigma, &mut rng)
                })
                .collect::<Result<Vec<Frame>>>()?;
            Ok(Clip { id: c, label: Some(prototypes.classes[class].clone()), frames })
        })
        .collect();
    Ok(Dataset { classes: prototypes.classes.clone(), protocol: config.protocol, clips: clips? })
}
