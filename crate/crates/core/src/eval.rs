//! Emotion-classification protocol over expression coefficients: pooled
//! clip features, kNN, leave-one-clip-out, confusion matrices and the
//! accuracy-versus-resolution sweep.

use std::fmt::Write as _;

use nalgebra::{DVector, Vector2};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{fmt_num, Dataset, Frame, Protocol};
use crate::datagen::pool_shape_coefficients;
use crate::error::{Error, Result};
use crate::fitter::{fit_expression, FitterConfig};
use crate::image::GrayImage;
use crate::model::{ExpressionCoeffs, MorphableModel, ShapeCoeffs};
use crate::projection::{projection_matrix, Landmarks2D};
use crate::regressor::{forward, preprocess, DatasetMean, RegressorNet};
use crate::seed;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_SCALES: [f64; 5] = [1.0, 0.8, 0.6, 0.4, 0.2];
/// Detector noise at full resolution for the landmark strategy, pixels.
pub const DEFAULT_SIGMA0: f64 = 0.5;

/// Average of per-frame coefficients.
pub fn clip_feature(etas: &[ExpressionCoeffs]) -> Result<DVector<f64>> {
    let first = etas.first().ok_or_else(|| Error::validation("clip has no frame estimates"))?;
    if etas.iter().any(|e| e.len() != first.len()) {
        return Err(Error::contract("frame estimates differ in length"));
    }
    let mut sum = DVector::zeros(first.len());
    for e in etas {
        sum += &e.0;
    }
    Ok(sum / etas.len() as f64)
}

/// Majority vote among the `k` nearest training points (Euclidean).
///
/// Equal distances rank the lower training index first. When several
/// classes share the top vote count, the class of the nearest neighbour
/// among them wins.
pub fn knn_classify(train: &[DVector<f64>], labels: &[usize], query: &DVector<f64>, k: usize) -> Result<usize> {
    if train.is_empty() {
        return Err(Error::validation("kNN needs a non-empty training set"));
    }
    if labels.len() != train.len() {
        return Err(Error::contract("one label per training point required"));
    }
    if k == 0 || k > train.len() {
        return Err(Error::validation(format!("K = {k} must be between 1 and the training size {}", train.len())));
    }
    let mut ranked: Vec<(f64, usize)> = train.iter().enumerate().map(|(i, x)| ((x - query).norm_squared(), i)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let nearest = &ranked[..k];

    let n_classes = nearest.iter().map(|&(_, i)| labels[i]).max().unwrap() + 1;
    let mut votes = vec![0usize; n_classes];
    for &(_, i) in nearest {
        votes[labels[i]] += 1;
    }
    let top = *votes.iter().max().unwrap();
    Ok(nearest.iter().map(|&(_, i)| labels[i]).find(|&c| votes[c] == top).unwrap())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeature {
    pub clip_id: usize,
    pub label: usize,
    pub feature: DVector<f64>,
}

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let c = classes.len();
        ConfusionMatrix { classes, counts: vec![vec![0; c]; c] }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.trace() as f64 / t as f64,
        }
    }

    pub fn is_diagonal(&self) -> bool {
        self.counts.iter().enumerate().all(|(i, row)| row.iter().enumerate().all(|(j, &v)| i == j || v == 0))
    }

    pub fn counts_csv(&self) -> String {
        let mut s = format!("true\\predicted,{}\n", self.classes.join(","));
        for (name, row) in self.classes.iter().zip(&self.counts) {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(s, "{name},{}", cells.join(","));
        }
        s
    }

    pub fn rates_csv(&self) -> String {
        let mut s = format!("true\\predicted,{}\n", self.classes.join(","));
        for (name, row) in self.classes.iter().zip(confusion_to_rates(self)) {
            let cells: Vec<String> = row.into_iter().map(fmt_num).collect();
            let _ = writeln!(s, "{name},{}", cells.join(","));
        }
        s
    }
}

/// Row-normalized confusion matrix; empty rows stay zero.
pub fn confusion_to_rates(cm: &ConfusionMatrix) -> Vec<Vec<f64>> {
    cm.counts
        .iter()
        .map(|row| {
            let sum: u64 = row.iter().sum();
            row.iter().map(|&v| if sum == 0 { 0.0 } else { v as f64 / sum as f64 }).collect()
        })
        .collect()
}

/// Classifies every clip against all the others.
///
/// Clips are ordered by id before anything else, so the result does not
/// depend on input order. `k` is capped at the number of remaining clips.
pub fn leave_one_clip_out(features: &[ClipFeature], classes: &[String], k: usize) -> Result<(f64, ConfusionMatrix)> {
    if features.len() < 2 {
        return Err(Error::validation(format!("leave-one-clip-out needs at least 2 clips, got {}", features.len())));
    }
    if let Some(f) = features.iter().find(|f| f.label >= classes.len()) {
        return Err(Error::validation(format!("clip {} has label {} outside the class list", f.clip_id, f.label)));
    }
    let mut sorted: Vec<&ClipFeature> = features.iter().collect();
    sorted.sort_by_key(|f| f.clip_id);
    let k = k.min(sorted.len() - 1);

    let predictions: Result<Vec<usize>> = (0..sorted.len())
        .into_par_iter()
        .map(|held| {
            let (mut train, mut labels) = (Vec::with_capacity(sorted.len() - 1), Vec::with_capacity(sorted.len() - 1));
            for (i, f) in sorted.iter().enumerate() {
                if i != held {
                    train.push(f.feature.clone());
                    labels.push(f.label);
                }
            }
            knn_classify(&train, &labels, &sorted[held].feature, k)
        })
        .collect();
    let mut cm = ConfusionMatrix::new(classes.to_vec());
    for (f, p) in sorted.iter().zip(predictions?) {
        cm.counts[f.label][p] += 1;
    }
    Ok((cm.accuracy(), cm))
}

/// Bilinear resize to `round(side·factor)` per axis (at least 1 pixel).
pub fn downscale_image(image: &GrayImage, factor: f64) -> Result<GrayImage> {
    let (w, h) = scaled_size(image, factor)?;
    image.resize(w, h)
}

fn scaled_size(image: &GrayImage, factor: f64) -> Result<(usize, usize)> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::validation(format!("scale factor {factor} must lie in (0, 1]")));
    }
    let side = |n: usize| ((n as f64 * factor).round() as usize).max(1);
    Ok((side(image.width()), side(image.height())))
}

/// What a strategy sees for one frame at one scale.
pub struct FrameInput<'a> {
    pub original: &'a Frame,
    /// Image downscaled, landmarks, box and intrinsics mapped to match.
    pub scaled: &'a Frame,
    pub scale: f64,
    /// Shape estimate pooled over the frame's clip.
    pub clip_alpha: &'a ShapeCoeffs,
}

/// Maps a frame to expression coefficients.
pub trait ExpressionStrategy: Sync {
    fn name(&self) -> &str;
    fn extract(&self, input: &FrameInput) -> Result<ExpressionCoeffs>;
}

/// Returns the stored ground truth, ignoring the pixels.
pub struct GroundTruthStrategy;

impl ExpressionStrategy for GroundTruthStrategy {
    fn name(&self) -> &str {
        "ground_truth"
    }

    fn extract(&self, input: &FrameInput) -> Result<ExpressionCoeffs> {
        input.original.eta_true.clone().ok_or_else(|| Error::validation(format!("frame {} has no ground truth", input.original.id)))
    }
}

/// Landmark fitting on the scaled frame. Detector degradation is modeled by
/// Gaussian noise of `sigma0 / scale` pixels on every landmark coordinate.
pub struct LandmarkFitStrategy<'a> {
    pub model: &'a MorphableModel,
    pub config: FitterConfig,
    pub sigma0: f64,
    pub seed: u64,
}

impl ExpressionStrategy for LandmarkFitStrategy<'_> {
    fn name(&self) -> &str {
        "landmark_fit"
    }

    fn extract(&self, input: &FrameInput) -> Result<ExpressionCoeffs> {
        let f = input.scaled;
        let sigma = self.sigma0 / input.scale;
        let landmarks = if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).map_err(|e| Error::validation(e.to_string()))?;
            let mut rng = seed::derived_rng(self.seed, &format!("eval/detector@{}", input.scale), f.id as u64);
            Landmarks2D {
                points: f.landmarks.points.iter().map(|p| p + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng))).collect(),
            }
        } else {
            f.landmarks.clone()
        };
        let pi = projection_matrix(&f.pose, &f.intrinsics)?;
        Ok(fit_expression(self.model, input.clip_alpha, &pi, &landmarks, &self.config)?.eta)
    }
}

/// Direct regression on the scaled image after resampling it back to the
/// original resolution.
pub struct RegressorStrategy<'a> {
    pub net: &'a RegressorNet,
    pub mean: DatasetMean,
}

impl ExpressionStrategy for RegressorStrategy<'_> {
    fn name(&self) -> &str {
        "regressor"
    }

    fn extract(&self, input: &FrameInput) -> Result<ExpressionCoeffs> {
        let o = input.original;
        let restored = input.scaled.image.resize(o.image.width(), o.image.height())?;
        forward(self.net, &preprocess(&restored, &o.bbox, self.net.input_side, &self.mean)?)
    }
}

/// Frames feeding a clip's feature under the dataset protocol.
pub fn protocol_frames(frames: &[Frame], protocol: Protocol) -> &[Frame] {
    match protocol {
        Protocol::PeakFrame => &frames[frames.len().saturating_sub(1)..],
        Protocol::AllFrames => frames,
    }
}

/// Pooled clip shape: mean of the per-image estimates, zero if none.
pub fn clip_alpha(model: &MorphableModel, frames: &[Frame]) -> Result<ShapeCoeffs> {
    let est: Vec<ShapeCoeffs> = frames.iter().filter_map(|f| f.alpha.clone()).collect();
    if est.is_empty() {
        Ok(ShapeCoeffs::zeros(model.shape_dim()))
    } else {
        pool_shape_coefficients(&est)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaledClip {
    pub id: usize,
    pub label: usize,
    pub alpha: ShapeCoeffs,
    /// `(original, scaled)` frames selected by the protocol.
    pub frames: Vec<(Frame, Frame)>,
}

/// Selects protocol frames and rescales them coherently.
pub fn scale_dataset(model: &MorphableModel, dataset: &Dataset, scale: f64) -> Result<Vec<ScaledClip>> {
    dataset.validate_labeled()?;
    dataset
        .clips
        .par_iter()
        .map(|clip| {
            let frames = protocol_frames(&clip.frames, dataset.protocol)
                .iter()
                .map(|f| {
                    let (w, h) = scaled_size(&f.image, scale)?;
                    Ok((f.clone(), f.rescaled(w, h)?))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ScaledClip {
                id: clip.id,
                label: dataset.class_index(clip.label.as_deref().unwrap_or_default()).unwrap(),
                alpha: clip_alpha(model, &clip.frames)?,
                frames,
            })
        })
        .collect()
}

/// Per-clip features from one strategy. Failing frames are skipped and
/// counted; clips with no usable frame are dropped.
pub fn extract_features(clips: &[ScaledClip], strategy: &dyn ExpressionStrategy, scale: f64) -> (Vec<ClipFeature>, usize) {
    let jobs: Vec<(usize, usize)> = clips.iter().enumerate().flat_map(|(c, clip)| (0..clip.frames.len()).map(move |f| (c, f))).collect();
    let results: Vec<Result<ExpressionCoeffs>> = jobs
        .par_iter()
        .map(|&(c, f)| {
            let (original, scaled) = &clips[c].frames[f];
            strategy.extract(&FrameInput { original, scaled, scale, clip_alpha: &clips[c].alpha })
        })
        .collect();
    let mut per_clip: Vec<Vec<ExpressionCoeffs>> = vec![Vec::new(); clips.len()];
    let mut skipped = 0;
    for (&(c, f), r) in jobs.iter().zip(results) {
        match r {
            Ok(eta) => per_clip[c].push(eta),
            Err(e) => {
                log::debug!("{}: frame {} skipped: {e}", strategy.name(), clips[c].frames[f].0.id);
                skipped += 1;
            }
        }
    }
    let features = clips
        .iter()
        .zip(per_clip)
        .filter_map(|(clip, etas)| {
            clip_feature(&etas).ok().map(|feature| ClipFeature { clip_id: clip.id, label: clip.label, feature })
        })
        .collect();
    (features, skipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub scale: f64,
    pub method: String,
    pub accuracy: f64,
    pub skipped_frames: usize,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSweepResult {
    /// Descending, starting at 1.0.
    pub scales: Vec<f64>,
    pub methods: Vec<String>,
    /// Scale-major: every method at `scales[0]`, then `scales[1]`, ...
    pub cells: Vec<SweepCell>,
}

impl ScaleSweepResult {
    pub fn accuracy(&self, method: &str, scale: f64) -> Option<f64> {
        self.cells.iter().find(|c| c.method == method && c.scale == scale).map(|c| c.accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("scale,method,accuracy,skipped_frames\n");
        for c in &self.cells {
            let _ = writeln!(s, "{},{},{},{}", c.scale, c.method, fmt_num(c.accuracy), c.skipped_frames);
        }
        s
    }

    /// Line chart of accuracy against scale, one polyline per method.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 420.0;
        const L: f64 = 70.0;
        const R: f64 = 160.0;
        const T: f64 = 30.0;
        const B: f64 = 60.0;
        const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
        let (pw, ph) = (W - L - R, H - T - B);
        // scale 1.0 on the left, decreasing to the right
        let smin = self.scales.iter().copied().fold(1.0, f64::min);
        let span = if smin < 1.0 { 1.0 - smin } else { 1.0 };
        let x = |s: f64| L + (1.0 - s) / span * pw;
        let y = |a: f64| T + (1.0 - a) * ph;

        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<line x1="{L}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, T + ph, L + pw, T + ph);
        let _ = writeln!(s, r#"<line x1="{L}" y1="{T}" x2="{L}" y2="{}" stroke="black"/>"#, T + ph);
        for i in 0..=5 {
            let a = i as f64 / 5.0;
            let _ = writeln!(s, r#"<line x1="{}" y1="{:.2}" x2="{L}" y2="{:.2}" stroke="black"/>"#, L - 5.0, y(a), y(a));
            let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{:.1}</text>"#, L - 8.0, y(a) + 4.0, a);
        }
        for &sc in &self.scales {
            let _ = writeln!(s, r#"<line x1="{:.2}" y1="{}" x2="{:.2}" y2="{}" stroke="black"/>"#, x(sc), T + ph, x(sc), T + ph + 5.0);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{sc}</text>"#, x(sc), T + ph + 20.0);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">scale</text>"#, L + pw / 2.0, H - 15.0);
        let _ = writeln!(
            s,
            r#"<text x="20" y="{}" text-anchor="middle" transform="rotate(-90 20 {})">accuracy</text>"#,
            T + ph / 2.0,
            T + ph / 2.0
        );
        for (mi, method) in self.methods.iter().enumerate() {
            let color = COLORS[mi % COLORS.len()];
            let pts: Vec<String> = self
                .scales
                .iter()
                .filter_map(|&sc| self.accuracy(method, sc).map(|a| format!("{:.2},{:.2}", x(sc), y(a))))
                .collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
            let ly = T + 10.0 + 20.0 * mi as f64;
            let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, W - R + 15.0, W - R + 40.0);
            let _ = writeln!(s, r#"<text x="{}" y="{}">{method}</text>"#, W - R + 45.0, ly + 4.0);
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Runs every strategy at every scale and scores leave-one-clip-out kNN.
pub fn scale_sweep(
    model: &MorphableModel,
    dataset: &Dataset,
    strategies: &[&dyn ExpressionStrategy],
    scales: &[f64],
    k: usize,
) -> Result<ScaleSweepResult> {
    if scales.is_empty() || scales[0] != 1.0 || scales.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::validation(format!("scales must be strictly descending from 1.0, got {scales:?}")));
    }
    let mut cells = Vec::new();
    for &scale in scales {
        let clips = scale_dataset(model, dataset, scale)?;
        for strategy in strategies {
            let (features, skipped) = extract_features(&clips, *strategy, scale);
            let (accuracy, confusion) = if features.len() >= 2 {
                leave_one_clip_out(&features, &dataset.classes, k)?
            } else {
                log::warn!("{} at scale {scale}: fewer than 2 clips have features", strategy.name());
                (0.0, ConfusionMatrix::new(dataset.classes.clone()))
            };
            log::info!("scale {scale} {}: accuracy {accuracy:.4} ({skipped} frames skipped)", strategy.name());
            cells.push(SweepCell { scale, method: strategy.name().to_string(), accuracy, skipped_frames: skipped, confusion });
        }
    }
    Ok(ScaleSweepResult {
        scales: scales.to_vec(),
        methods: strategies.iter().map(|s| s.name().to_string()).collect(),
        cells,
    })
}
