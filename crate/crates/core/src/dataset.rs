//! Frame and clip records plus the on-disk manifest format.
//!
//! A manifest is a JSON index listing clips and their frames. Each frame
//! points at a binary PGM image and a landmark CSV (one `x,y` row per
//! landmark) relative to the manifest's directory, and carries its pose,
//! intrinsics and face box inline. Optional CSV references hold ground-truth
//! expression coefficients and a per-image shape estimate.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::image::{GrayImage, Rect};
use crate::model::{ExpressionCoeffs, ShapeCoeffs};
use crate::projection::{CameraIntrinsics, Landmarks2D, Pose6DoF};

pub const MANIFEST_VERSION: u32 = 1;

/// Which frames of a clip enter its feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Only the last frame (the expression apex).
    PeakFrame,
    /// Average over every frame.
    #[default]
    AllFrames,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Stable id assigned when the dataset is created.
    pub id: usize,
    pub subject: Option<usize>,
    pub image: GrayImage,
    pub bbox: Rect,
    pub landmarks: Landmarks2D,
    pub pose: Pose6DoF,
    pub intrinsics: CameraIntrinsics,
    pub eta_true: Option<ExpressionCoeffs>,
    /// Per-image shape estimate, pooled per subject before fitting.
    pub alpha: Option<ShapeCoeffs>,
}

impl Frame {
    /// The same frame with its image resampled to `width × height` and every
    /// pixel-space quantity mapped accordingly.
    pub fn rescaled(&self, width: usize, height: usize) -> Result<Frame> {
        let sx = width as f64 / self.image.width() as f64;
        let sy = height as f64 / self.image.height() as f64;
        Ok(Frame {
            image: self.image.resize(width, height)?,
            bbox: self.bbox.scale(sx, sy),
            landmarks: Landmarks2D {
                points: self.landmarks.points.iter().map(|p| Vector2::new(p.x * sx, p.y * sy)).collect(),
            },
            intrinsics: self.intrinsics.scaled(sx, sy),
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub id: usize,
    pub label: Option<String>,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    /// Declared emotion classes; empty for unlabeled data.
    pub classes: Vec<String>,
    pub protocol: Protocol,
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn frames(&self) -> impl Iterator<Item = &Frame> {
        self.clips.iter().flat_map(|c| c.frames.iter())
    }

    pub fn n_frames(&self) -> usize {
        self.clips.iter().map(|c| c.frames.len()).sum()
    }

    /// Index of `label` in the class list.
    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    /// Checks what the emotion protocol needs: at least two clips, no empty
    /// clip, every label declared, unique clip ids.
    pub fn validate_labeled(&self) -> Result<()> {
        if self.clips.len() < 2 {
            return Err(Error::validation(format!("need at least 2 clips, dataset has {}", self.clips.len())));
        }
        let mut ids = BTreeSet::new();
        for clip in &self.clips {
            if clip.frames.is_empty() {
                return Err(Error::validation(format!("clip {} has no frames", clip.id)));
            }
            if !ids.insert(clip.id) {
                return Err(Error::validation(format!("duplicate clip id {}", clip.id)));
            }
            match &clip.label {
                Some(l) if self.class_index(l).is_some() => {}
                Some(l) => return Err(Error::validation(format!("clip {} label {l:?} is not a declared class", clip.id))),
                None => return Err(Error::validation(format!("clip {} is unlabeled", clip.id))),
            }
        }
        Ok(())
    }
}

/// Machine-output float formatting: 17 significant digits, dot decimal.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn csv_row(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(fmt_num).collect::<Vec<_>>().join(",")
}

/// Parses numeric CSV rows. A first line that does not parse is taken as a
/// header and skipped; blank lines are ignored.
pub fn parse_csv_numbers(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(_) => return Err(Error::parse(format!("line {}: non-numeric field in {line:?}", i + 1))),
        }
    }
    Ok(rows)
}

pub fn write_landmarks_csv(path: &Path, lm: &Landmarks2D) -> Result<()> {
    let mut s = String::new();
    for p in &lm.points {
        s.push_str(&csv_row([p.x, p.y]));
        s.push('\n');
    }
    fsutil::write_atomic(path, s.as_bytes())
}

pub fn read_landmarks_csv(path: &Path) -> Result<Landmarks2D> {
    let rows = parse_csv_numbers(&fsutil::read_to_string(path)?)?;
    let points = rows
        .iter()
        .map(|r| match r.as_slice() {
            [x, y] => Ok(Vector2::new(*x, *y)),
            _ => Err(Error::parse(format!("{}: landmark rows need exactly 2 columns", path.display()))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Landmarks2D { points })
}

/// Writes a coefficient vector as a single CSV row.
pub fn write_vector_csv(path: &Path, v: &DVector<f64>) -> Result<()> {
    fsutil::write_atomic(path, format!("{}\n", csv_row(v.iter().copied())).as_bytes())
}

/// Reads a coefficient vector: every number in the file, row by row.
pub fn read_vector_csv(path: &Path) -> Result<DVector<f64>> {
    let rows = parse_csv_numbers(&fsutil::read_to_string(path)?)?;
    Ok(DVector::from_vec(rows.into_iter().flatten().collect()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameEntry {
    id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subject: Option<usize>,
    image: PathBuf,
    landmarks: PathBuf,
    pose: Pose6DoF,
    intrinsics: CameraIntrinsics,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eta_true: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClipEntry {
    id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    #[serde(default)]
    protocol: Protocol,
    #[serde(default)]
    classes: Vec<String>,
    clips: Vec<ClipEntry>,
}

/// Writes the manifest plus every referenced file under the manifest's
/// directory (`frames/<id>.pgm`, `frames/<id>_lm.csv`, ...).
pub fn save_dataset(dataset: &Dataset, manifest_path: &Path) -> Result<()> {
    let root = manifest_path.parent().unwrap_or(Path::new(""));
    let mut clips = Vec::with_capacity(dataset.clips.len());
    for clip in &dataset.clips {
        let mut frames = Vec::with_capacity(clip.frames.len());
        for f in &clip.frames {
            let stem = format!("frames/{:06}", f.id);
            let image = PathBuf::from(format!("{stem}.pgm"));
            let landmarks = PathBuf::from(format!("{stem}_lm.csv"));
            f.image.save_pgm(&root.join(&image))?;
            write_landmarks_csv(&root.join(&landmarks), &f.landmarks)?;
            let eta_true = match &f.eta_true {
                Some(eta) => {
                    let p = PathBuf::from(format!("{stem}_eta.csv"));
                    write_vector_csv(&root.join(&p), &eta.0)?;
                    Some(p)
                }
                None => None,
            };
            let alpha = match &f.alpha {
                Some(a) => {
                    let p = PathBuf::from(format!("{stem}_alpha.csv"));
                    write_vector_csv(&root.join(&p), &a.0)?;
                    Some(p)
                }
                None => None,
            };
            frames.push(FrameEntry {
                id: f.id,
                subject: f.subject,
                image,
                landmarks,
                pose: f.pose,
                intrinsics: f.intrinsics,
                bbox: f.bbox.to_array(),
                eta_true,
                alpha,
            });
        }
        clips.push(ClipEntry { id: clip.id, label: clip.label.clone(), frames });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        protocol: dataset.protocol,
        classes: dataset.classes.clone(),
        clips,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fsutil::write_atomic(manifest_path, json.as_bytes())
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(&fsutil::read_to_string(manifest_path)?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Version { found: manifest.version, expected: MANIFEST_VERSION });
    }
    let root = manifest_path.parent().unwrap_or(Path::new(""));
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for c in manifest.clips {
        let mut frames = Vec::with_capacity(c.frames.len());
        for f in c.frames {
            frames.push(Frame {
                id: f.id,
                subject: f.subject,
                image: GrayImage::load_pgm(&root.join(&f.image))?,
                bbox: Rect::from_array(f.bbox),
                landmarks: read_landmarks_csv(&root.join(&f.landmarks))?,
                pose: f.pose,
                intrinsics: f.intrinsics,
                eta_true: f.eta_true.map(|p| read_vector_csv(&root.join(p)).map(ExpressionCoeffs)).transpose()?,
                alpha: f.alpha.map(|p| read_vector_csv(&root.join(p)).map(ShapeCoeffs)).transpose()?,
            });
        }
        clips.push(Clip { id: c.id, label: c.label, frames });
    }
    Ok(Dataset { classes: manifest.classes, protocol: manifest.protocol, clips })
}
