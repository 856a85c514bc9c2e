//! Face crop preparation: expand the detection box, crop, resample to the
//! network input size, subtract the dataset mean.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, Rect};

/// Detection boxes are grown by this factor about their centre before cropping.
pub const BBOX_EXPANSION: f64 = 1.25;

/// Network input: `side × side` intensities, row-major, mean already removed.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceRaster {
    side: usize,
    data: DVector<f64>,
}

impl FaceRaster {
    pub fn new(side: usize, data: DVector<f64>) -> Result<Self> {
        if data.len() != side * side {
            return Err(Error::contract(format!("{side}x{side} raster needs {} values, got {}", side * side, data.len())));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("raster contains non-finite values"));
        }
        Ok(FaceRaster { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &DVector<f64> {
        &self.data
    }
}

/// Empirical mean removed from every input: a single intensity or a
/// per-pixel mean image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetMean {
    Scalar(f64),
    Image(Vec<f64>),
}

impl Default for DatasetMean {
    fn default() -> Self {
        DatasetMean::Scalar(0.0)
    }
}

impl DatasetMean {
    /// Mean intensity over all pixels of the given (un-centred) crops.
    pub fn scalar_of(crops: &[GrayImage]) -> DatasetMean {
        let (sum, count) = crops
            .iter()
            .fold((0.0, 0usize), |(s, c), img| (s + img.data().iter().sum::<f64>(), c + img.data().len()));
        DatasetMean::Scalar(if count == 0 { 0.0 } else { sum / count as f64 })
    }

    /// Per-pixel mean image of equally sized crops.
    pub fn image_of(crops: &[GrayImage]) -> Result<DatasetMean> {
        let first = crops.first().ok_or_else(|| Error::validation("no crops to average"))?;
        let mut acc = vec![0.0; first.data().len()];
        for img in crops {
            if img.data().len() != acc.len() {
                return Err(Error::contract("crops differ in size"));
            }
            acc.iter_mut().zip(img.data()).for_each(|(a, v)| *a += v);
        }
        let n = crops.len() as f64;
        Ok(DatasetMean::Image(acc.into_iter().map(|a| a / n).collect()))
    }
}

/// Crop window actually sampled for a detection box: expanded by
/// [`BBOX_EXPANSION`] and clipped to the image.
pub fn crop_window(image: &GrayImage, bbox: &Rect) -> Result<Rect> {
    bbox.expand(BBOX_EXPANSION)
        .clip(image.width(), image.height())
        .ok_or_else(|| Error::validation(format!("bounding box {bbox:?} does not intersect the image")))
}

/// Cropped and resampled face, before mean subtraction.
pub fn crop_face(image: &GrayImage, bbox: &Rect, input_side: usize) -> Result<GrayImage> {
    if input_side == 0 {
        return Err(Error::contract("input side must be positive"));
    }
    let window = crop_window(image, bbox)?;
    Ok(image.crop_resize(&window, input_side, input_side))
}

pub fn center(crop: GrayImage, mean: &DatasetMean) -> Result<FaceRaster> {
    let side = crop.width();
    let mut data = DVector::from_vec(crop.into_data());
    match mean {
        DatasetMean::Scalar(m) => data.add_scalar_mut(-m),
        DatasetMean::Image(img) => {
            if img.len() != data.len() {
                return Err(Error::contract(format!(
                    "mean image has {} pixels, raster has {}",
                    img.len(),
                    data.len()
                )));
            }
            data.iter_mut().zip(img).for_each(|(d, m)| *d -= m);
        }
    }
    FaceRaster::new(side, data)
}

pub fn preprocess(image: &GrayImage, bbox: &Rect, input_side: usize, mean: &DatasetMean) -> Result<FaceRaster> {
    center(crop_face(image, bbox, input_side)?, mean)
}

/// Preprocesses many `(image, bbox)` pairs. Without a given mean, the scalar
/// mean intensity of the crops is computed and returned.
pub fn prepare_rasters(
    items: &[(&GrayImage, &Rect)],
    input_side: usize,
    mean: Option<&DatasetMean>,
) -> Result<(Vec<FaceRaster>, DatasetMean)> {
    let crops = items
        .par_iter()
        .map(|(img, bbox)| crop_face(img, bbox, input_side))
        .collect::<Result<Vec<_>>>()?;
    let mean = match mean {
        Some(m) => m.clone(),
        None => DatasetMean::scalar_of(&crops),
    };
    let rasters = crops.into_par_iter().map(|c| center(c, &mean)).collect::<Result<Vec<_>>>()?;
    Ok((rasters, mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_constant_image_centres_to_zero() {
        let img = GrayImage::filled(40, 40, 0.5);
        let r = preprocess(&img, &Rect::new(0.0, 0.0, 40.0, 40.0), 16, &DatasetMean::Scalar(0.5)).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_is_centre_preserving_then_clipped() {
        let img = GrayImage::filled(100, 100, 0.0);
        assert_eq!(crop_window(&img, &Rect::new(10.0, 10.0, 20.0, 20.0)).unwrap(), Rect::new(7.5, 7.5, 25.0, 25.0));
        assert_eq!(crop_window(&img, &Rect::new(90.0, -4.0, 20.0, 20.0)).unwrap(), Rect::new(87.5, 0.0, 12.5, 18.5));
    }

    #[test]
    fn checkerboard_two_to_one() {
        // 8x8 board; a 6.4 box centred in the image expands to exactly the full frame
        let img = GrayImage::from_fn(8, 8, |r, c| if (r + c / 2) % 2 == 0 { 1.0 } else { 0.0 });
        let bbox = Rect::new(0.8, 0.8, 6.4, 6.4);
        let r = preprocess(&img, &bbox, 4, &DatasetMean::Scalar(0.0)).unwrap();
        // output pixel (i, j) samples the centre of source block rows 2i..2i+1, cols 2j..2j+1
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    acc += 0.25 * img.get(2 * i + dr, 2 * j + dc);
                }
                assert!((r.data()[i * 4 + j] - acc).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn disjoint_box_is_rejected() {
        let img = GrayImage::filled(10, 10, 0.0);
        let err = preprocess(&img, &Rect::new(50.0, 50.0, 4.0, 4.0), 8, &DatasetMean::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn per_pixel_mean() {
        let crops = vec![GrayImage::filled(2, 2, 0.2), GrayImage::filled(2, 2, 0.6)];
        let DatasetMean::Image(m) = DatasetMean::image_of(&crops).unwrap() else { panic!() };
        assert!(m.iter().all(|&v| (v - 0.4).abs() < 1e-15));
        assert_eq!(DatasetMean::scalar_of(&crops), DatasetMean::Scalar(0.4));
    }
}
