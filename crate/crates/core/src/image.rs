//! Grayscale rasters, rectangles and bilinear resampling.
//!
//! Pixel `(row, col)` has its centre at continuous coordinate
//! `(col + 0.5, row + 0.5)`, so resampling an image by a factor maps
//! continuous pixel coordinates by exactly that factor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::contract(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        GrayImage { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        GrayImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Bilinear sample at continuous coordinate `(x, y)`, clamped to the
    /// outermost pixel centres.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let wx = fx - x0 as f64;
        let wy = fy - y0 as f64;
        let top = self.get(y0, x0) * (1.0 - wx) + self.get(y0, x1) * wx;
        let bottom = self.get(y1, x0) * (1.0 - wx) + self.get(y1, x1) * wx;
        top * (1.0 - wy) + bottom * wy
    }

    /// Bilinear resize. Same-size requests return an exact copy.
    pub fn resize(&self, width: usize, height: usize) -> Result<GrayImage> {
        if width == 0 || height == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::validation("cannot resize to or from an empty image"));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Ok(GrayImage::from_fn(width, height, |r, c| self.sample((c as f64 + 0.5) * sx, (r as f64 + 0.5) * sy)))
    }

    /// Crop of `rect` resampled to `width × height`. Each output pixel
    /// averages an `n × n` grid of bilinear samples, `n` being the
    /// downsampling factor rounded up, so shrinking does not alias.
    pub fn crop_resize(&self, rect: &Rect, width: usize, height: usize) -> GrayImage {
        let sx = rect.w / width as f64;
        let sy = rect.h / height as f64;
        let n = sx.max(sy).ceil().max(1.0) as usize;
        let inv = 1.0 / n as f64;
        GrayImage::from_fn(width, height, |r, c| {
            let mut sum = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let x = rect.x + (c as f64 + (j as f64 + 0.5) * inv) * sx;
                    let y = rect.y + (r as f64 + (i as f64 + 0.5) * inv) * sy;
                    sum += self.sample(x, y);
                }
            }
            sum * inv * inv
        })
    }

    /// Binary 8-bit PGM (P5). Values are clamped to `[0, 1]` and quantized.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<GrayImage> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::parse("truncated PGM header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::parse("bad PGM header"))?);
        }
        if fields[0] != "P5" {
            return Err(Error::parse(format!("unsupported PGM magic {:?}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(format!("bad PGM header field {s:?}")));
        let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(Error::parse(format!("only 8-bit PGM supported (maxval {maxval})")));
        }
        pos += 1; // single whitespace after maxval
        let body = bytes.get(pos..pos + w * h).ok_or_else(|| Error::parse("truncated PGM pixel data"))?;
        let scale = maxval as f64;
        GrayImage::new(w, h, body.iter().map(|&b| b as f64 / scale).collect())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_pgm())
    }

    pub fn load_pgm(path: &Path) -> Result<GrayImage> {
        GrayImage::from_pgm(&fsutil::read(path)?)
    }
}

/// Axis-aligned rectangle: top-left corner and size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Rect { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    /// Grow about the centre by `factor`.
    pub fn expand(&self, factor: f64) -> Rect {
        let (cx, cy) = self.center();
        let (w, h) = (self.w * factor, self.h * factor);
        Rect { x: cx - 0.5 * w, y: cy - 0.5 * h, w, h }
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Rect {
        Rect { x: self.x * sx, y: self.y * sy, w: self.w * sx, h: self.h * sy }
    }

    /// Intersection with `[0, width] × [0, height]`; `None` when empty.
    pub fn clip(&self, width: usize, height: usize) -> Option<Rect> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(width as f64);
        let y1 = (self.y + self.h).min(height as f64);
        (x1 > x0 && y1 > y0).then_some(Rect { x: x0, y: y0, w: x1 - x0, h: y1 - y0 })
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Rect::new(a[0], a[1], a[2], a[3])
    }
}
