//! Dense float images and their on-disk formats.
//!
//! Color images are interleaved RGB in `f64`. Appearance values live in
//! `[0, 1]`; the diffusion code works on the signed range `[-1, 1]` and
//! converts with [`to_signed`] / [`from_signed`] at its boundary.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major, interleaved RGB.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&fill);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::param(format!(
                "image data has {} values, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Bilinear lookup at continuous pixel coordinates (pixel centers at
    /// `i + 0.5`), clamping to the border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x1, y0);
        let p01 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - tx) + p10[c] * tx;
            let bottom = p01[c] * (1.0 - tx) + p11[c] * tx;
            out[c] = top * (1.0 - ty) + bottom * ty;
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mse(&self, other: &Image) -> f64 {
        debug_assert!(self.same_shape(other));
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        debug_assert!(self.same_shape(other));
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in out.pixels_mut().enumerate() {
            for c in 0..3 {
                px[c] = quantize(self.data[i * 3 + c]);
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| Error::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Single-channel float image (alpha, depth).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, fill: f64) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut out = image::GrayImage::new(self.width as u32, self.height as u32);
        for (px, &v) in out.pixels_mut().zip(&self.data) {
            px[0] = quantize(v);
        }
        out.save(path).map_err(|e| Error::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Greyscale PFM, little-endian, bottom row first.
    pub fn write_pfm(&self, mut w: impl Write) -> std::io::Result<()> {
        write!(w, "Pf\n{} {}\n-1.0\n", self.width, self.height)?;
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                w.write_all(&(self.get(x, y) as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_pfm(mut r: impl BufRead) -> Result<Plane> {
        let mut offset = 0usize;
        let mut line = String::new();
        let mut next_line = |r: &mut dyn BufRead, offset: &mut usize| -> Result<String> {
            line.clear();
            let n = r
                .read_line(&mut line)
                .map_err(|e| Error::format(*offset, e.to_string()))?;
            *offset += n;
            Ok(line.trim().to_string())
        };
        let magic = next_line(&mut r, &mut offset)?;
        if magic != "Pf" {
            return Err(Error::format(0, format!("expected greyscale PFM, got {magic:?}")));
        }
        let dims = next_line(&mut r, &mut offset)?;
        let mut it = dims.split_whitespace().map(str::parse::<usize>);
        let (width, height) = match (it.next(), it.next()) {
            (Some(Ok(w)), Some(Ok(h))) => (w, h),
            _ => return Err(Error::format(offset, "bad PFM dimensions")),
        };
        let scale: f64 = next_line(&mut r, &mut offset)?
            .parse()
            .map_err(|_| Error::format(offset, "bad PFM scale"))?;
        let little = scale < 0.0;
        let mut plane = Plane::new(width, height, 0.0);
        let mut buf = [0u8; 4];
        for y in (0..height).rev() {
            for x in 0..width {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::format(offset, "truncated PFM payload"))?;
                offset += 4;
                let v = if little {
                    f32::from_le_bytes(buf)
                } else {
                    f32::from_be_bytes(buf)
                };
                plane.set(x, y, v as f64);
            }
        }
        Ok(plane)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[0, 1]` appearance range to the signed diffusion range.
pub fn to_signed(img: &Image) -> Image {
    img.map(|v| 2.0 * v - 1.0)
}

pub fn from_signed(img: &Image) -> Image {
    img.map(|v| 0.5 * (v + 1.0))
}

/// Lays images out left to right, rows top to bottom, on a white canvas.
pub fn contact_sheet(rows: &[Vec<Image>]) -> Option<Image> {
    let first = rows.iter().flatten().next()?;
    let (w, h) = (first.width, first.height);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut sheet = Image::new(cols * w, rows.len() * h, [1.0; 3]);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            for y in 0..h.min(img.height) {
                for x in 0..w.min(img.width) {
                    sheet.set_pixel(c * w + x, r * h + y, img.pixel(x, y));
                }
            }
        }
    }
    Some(sheet)
}
