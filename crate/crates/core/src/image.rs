//! Rasters: grayscale images, label masks, probability maps and RGB overlays.
//!
//! All rasters are row-major with `(row, col)` addressing. Images hold
//! intensities in `[0, 1]`; masks hold integer labels where 0 is background.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

pub const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Raster(format!(
                "image is {height}x{width}, both sides must be at least {MIN_SIDE}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::Raster(format!(
                "expected {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Raster(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Builds an image by clamping every value into `[0, 1]`.
    pub(crate) fn from_clamped(height: usize, width: usize, mut pixels: Vec<f64>) -> Self {
        for p in &mut pixels {
            *p = if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    pub fn negative(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|p| 1.0 - p).collect(),
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|b| f64::from(*b) / 255.0).collect(),
        )
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_gray_png(path, self.height, self.width, &self.to_u8())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (h, w, bytes) = read_gray_png(path)?;
        Self::from_u8(h, w, &bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMask {
    height: usize,
    width: usize,
    num_classes: u8,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, num_classes: u8, labels: Vec<u8>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Raster("a mask needs at least one foreground class".into()));
        }
        if labels.len() != height * width {
            return Err(Error::Raster(format!(
                "expected {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l > num_classes) {
            return Err(Error::Raster(format!(
                "label {l} exceeds num_classes {num_classes}"
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn empty(height: usize, width: usize, num_classes: u8) -> Self {
        Self {
            height,
            width,
            num_classes,
            labels: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    /// Binary indicator of `class_id` as 0/1 floats.
    pub fn binary(&self, class_id: u8) -> Vec<f64> {
        self.labels
            .iter()
            .map(|l| if *l == class_id { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn count(&self, class_id: u8) -> usize {
        self.labels.iter().filter(|l| **l == class_id).count()
    }

    /// Foreground classes present in the mask, ascending.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = vec![false; usize::from(self.num_classes) + 1];
        for l in &self.labels {
            seen[usize::from(*l)] = true;
        }
        (1..=self.num_classes)
            .filter(|c| seen[usize::from(*c)])
            .collect()
    }

    pub fn same_shape_as(&self, image: &GrayImage) -> bool {
        self.height == image.height() && self.width == image.width()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_gray_png(path, self.height, self.width, &self.labels)
    }

    pub fn load_png(path: &Path, num_classes: u8) -> Result<Self> {
        let (h, w, bytes) = read_gray_png(path)?;
        Self::new(h, w, num_classes, bytes).map_err(|e| Error::Png {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Single-channel foreground probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    probs: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != height * width {
            return Err(Error::Raster(format!(
                "expected {} probabilities, got {}",
                height * width,
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Raster(format!("probability {p} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            probs,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn threshold(&self, level: f64, class_id: u8, num_classes: u8) -> LabelMask {
        let labels = self
            .probs
            .iter()
            .map(|p| if *p > level { class_id } else { 0 })
            .collect();
        LabelMask {
            height: self.height,
            width: self.width,
            num_classes,
            labels,
        }
    }
}

/// Per-pixel class distribution over background plus `C` foreground
/// classes, stored channel-major (`channel * H * W + row * W + col`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ClassProbMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels < 2 {
            return Err(Error::Raster("class map needs background and one class".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::Raster(format!(
                "expected {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn prob(&self, channel: usize, pixel: usize) -> f64 {
        self.data[channel * self.num_pixels() + pixel]
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        let n = self.num_pixels();
        &self.data[channel * n..(channel + 1) * n]
    }

    /// Per-pixel argmax; ties resolve to the lower class index.
    pub fn argmax(&self) -> Vec<u8> {
        let n = self.num_pixels();
        (0..n)
            .map(|i| {
                let mut best = 0usize;
                let mut best_v = self.data[i];
                for c in 1..self.channels {
                    let v = self.data[c * n + i];
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                best as u8
            })
            .collect()
    }

    pub fn max_prob(&self) -> Vec<f64> {
        let n = self.num_pixels();
        (0..n)
            .map(|i| {
                (0..self.channels)
                    .map(|c| self.data[c * n + i])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    pub fn to_mask(&self) -> LabelMask {
        LabelMask {
            height: self.height,
            width: self.width,
            num_classes: (self.channels - 1) as u8,
            labels: self.argmax(),
        }
    }

    pub fn foreground(&self, class_id: u8) -> ProbMap {
        ProbMap {
            height: self.height,
            width: self.width,
            probs: self.channel(usize::from(class_id)).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB values in `[0, 1]`.
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        write_png(path, self.height, self.width, png::ColorType::Rgb, &bytes)
    }
}

fn write_gray_png(path: &Path, height: usize, width: usize, bytes: &[u8]) -> Result<()> {
    write_png(path, height, width, png::ColorType::Grayscale, bytes)
}

fn write_png(
    path: &Path,
    height: usize,
    width: usize,
    color: png::ColorType,
    bytes: &[u8],
) -> Result<()> {
    let png_err = |e: png::EncodingError| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(bytes).map_err(png_err)?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let png_err = |e: png::DecodingError| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Png {
        path: path.to_path_buf(),
        message: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png {
            path: path.to_path_buf(),
            message: format!(
                "expected 8-bit grayscale, found {:?}/{:?}",
                info.color_type, info.bit_depth
            ),
        });
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(GrayImage::new(8, 8, vec![1.5; 64]).is_err());
        assert!(GrayImage::new(8, 8, vec![f64::NAN; 64]).is_err());
        assert!(GrayImage::new(4, 8, vec![0.0; 32]).is_err());
    }

    #[test]
    fn rejects_labels_beyond_class_count() {
        assert!(LabelMask::new(8, 8, 2, vec![3; 64]).is_err());
        assert!(LabelMask::new(8, 8, 2, vec![2; 64]).is_ok());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::from_u8(8, 9, &(0..72).map(|v| (v * 3) as u8).collect::<Vec<_>>())
            .unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(GrayImage::load_png(&p).unwrap(), img);

        let mask = LabelMask::new(8, 9, 2, (0..72).map(|v| (v % 3) as u8).collect()).unwrap();
        let q = dir.path().join("m.png");
        mask.save_png(&q).unwrap();
        assert_eq!(LabelMask::load_png(&q, 2).unwrap(), mask);
    }

    #[test]
    fn argmax_ties_go_to_lower_class() {
        let m = ClassProbMap::new(3, 1, 2, vec![0.2, 0.5, 0.4, 0.25, 0.4, 0.25]).unwrap();
        assert_eq!(m.argmax(), vec![1, 0]);
    }
}
