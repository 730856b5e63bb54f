//! Shared domain types: RGB images, labels, boxes and tiles.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};

/// Binary tile / slide class. The candida class sits at index 1 of every
/// 2-way logit vector in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Negative,
    Positive,
}

pub const CANDIDA_INDEX: usize = 1;

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            _ => Err(param_err!("class index {i} is not in {{0,1}}")),
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Negative => "negative",
            Label::Positive => "positive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "positive" | "1" => Ok(Label::Positive),
            "negative" | "0" => Ok(Label::Negative),
            other => Err(param_err!("unknown label '{other}'")),
        }
    }
}

/// Axis-aligned box in pixel units, `(x_min, y_min)` inclusive corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl BBox {
    pub fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn center(&self) -> (f32, f32) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn iou(&self, other: &BBox) -> f32 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= width as f32
            && self.y_max <= height as f32
    }
}

/// Interleaved RGB image (row-major, HWC) with `f32` samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(shape_err!(
                "image buffer has {} samples, expected {height}x{width}x3",
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut acc = [0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c] as f64;
            }
        }
        let n = (self.height * self.width).max(1) as f64;
        acc.map(|v| v / n)
    }

    /// Channel-first copy (`3 x H x W`) for tensor construction.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0f32; plane * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            out[i] = px[0];
            out[plane + i] = px[1];
            out[2 * plane + i] = px[2];
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, chw: &[f32]) -> Result<Self> {
        let plane = height * width;
        if chw.len() != plane * 3 {
            return Err(shape_err!("chw buffer has {} samples, expected {}", chw.len(), plane * 3));
        }
        let mut data = vec![0f32; plane * 3];
        for i in 0..plane {
            data[3 * i] = chw[i];
            data[3 * i + 1] = chw[plane + i];
            data[3 * i + 2] = chw[2 * plane + i];
        }
        Image::new(height, width, data)
    }

    /// Copy of the `size x size` window at `(top, left)`; samples outside the
    /// source are filled with `pad`.
    pub fn crop_padded(&self, top: usize, left: usize, size_h: usize, size_w: usize, pad: f32) -> Image {
        let mut out = Image::filled(size_h, size_w, [pad; 3]);
        for y in 0..size_h {
            let sy = top + y;
            if sy >= self.height {
                break;
            }
            let w = size_w.min(self.width.saturating_sub(left));
            if w == 0 {
                break;
            }
            let src = (sy * self.width + left) * 3;
            let dst = y * size_w * 3;
            out.data[dst..dst + w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        out
    }
}

/// One fixed-size crop of a slide, the unit of image-level classification.
#[derive(Debug, Clone, PartialEq)]
pub struct TileImage {
    pub tile_id: String,
    pub pixels: Image,
    pub label: Label,
    pub boxes: Vec<BBox>,
}

impl TileImage {
    /// Builds a tile and checks the label/box invariants.
    pub fn new(tile_id: impl Into<String>, pixels: Image, label: Label, boxes: Vec<BBox>) -> Result<Self> {
        let tile = Self {
            tile_id: tile_id.into(),
            pixels,
            label,
            boxes,
        };
        tile.validate()?;
        Ok(tile)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label.is_positive() == self.boxes.is_empty() {
            return Err(param_err!(
                "tile {}: label {} inconsistent with {} boxes",
                self.tile_id,
                self.label.as_str(),
                self.boxes.len()
            ));
        }
        for b in &self.boxes {
            if !b.is_valid() || !b.inside(self.pixels.width(), self.pixels.height()) {
                return Err(param_err!("tile {}: box {b:?} is degenerate or outside the image", self.tile_id));
            }
        }
        Ok(())
    }

    pub fn size(&self) -> (usize, usize) {
        (self.pixels.height(), self.pixels.width())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_identical_boxes_is_one() {
        let b = BBox::new(1.0, 2.0, 11.0, 7.0);
        assert!((b.iou(&b) - 1.0).abs() < 1e-7);
        assert_eq!(b.iou(&BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
    }

    #[test]
    fn tile_rejects_label_box_mismatch() {
        let img = Image::filled(8, 8, [1.0; 3]);
        assert!(TileImage::new("a", img.clone(), Label::Positive, vec![]).is_err());
        let b = BBox::new(0.0, 0.0, 4.0, 4.0);
        assert!(TileImage::new("b", img.clone(), Label::Negative, vec![b]).is_err());
        assert!(TileImage::new("c", img.clone(), Label::Positive, vec![BBox::new(0.0, 0.0, 9.0, 4.0)]).is_err());
        assert!(TileImage::new("d", img, Label::Positive, vec![b]).is_ok());
    }

    #[test]
    fn chw_roundtrip() {
        let data: Vec<f32> = (0..2 * 3 * 3).map(|v| v as f32 / 18.0).collect();
        let img = Image::new(2, 3, data).unwrap();
        let back = Image::from_chw(2, 3, &img.to_chw()).unwrap();
        assert_eq!(img, back);
    }
}
