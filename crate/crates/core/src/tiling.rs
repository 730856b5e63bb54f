//! Slide cropping and image / overlay IO.

use std::path::Path;

use image::{ImageBuffer, RgbImage};

use crate::error::{param_err, shape_err, Error, Result};
use crate::types::{BBox, Image, Label, TileImage};

/// Value used for tile regions that fall outside the slide.
pub const PAD_VALUE: f32 = 1.0;

/// Placement of tiles over a slide of known extent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub tile_size: usize,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    /// `(row, col)` pixel offset of each tile's top-left corner, row-major.
    pub offsets: Vec<(usize, usize)>,
}

/// Number of tile positions along one axis of length `extent`.
pub fn tiles_along(extent: usize, tile_size: usize, stride: usize) -> usize {
    if extent <= tile_size {
        1
    } else {
        (extent - tile_size).div_ceil(stride) + 1
    }
}

impl TileGrid {
    pub fn new(height: usize, width: usize, tile_size: usize, stride: usize) -> Result<Self> {
        if tile_size == 0 {
            return Err(param_err!("tile_size must be positive"));
        }
        if stride == 0 {
            return Err(param_err!("stride must be positive"));
        }
        let rows = tiles_along(height, tile_size, stride);
        let cols = tiles_along(width, tile_size, stride);
        let mut offsets = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                offsets.push((r * stride, c * stride));
            }
        }
        Ok(Self {
            tile_size,
            stride,
            rows,
            cols,
            offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Crops a slide into row-major tiles. Boxes are clipped to each tile window
/// and re-expressed in tile coordinates; a tile is positive iff it keeps at
/// least one non-degenerate box. Out-of-slide regions are white.
pub fn crop_slide(
    slide: &Image,
    boxes: &[BBox],
    tile_size: usize,
    stride: usize,
    id_prefix: &str,
) -> Result<Vec<TileImage>> {
    let grid = TileGrid::new(slide.height(), slide.width(), tile_size, stride)?;
    let mut tiles = Vec::with_capacity(grid.len());
    for (i, &(top, left)) in grid.offsets.iter().enumerate() {
        let pixels = slide.crop_padded(top, left, tile_size, tile_size, PAD_VALUE);
        let (t, l, s) = (top as f32, left as f32, tile_size as f32);
        let clipped: Vec<BBox> = boxes
            .iter()
            .map(|b| {
                BBox::new(
                    (b.x_min - l).clamp(0.0, s),
                    (b.y_min - t).clamp(0.0, s),
                    (b.x_max - l).clamp(0.0, s),
                    (b.y_max - t).clamp(0.0, s),
                )
            })
            .filter(BBox::is_valid)
            .collect();
        let label = if clipped.is_empty() {
            Label::Negative
        } else {
            Label::Positive
        };
        tiles.push(TileImage::new(format!("{id_prefix}{i:04}"), pixels, label, clipped)?);
    }
    Ok(tiles)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb8(img: &Image) -> RgbImage {
    let raw: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw)
        .expect("buffer length matches dimensions")
}

pub fn from_rgb8(buf: &RgbImage) -> Image {
    let data = buf.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Image::new(buf.height() as usize, buf.width() as usize, data).expect("rgb8 buffer is HxWx3")
}

pub fn load_image(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "image file not found"),
        ));
    }
    let buf = image::open(path)?.to_rgb8();
    Ok(from_rgb8(&buf))
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    to_rgb8(img).save(path)?;
    Ok(())
}

/// Blends a `[0,1]` heatmap into the red channel with alpha 0.5:
/// `red = (1 - 0.5 h) * red + 0.5 h`. Other channels are untouched.
pub fn blend_overlay(img: &Image, heatmap: &[f32]) -> Result<Image> {
    if heatmap.len() != img.height() * img.width() {
        return Err(shape_err!(
            "heatmap has {} values, image is {}x{}",
            heatmap.len(),
            img.height(),
            img.width()
        ));
    }
    let mut out = img.clone();
    for (px, &h) in out.data_mut().chunks_exact_mut(3).zip(heatmap) {
        let a = 0.5 * h.clamp(0.0, 1.0);
        px[0] = (1.0 - a) * px[0] + a;
    }
    Ok(out)
}

pub fn save_overlay(img: &Image, heatmap: &[f32], path: &Path) -> Result<()> {
    let blended = blend_overlay(img, heatmap)?;
    save_image(&blended, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(h: usize, w: usize) -> Image {
        let mut img = Image::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                img.set(y, x, [(y % 7) as f32 / 7.0, (x % 5) as f32 / 5.0, ((x + y) % 3) as f32 / 3.0]);
            }
        }
        img
    }

    #[test]
    fn exact_tiling_counts() {
        assert_eq!(TileGrid::new(2048, 2048, 1024, 1024).unwrap().len(), 4);
        assert_eq!(TileGrid::new(1024, 1024, 1024, 1024).unwrap().len(), 1);
        assert_eq!(TileGrid::new(2500, 2500, 1024, 1024).unwrap().len(), 9);
    }

    #[test]
    fn rejects_zero_sizes() {
        assert!(TileGrid::new(10, 10, 0, 1).is_err());
        assert!(TileGrid::new(10, 10, 4, 0).is_err());
    }

    #[test]
    fn single_tile_equals_input() {
        let img = gradient_image(64, 64);
        let tiles = crop_slide(&img, &[], 64, 64, "t").unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].pixels, img);
    }

    #[test]
    fn edge_tiles_are_white_padded() {
        // Scaled-down version of the 2500 / 1024 case: 10 / 4 -> 3x3 tiles.
        let img = Image::filled(10, 10, [0.2; 3]);
        let tiles = crop_slide(&img, &[], 4, 4, "t").unwrap();
        assert_eq!(tiles.len(), 9);
        let last = &tiles[8].pixels;
        let mut pad_sum = 0.0;
        let mut pad_n = 0;
        for y in 0..4 {
            for x in 0..4 {
                if y >= 2 || x >= 2 {
                    pad_sum += last.get(y, x).iter().sum::<f32>();
                    pad_n += 3;
                }
            }
        }
        assert_eq!(pad_sum / pad_n as f32, 1.0);
        assert_eq!(last.get(0, 0), [0.2; 3]);
    }

    #[test]
    fn reassembly_is_bit_exact() {
        let img = gradient_image(48, 32);
        let tiles = crop_slide(&img, &[], 16, 16, "t").unwrap();
        let grid = TileGrid::new(48, 32, 16, 16).unwrap();
        let mut out = Image::filled(48, 32, [0.0; 3]);
        for (tile, &(top, left)) in tiles.iter().zip(&grid.offsets) {
            for y in 0..16 {
                for x in 0..16 {
                    out.set(top + y, left + x, tile.pixels.get(y, x));
                }
            }
        }
        assert_eq!(out, img);
    }

    #[test]
    fn boxes_follow_their_tile() {
        let img = Image::filled(32, 32, [0.5; 3]);
        let b = BBox::new(10.0, 2.0, 20.0, 6.0);
        let tiles = crop_slide(&img, &[b], 16, 16, "t").unwrap();
        assert_eq!(tiles[0].label, Label::Positive);
        assert_eq!(tiles[0].boxes, vec![BBox::new(10.0, 2.0, 16.0, 6.0)]);
        assert_eq!(tiles[1].boxes, vec![BBox::new(0.0, 2.0, 4.0, 6.0)]);
        assert_eq!(tiles[2].label, Label::Negative);
    }

    #[test]
    fn png_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..24 * 16 * 3).map(|_| rng.gen::<f32>()).collect();
        let img = Image::new(24, 16, data).unwrap();
        let path = dir.path().join("x.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        let err = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(err <= 1.0 / 255.0, "max err {err}");
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(load_image(Path::new("/nonexistent/tile.png")).is_err());
    }

    #[test]
    fn overlay_blend_rules() {
        let img = gradient_image(6, 5);
        let zeros = vec![0.0; 30];
        assert_eq!(blend_overlay(&img, &zeros).unwrap(), img);
        let ones = vec![1.0; 30];
        let out = blend_overlay(&img, &ones).unwrap();
        for (o, i) in out.data().chunks_exact(3).zip(img.data().chunks_exact(3)) {
            assert!((o[0] - (0.5 * i[0] + 0.5)).abs() < 1e-7);
            assert_eq!(o[1], i[1]);
            assert_eq!(o[2], i[2]);
        }
        assert!(blend_overlay(&img, &ones[..29]).is_err());
    }

    proptest! {
        #[test]
        fn tile_count_matches_closed_form(h in 1usize..300, w in 1usize..300, t in 1usize..80, s in 1usize..80) {
            let grid = TileGrid::new(h, w, t, s).unwrap();
            let axis = |e: usize| if e <= t { 1 } else { ((e - t) as f64 / s as f64).ceil() as usize + 1 };
            prop_assert_eq!(grid.len(), axis(h) * axis(w));
            let (last_r, last_c) = *grid.offsets.last().unwrap();
            prop_assert!(last_r + t >= h && last_c + t >= w);
        }
    }
}
