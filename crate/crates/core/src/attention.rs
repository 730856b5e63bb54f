//! Attention map extraction, mask normalisation, masking and Grad-CAM.

use candle_core::{DType, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::detector::images_to_tensor;
use crate::error::{param_err, shape_err, Error, Result};
use crate::model::TileModel;
use crate::nn::Linear;
use crate::ssa::TokenSequence;
use crate::types::{Image, TileImage, CANDIDA_INDEX};

pub const MASK_SIGMA: f64 = 0.5;
pub const MASK_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// `I * (1 - M)`.
    #[default]
    Soft,
    /// `clamp(I - M, 0, 1)`.
    Literal,
}

/// Row-major `(out, inp)` bilinear interpolation weights with half-pixel
/// centres and edge clamping.
pub fn interp_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let f = src - i0 as f64;
        m[i * inp + i0] += 1.0 - f;
        m[i * inp + i1] += f;
    }
    m
}

/// Bilinear resize of `(B, gh, gw)` maps to `(B, h, w)`, built from two
/// matrix products so gradients pass through.
pub fn bilinear_resize(grid: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, gh, gw) = grid.dims3()?;
    let dev = grid.device();
    let r = Tensor::from_vec(interp_matrix(h, gh), (h, gh), dev)?.to_dtype(grid.dtype())?;
    let c = Tensor::from_vec(interp_matrix(w, gw), (w, gw), dev)?.to_dtype(grid.dtype())?;
    Ok(r.broadcast_matmul(grid)?.broadcast_matmul(&c.t()?)?)
}

/// Plain-slice version of [`bilinear_resize`] for a single map.
pub fn bilinear_resize_vec(grid: &[f64], gh: usize, gw: usize, h: usize, w: usize) -> Vec<f64> {
    let r = interp_matrix(h, gh);
    let c = interp_matrix(w, gw);
    let mut tmp = vec![0.0; h * gw];
    for i in 0..h {
        for k in 0..gh {
            let wr = r[i * gh + k];
            if wr != 0.0 {
                for j in 0..gw {
                    tmp[i * gw + j] += wr * grid[k * gw + j];
                }
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = (0..gw).map(|k| tmp[i * gw + k] * c[j * gw + k]).sum();
        }
    }
    out
}

/// Applies the classifier FC to every spatial token and upsamples the
/// candida channel to `(B, h, w)`.
pub fn extract_attention(tokens: &TokenSequence, fc: &Linear, h: usize, w: usize) -> Result<Tensor> {
    let (gh, gw) = tokens.grid;
    if gh == 0 || gw == 0 {
        return Err(shape_err!("token sequence has no grid shape"));
    }
    let spatial = tokens.spatial()?;
    let b = spatial.dim(0)?;
    let logits = fc.forward(&spatial)?;
    let a = logits.narrow(D::Minus1, CANDIDA_INDEX, 1)?.reshape((b, gh, gw))?;
    bilinear_resize(&a, h, w)
}

/// `sigmoid(s * (A - sigma))`.
pub fn normalize_mask(a: &Tensor, sigma: f64, s: f64) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(&a.affine(s, -s * sigma)?)?)
}

pub fn normalize_mask_scalar(a: f64, sigma: f64, s: f64) -> f64 {
    1.0 / (1.0 + (-s * (a - sigma)).exp())
}

/// `images: (B, 3, H, W)`, `mask: (B, H, W)`.
pub fn apply_mask(images: &Tensor, mask: &Tensor, mode: MaskMode) -> Result<Tensor> {
    let (b, _, h, w) = images.dims4()?;
    if mask.dims() != [b, h, w] {
        return Err(shape_err!("mask {:?} does not match images {:?}", mask.dims(), images.dims()));
    }
    let m = mask.unsqueeze(1)?;
    Ok(match mode {
        MaskMode::Soft => images.broadcast_mul(&m.affine(-1.0, 1.0)?)?,
        MaskMode::Literal => images.broadcast_sub(&m)?.clamp(0.0, 1.0)?,
    })
}

/// Single-image masking on plain pixel buffers; `mask` is row-major `H*W`.
pub fn apply_mask_image(image: &Image, mask: &[f32], mode: MaskMode) -> Result<Image> {
    if mask.len() != image.height() * image.width() {
        return Err(shape_err!("mask of {} values for a {}x{} image", mask.len(), image.height(), image.width()));
    }
    let mut out = image.clone();
    for (p, px) in out.data_mut().chunks_mut(3).enumerate() {
        let m = mask[p];
        for v in px {
            *v = match mode {
                MaskMode::Soft => *v * (1.0 - m),
                MaskMode::Literal => (*v - m).clamp(0.0, 1.0),
            };
        }
    }
    Ok(out)
}

/// Raw attention, mask and masked image for one tile.
#[derive(Debug, Clone)]
pub struct AttentionArtifacts {
    pub a: Vec<f32>,
    pub m: Vec<f32>,
    pub masked: Image,
}

pub fn attention_artifacts(model: &TileModel, tile: &TileImage, mode: MaskMode) -> Result<AttentionArtifacts> {
    let (h, w) = tile.size();
    let x = images_to_tensor(&[tile], model.store.dtype())?;
    let out = model.forward(&x)?;
    let a = extract_attention(&out.spatial, model.classifier_fc(), h, w)?;
    let m = normalize_mask(&a, MASK_SIGMA, MASK_SCALE)?;
    let flat = |t: &Tensor| -> Result<Vec<f32>> { Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?) };
    let m_vec = flat(&m)?;
    let masked = apply_mask_image(&tile.pixels, &m_vec, mode)?;
    Ok(AttentionArtifacts {
        a: flat(&a)?,
        m: m_vec,
        masked,
    })
}

/// Row-major heatmap with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Grad-CAM on an explicit feature map: `c4: (1, C, h, w)`; `head` maps the
/// feature map to `(1, classes)` logits.
pub fn grad_cam_from<F>(c4: &Tensor, head: F, target: usize, height: usize, width: usize) -> Result<Heatmap>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let (b, c, gh, gw) = c4.dims4()?;
    if b != 1 {
        return Err(shape_err!("grad-cam takes a single image, got batch {b}"));
    }
    let var = Var::from_tensor(&c4.detach().to_dtype(DType::F64)?)?;
    let logits = head(&var.as_tensor().to_dtype(c4.dtype())?)?;
    let classes = logits.dim(D::Minus1)?;
    if target >= classes {
        return Err(param_err!("target class {target} outside 0..{classes}"));
    }
    let score = logits.narrow(D::Minus1, target, 1)?.sum_all()?;
    let grads = score.backward()?;
    let g = grads
        .get(var.as_tensor())
        .ok_or_else(|| Error::Tensor(candle_core::Error::Msg("feature map received no gradient".into())))?
        .to_dtype(DType::F64)?;
    let weights = g.mean((2, 3))?.flatten_all()?.to_vec1::<f64>()?;
    let feats = var.as_tensor().reshape((c, gh * gw))?.to_vec2::<f64>()?;
    let mut cam = vec![0.0f64; gh * gw];
    for (wc, row) in weights.iter().zip(&feats) {
        for (acc, v) in cam.iter_mut().zip(row) {
            *acc += wc * v;
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let up = bilinear_resize_vec(&cam, gh, gw, height, width);
    let max = up.iter().cloned().fold(0.0f64, f64::max);
    let data = up
        .iter()
        .map(|&v| if max > 0.0 { (v / max) as f32 } else { 0.0 })
        .collect();
    Ok(Heatmap { height, width, data })
}

/// Grad-CAM of the tile classifier, tapping the last encoder stage.
pub fn grad_cam(model: &TileModel, tile: &TileImage, target: usize) -> Result<Heatmap> {
    let (h, w) = tile.size();
    let x = images_to_tensor(&[tile], model.store.dtype())?;
    let feats = model.encoder.forward(&x)?;
    let c1 = feats.c1.detach();
    grad_cam_from(&feats.c4, |c4| Ok(model.head_forward_parts(&c1, c4)?.logits), target, h, w)
}
