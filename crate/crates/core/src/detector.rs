//! Detection pre-training: feature pyramid over C2-C4, shared anchor head,
//! focal classification loss and smooth-L1 box regression.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{param_err, shape_err, Error, Result};
use crate::nn::Conv2d;
use crate::params::{Checkpoint, Init, ParamStore};
use crate::types::{BBox, TileImage};

pub const ANCHOR_SCALES: [f32; 3] = [1.0, 1.26, 1.59];
/// Height / width ratios; extreme values fit elongated filaments.
pub const ANCHOR_RATIOS: [f32; 3] = [0.2, 1.0, 5.0];
pub const PYRAMID_STRIDES: [usize; 3] = [8, 16, 32];

/// Anchor in centre form, pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl Anchor {
    pub fn to_box(&self) -> BBox {
        BBox::new(
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }
}

/// Dense anchors for every pyramid level, ordered level, row, column,
/// ratio, scale; this matches the flattened head output.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
    pub scales: Vec<f32>,
    pub ratios: Vec<f32>,
    /// `(stride, grid_h, grid_w)` per level.
    pub levels: Vec<(usize, usize, usize)>,
}

impl AnchorSet {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn generate(height: usize, width: usize, strides: &[usize], scales: &[f32], ratios: &[f32]) -> Self {
        let mut anchors = Vec::new();
        let mut levels = Vec::new();
        for &stride in strides {
            let (gh, gw) = (height / stride, width / stride);
            let base = 4.0 * stride as f32;
            for y in 0..gh {
                for x in 0..gw {
                    let (cx, cy) = ((x as f32 + 0.5) * stride as f32, (y as f32 + 0.5) * stride as f32);
                    for &r in ratios {
                        for &s in scales {
                            let size = base * s;
                            anchors.push(Anchor {
                                cx,
                                cy,
                                w: size / r.sqrt(),
                                h: size * r.sqrt(),
                            });
                        }
                    }
                }
            }
            levels.push((stride, gh, gw));
        }
        Self {
            anchors,
            scales: scales.to_vec(),
            ratios: ratios.to_vec(),
            levels,
        }
    }

    pub fn default_for(height: usize, width: usize) -> Self {
        Self::generate(height, width, &PYRAMID_STRIDES, &ANCHOR_SCALES, &ANCHOR_RATIOS)
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorStatus {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone)]
pub struct DetectionTargets {
    pub status: Vec<AnchorStatus>,
    /// `(dcx, dcy, dlog_w, dlog_h)` for positive anchors only.
    pub offsets: Vec<Option<[f32; 4]>>,
}

impl DetectionTargets {
    pub fn positives(&self) -> impl Iterator<Item = (usize, [f32; 4])> + '_ {
        self.offsets.iter().enumerate().filter_map(|(i, o)| o.map(|o| (i, o)))
    }

    pub fn num_positive(&self) -> usize {
        self.status.iter().filter(|s| **s == AnchorStatus::Positive).count()
    }
}

pub fn encode_offsets(anchor: &Anchor, gt: &BBox) -> [f32; 4] {
    let (gcx, gcy) = gt.center();
    [
        (gcx - anchor.cx) / anchor.w,
        (gcy - anchor.cy) / anchor.h,
        (gt.width() / anchor.w).ln(),
        (gt.height() / anchor.h).ln(),
    ]
}

pub fn decode_offsets(anchor: &Anchor, d: [f32; 4]) -> BBox {
    let cx = anchor.cx + d[0] * anchor.w;
    let cy = anchor.cy + d[1] * anchor.h;
    let w = anchor.w * d[2].clamp(-6.0, 6.0).exp();
    let h = anchor.h * d[3].clamp(-6.0, 6.0).exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Labels anchors by IoU: positive at `>= iou_pos` or when the anchor is the
/// best match of some ground-truth box, negative below `iou_neg`, otherwise
/// ignored. Ties in the best-match rule go to the lowest anchor index.
pub fn assign_anchors(anchors: &AnchorSet, gt_boxes: &[BBox], iou_pos: f32, iou_neg: f32) -> Result<DetectionTargets> {
    if !(0.0..=1.0).contains(&iou_neg) || !(0.0..=1.0).contains(&iou_pos) || iou_neg > iou_pos {
        return Err(param_err!("thresholds must satisfy 0 <= iou_neg <= iou_pos <= 1"));
    }
    if let Some(b) = gt_boxes.iter().find(|b| b.area() <= 0.0) {
        return Err(param_err!("degenerate ground-truth box {b:?}"));
    }
    let n = anchors.len();
    let mut best_iou = vec![0f32; n];
    let mut best_gt: Vec<Option<usize>> = vec![None; n];
    let mut gt_best: Vec<(f32, usize)> = vec![(-1.0, 0); gt_boxes.len()];
    for (i, a) in anchors.anchors.iter().enumerate() {
        let ab = a.to_box();
        for (g, gt) in gt_boxes.iter().enumerate() {
            let iou = ab.iou(gt);
            if best_gt[i].is_none() || iou > best_iou[i] {
                best_iou[i] = iou;
                best_gt[i] = Some(g);
            }
            if iou > gt_best[g].0 {
                gt_best[g] = (iou, i);
            }
        }
    }
    let mut forced: BTreeMap<usize, usize> = BTreeMap::new();
    for (g, &(_, i)) in gt_best.iter().enumerate() {
        forced.entry(i).or_insert(g);
    }
    let mut status = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n);
    for i in 0..n {
        let matched = if let Some(&g) = forced.get(&i) {
            Some(g)
        } else if best_gt[i].is_some() && best_iou[i] >= iou_pos {
            best_gt[i]
        } else {
            None
        };
        match matched {
            Some(g) => {
                status.push(AnchorStatus::Positive);
                offsets.push(Some(encode_offsets(&anchors.anchors[i], &gt_boxes[g])));
            }
            None => {
                status.push(if best_iou[i] < iou_neg {
                    AnchorStatus::Negative
                } else {
                    AnchorStatus::Ignore
                });
                offsets.push(None);
            }
        }
    }
    Ok(DetectionTargets { status, offsets })
}

/// Sum over non-ignored anchors of `-alpha_t (1 - p_t)^gamma ln p_t`,
/// divided by the number of positive anchors (at least 1).
///
/// `prob` holds one probability per anchor (any shape, flattened in anchor
/// order), `status` the matching anchor labels.
pub fn focal_loss(prob: &Tensor, status: &[AnchorStatus], alpha: f64, gamma: f64) -> Result<Tensor> {
    let prob = prob.flatten_all()?;
    if prob.dim(0)? != status.len() {
        return Err(shape_err!("{} probabilities for {} anchors", prob.dim(0)?, status.len()));
    }
    let (lo, hi) = (
        prob.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        prob.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?,
    );
    if lo <= 0.0 || hi >= 1.0 || !lo.is_finite() || !hi.is_finite() {
        return Err(param_err!("probabilities must lie in (0,1); got range [{lo}, {hi}]"));
    }
    let dtype = prob.dtype();
    let dev = prob.device();
    let target: Vec<f64> = status.iter().map(|s| f64::from(*s == AnchorStatus::Positive)).collect();
    let weight: Vec<f64> = status.iter().map(|s| f64::from(*s != AnchorStatus::Ignore)).collect();
    let positives: f64 = status.iter().filter(|s| **s == AnchorStatus::Positive).count() as f64;
    let t = Tensor::from_vec(target, status.len(), dev)?.to_dtype(dtype)?;
    let w = Tensor::from_vec(weight, status.len(), dev)?.to_dtype(dtype)?;
    let one_minus_t = t.affine(-1.0, 1.0)?;
    let p_t = ((&prob * &t)? + (prob.affine(-1.0, 1.0)? * &one_minus_t)?)?;
    let alpha_t = t.affine(2.0 * alpha - 1.0, 1.0 - alpha)?;
    let one_minus_pt = p_t.affine(-1.0, 1.0)?;
    let modulator = if gamma == 0.0 {
        one_minus_pt.ones_like()?
    } else if gamma == 2.0 {
        one_minus_pt.sqr()?
    } else {
        one_minus_pt.powf(gamma)?
    };
    let per_anchor = (alpha_t * modulator)?.mul(&p_t.log()?)?.neg()?;
    Ok(((per_anchor * w)?.sum_all()? / positives.max(1.0))?)
}

/// Smooth-L1 (beta = 1) summed over the four offsets and averaged over the
/// rows of `pred` / `target` (positive anchors). Zero when there are none.
pub fn box_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(shape_err!("box predictions {:?} vs targets {:?}", pred.dims(), target.dims()));
    }
    let (n, four) = pred.dims2()?;
    if four != 4 {
        return Err(shape_err!("box offsets must have 4 columns, got {four}"));
    }
    if n == 0 {
        return Ok(Tensor::zeros((), pred.dtype(), pred.device())?);
    }
    let diff = (pred - target)?.abs()?;
    let quad = diff.clamp(0.0, 1.0)?;
    let per = ((quad.sqr()? * 0.5)? + (diff - quad)?)?;
    Ok((per.sum_all()? / n as f64)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub encoder: EncoderConfig,
    pub fpn_channels: usize,
    pub iou_pos: f32,
    pub iou_neg: f32,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub score_threshold: f32,
    pub nms_iou: f32,
}

impl DetectorConfig {
    pub fn for_encoder(encoder: EncoderConfig) -> Self {
        let fpn_channels = (encoder.widths[3] / 2).max(16);
        Self {
            encoder,
            fpn_channels,
            iou_pos: 0.5,
            iou_neg: 0.4,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            score_threshold: 0.5,
            nms_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
struct Fpn {
    lateral: Vec<Conv2d>,
    output: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
struct AnchorHead {
    cls_hidden: Conv2d,
    cls_out: Conv2d,
    box_hidden: Conv2d,
    box_out: Conv2d,
    per_cell: usize,
}

/// Encoder + pyramid + anchor head.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub encoder: Encoder,
    fpn: Fpn,
    head: AnchorHead,
    pub store: ParamStore,
}

#[derive(Debug, Clone)]
pub struct DetectorOutput {
    /// `(B, A)` classification logits.
    pub cls_logits: Tensor,
    /// `(B, A, 4)` regression offsets.
    pub box_offsets: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f32,
}

pub fn images_to_tensor(tiles: &[&TileImage], dtype: DType) -> Result<Tensor> {
    let (h, w) = tiles
        .first()
        .map(|t| t.size())
        .ok_or_else(|| param_err!("empty image batch"))?;
    let mut data = Vec::with_capacity(tiles.len() * 3 * h * w);
    for t in tiles {
        if t.size() != (h, w) {
            return Err(shape_err!("mixed tile sizes in batch"));
        }
        data.extend(t.pixels.to_chw());
    }
    Ok(Tensor::from_vec(data, (tiles.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

impl Detector {
    pub fn new(store: &ParamStore, config: &DetectorConfig) -> Result<Self> {
        let root = store.pp("detector");
        let encoder = Encoder::new(&root, &config.encoder)?;
        let f = config.fpn_channels;
        let widths = config.encoder.widths;
        let fp = root.pp("fpn");
        let mut lateral = Vec::new();
        let mut output = Vec::new();
        for (i, &c) in widths[1..].iter().enumerate() {
            lateral.push(Conv2d::new(&fp.pp(format!("lateral{i}")), c, f, 1, 1, 0)?);
            output.push(Conv2d::new(&fp.pp(format!("output{i}")), f, f, 3, 1, 1)?);
        }
        let per_cell = ANCHOR_SCALES.len() * ANCHOR_RATIOS.len();
        let hp = root.pp("head");
        let prior = 0.01f64;
        let head = AnchorHead {
            cls_hidden: Conv2d::new(&hp.pp("cls_hidden"), f, f, 3, 1, 1)?,
            cls_out: Conv2d::with_bias_init(
                &hp.pp("cls_out"),
                f,
                per_cell,
                3,
                Init::Normal(0.01),
                Init::Const(-((1.0 - prior) / prior).ln()),
            )?,
            box_hidden: Conv2d::new(&hp.pp("box_hidden"), f, f, 3, 1, 1)?,
            box_out: Conv2d::with_bias_init(&hp.pp("box_out"), f, 4 * per_cell, 3, Init::Normal(0.01), Init::Zeros)?,
            per_cell,
        };
        Ok(Self {
            config: config.clone(),
            encoder,
            fpn: Fpn { lateral, output },
            head,
            store: root,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<DetectorOutput> {
        let feats = self.encoder.forward(x)?;
        let inputs = [&feats.c2, &feats.c3, &feats.c4];
        let mut merged: Vec<Tensor> = vec![Tensor::zeros(1, x.dtype(), x.device())?; 3];
        let mut top: Option<Tensor> = None;
        for lvl in (0..3).rev() {
            let mut lat = self.fpn.lateral[lvl].forward(inputs[lvl])?;
            if let Some(t) = &top {
                lat = (lat + t.upsample_nearest2d(inputs[lvl].dim(2)?, inputs[lvl].dim(3)?)?)?;
            }
            top = Some(lat.clone());
            merged[lvl] = self.fpn.output[lvl].forward(&lat)?;
        }
        let b = x.dim(0)?;
        let a = self.head.per_cell;
        let mut cls = Vec::new();
        let mut boxes = Vec::new();
        for p in &merged {
            let (_, _, h, w) = p.dims4()?;
            let c = self.head.cls_out.forward(&self.head.cls_hidden.forward(p)?.relu()?)?;
            cls.push(c.permute((0, 2, 3, 1))?.reshape((b, h * w * a))?);
            let r = self.head.box_out.forward(&self.head.box_hidden.forward(p)?.relu()?)?;
            boxes.push(r.reshape((b, a, 4, h, w))?.permute((0, 3, 4, 1, 2))?.reshape((b, h * w * a, 4))?);
        }
        Ok(DetectorOutput {
            cls_logits: Tensor::cat(&cls, 1)?,
            box_offsets: Tensor::cat(&boxes, 1)?,
        })
    }

    /// Loss of one batch against precomputed anchor targets.
    pub fn loss(&self, x: &Tensor, targets: &[&DetectionTargets]) -> Result<(Tensor, Tensor)> {
        let out = self.forward(x)?;
        let prob = candle_nn::ops::sigmoid(&out.cls_logits)?.clamp(1e-6, 1.0 - 1e-6)?;
        let status: Vec<AnchorStatus> = targets.iter().flat_map(|t| t.status.iter().copied()).collect();
        let focal = focal_loss(&prob, &status, self.config.focal_alpha, self.config.focal_gamma)?;
        let n_anchors = out.cls_logits.dim(1)?;
        let mut idx = Vec::new();
        let mut tgt = Vec::new();
        for (b, t) in targets.iter().enumerate() {
            for (i, o) in t.positives() {
                idx.push((b * n_anchors + i) as u32);
                tgt.extend_from_slice(&o);
            }
        }
        let boxes = if idx.is_empty() {
            Tensor::zeros((), x.dtype(), x.device())?
        } else {
            let flat = out.box_offsets.reshape((x.dim(0)? * n_anchors, 4))?;
            let sel = flat.index_select(&Tensor::new(idx.as_slice(), x.device())?, 0)?;
            let target = Tensor::from_vec(tgt, (idx.len(), 4), x.device())?.to_dtype(x.dtype())?;
            box_loss(&sel, &target)?
        };
        Ok((focal, boxes))
    }

    /// Highest anchor probability in the tile: the tile score used by the
    /// detection + threshold baseline.
    pub fn tile_scores(&self, tiles: &[&TileImage]) -> Result<Vec<f32>> {
        let x = images_to_tensor(tiles, self.store.dtype())?;
        let out = self.forward(&x)?;
        let p = candle_nn::ops::sigmoid(&out.cls_logits)?.max(D::Minus1)?;
        Ok(p.to_dtype(DType::F32)?.to_vec1::<f32>()?)
    }

    /// Decoded boxes above the score threshold after greedy NMS.
    pub fn detect(&self, tile: &TileImage) -> Result<Vec<Detection>> {
        let (h, w) = tile.size();
        let anchors = AnchorSet::default_for(h, w);
        let x = images_to_tensor(&[tile], self.store.dtype())?;
        let out = self.forward(&x)?;
        let p = candle_nn::ops::sigmoid(&out.cls_logits)?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let d = out.box_offsets.to_dtype(DType::F32)?.squeeze(0)?.to_vec2::<f32>()?;
        let mut cands: Vec<Detection> = p
            .iter()
            .enumerate()
            .filter(|(_, &s)| s >= self.config.score_threshold)
            .map(|(i, &s)| Detection {
                bbox: decode_offsets(&anchors.anchors[i], [d[i][0], d[i][1], d[i][2], d[i][3]]),
                score: s,
            })
            .collect();
        cands.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(nms(&cands, self.config.nms_iou))
    }

    pub fn encoder_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        self.encoder.to_checkpoint(seed)
    }

    pub fn head_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = self.store.pp("fpn").to_checkpoint(self.config.encoder.metadata())?;
        ckpt.merge(&self.store.pp("head").to_checkpoint(BTreeMap::new())?);
        Ok(ckpt)
    }
}

/// Greedy non-maximum suppression over score-sorted detections.
pub fn nms(sorted: &[Detection], iou: f32) -> Vec<Detection> {
    let mut keep: Vec<Detection> = Vec::new();
    for d in sorted {
        if keep.iter().all(|k| k.bbox.iou(&d.bbox) <= iou) {
            keep.push(*d);
        }
    }
    keep
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DetectTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 3e-4,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectLogRow {
    pub epoch: usize,
    pub focal: f64,
    #[serde(rename = "box")]
    pub box_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct DetectorRun {
    pub detector: Detector,
    pub encoder_ckpt: Checkpoint,
    pub head_ckpt: Checkpoint,
    pub log: Vec<DetectLogRow>,
    /// Total loss after every optimiser step.
    pub step_losses: Vec<f64>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Trains the detector with Adam and returns the encoder checkpoint (head
/// weights are kept in a separate checkpoint).
pub fn train_detector(
    tiles: &[TileImage],
    det_config: &DetectorConfig,
    config: &DetectTrainConfig,
) -> Result<DetectorRun> {
    if tiles.is_empty() || tiles.iter().all(|t| t.boxes.is_empty()) {
        return Err(Error::Dataset("detector training needs at least one annotated box".into()));
    }
    if config.batch_size == 0 {
        return Err(param_err!("batch size must be positive"));
    }
    let store = ParamStore::new(config.seed, DType::F32);
    let detector = Detector::new(&store, det_config)?;
    let (h, w) = tiles[0].size();
    let anchors = AnchorSet::default_for(h, w);
    let targets: Vec<DetectionTargets> = tiles
        .iter()
        .map(|t| assign_anchors(&anchors, &t.boxes, det_config.iou_pos, det_config.iou_neg))
        .collect::<Result<_>>()?;
    let mut opt = AdamW::new(
        store.trainable_vars(),
        ParamsAdamW {
            lr: config.lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xde7e_c7);
    let mut order: Vec<usize> = (0..tiles.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sf, mut sb, mut n) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TileImage> = chunk.iter().map(|&i| &tiles[i]).collect();
            let tgts: Vec<&DetectionTargets> = chunk.iter().map(|&i| &targets[i]).collect();
            let x = images_to_tensor(&batch, DType::F32)?;
            let (focal, boxes) = detector.loss(&x, &tgts)?;
            let total = (&focal + &boxes)?;
            opt.backward_step(&total)?;
            let (f, b) = (scalar(&focal)?, scalar(&boxes)?);
            step_losses.push(f + b);
            sf += f * chunk.len() as f64;
            sb += b * chunk.len() as f64;
            n += chunk.len();
        }
        let (focal, box_loss) = (sf / n as f64, sb / n as f64);
        log.push(DetectLogRow {
            epoch,
            focal,
            box_loss,
            total: focal + box_loss,
        });
    }
    Ok(DetectorRun {
        encoder_ckpt: detector.encoder_checkpoint(config.seed)?,
        head_ckpt: detector.head_checkpoint()?,
        detector,
        log,
        step_losses,
    })
}

pub fn write_detect_log(log: &[DetectLogRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
