//! Training loops for the tile classifier and the slide aggregator, and the
//! PT/SSA/CL ablation harness.

use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{rank_topk, Aggregator, TopKEntry};
use crate::attention::{apply_mask, extract_attention, normalize_mask, MaskMode, MASK_SCALE, MASK_SIGMA};
use crate::augment::{augment, dihedral};
use crate::config::RunConfig;
use crate::detector::{images_to_tensor, train_detector};
use crate::error::{param_err, Error, Result};
use crate::losses::{l2_normalize, total_loss, triplet_loss, LossTensors};
use crate::metrics::{evaluate, FoldSplit, Metrics, MetricsReport};
use crate::model::TileModel;
use crate::params::{Checkpoint, ParamStore};
use crate::ssa::{candida_prob, softmax2, TileResult, TokenSequence};
use crate::synth::Slide;
use crate::types::{Label, TileImage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveOptions {
    /// Weight of the contrastive terms; zero skips the masked branch.
    pub alpha: f64,
    pub margin: f64,
    pub mask_mode: MaskMode,
}

impl ObjectiveOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            alpha: cfg.effective_alpha(),
            margin: cfg.margin,
            mask_mode: cfg.mask_mode,
        }
    }
}

/// One step of the attention-guided objective.
///
/// The augmented and original images share a forward pass. The mask is
/// derived from the augmented image's attention map and removes evidence
/// from the original image; the masked image takes a second pass.
pub fn tile_objective(
    model: &TileModel,
    orig: &Tensor,
    aug: &Tensor,
    labels: &[u32],
    opts: &ObjectiveOptions,
) -> Result<LossTensors> {
    let (b, _, h, w) = orig.dims4()?;
    if opts.alpha == 0.0 {
        let out = model.forward(aug)?;
        let zero = Tensor::zeros((), orig.dtype(), orig.device())?;
        return total_loss(&out.logits, labels, &zero, &zero, &zero, 0.0);
    }
    let out = model.forward(&Tensor::cat(&[aug, orig], 0)?)?;
    let aug_tokens = TokenSequence {
        tokens: out.spatial.tokens.narrow(0, 0, b)?,
        ..out.spatial.clone()
    };
    let a = extract_attention(&aug_tokens, model.classifier_fc(), h, w)?;
    let m = normalize_mask(&a, MASK_SIGMA, MASK_SCALE)?;
    let masked = apply_mask(orig, &m, opts.mask_mode)?;
    let out_m = model.forward(&masked)?;
    let f_aug = l2_normalize(&out.embedding.narrow(0, 0, b)?)?;
    let f_orig = l2_normalize(&out.embedding.narrow(0, b, b)?)?;
    let f_masked = l2_normalize(&out_m.embedding)?;
    let tri = triplet_loss(&f_aug, &f_orig, &f_masked, opts.margin)?;
    let am = candida_prob(&out_m.logits)?.mean_all()?;
    let focus = m.mean_all()?;
    total_loss(&out.logits.narrow(0, 0, b)?, labels, &tri, &am, &focus, opts.alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub epoch: usize,
    pub l_ce: f64,
    pub l_tri: f64,
    pub l_am: f64,
    pub l_focus: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_total: f64,
    pub val_ce: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TileRun {
    pub model: TileModel,
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRow>,
    pub epochs: Vec<EpochRow>,
    pub initial_val_ce: Option<f64>,
    /// Epoch whose weights were kept, `None` for the untrained model.
    pub best_epoch: Option<usize>,
}

fn adam(vars: Vec<candle_core::Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?)
}

/// Mean cross-entropy of tile results against labels, in f64.
pub fn results_ce(results: &[TileResult], labels: &[Label]) -> f64 {
    let total: f64 = results
        .iter()
        .zip(labels)
        .map(|(r, l)| {
            let p = softmax2([r.logits[0] as f64, r.logits[1] as f64]);
            -p[l.index()].max(1e-300).ln()
        })
        .sum();
    total / results.len().max(1) as f64
}

fn split_auc(scores: &[f64], labels: &[Label]) -> Option<f64> {
    let pos: Vec<bool> = labels.iter().map(|&l| l == Label::Positive).collect();
    crate::metrics::auc(scores, &pos).ok()
}

/// Trains the tile classifier. With `cfg.pt` the encoder starts from the
/// detector checkpoint and its leading stages are frozen. Weights from the
/// epoch with the best validation AUC (then lowest validation CE) are kept.
pub fn train_tile_classifier(
    train: &[TileImage],
    val: &[TileImage],
    cfg: &RunConfig,
    pretrained: Option<&Checkpoint>,
) -> Result<TileRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let store = ParamStore::new(cfg.seed, DType::F32);
    let model = TileModel::new(&store, &cfg.tile_model()?)?;
    if cfg.pt {
        let ckpt = pretrained.ok_or_else(|| {
            Error::Checkpoint("pre-training is enabled but no detector checkpoint was given".into())
        })?;
        model.encoder.load_pretrained(ckpt)?;
        model.encoder.freeze_prefix(cfg.freeze_stages)?;
    }
    let opts = ObjectiveOptions::from_config(cfg);
    let aug_cfg = cfg.augment();
    let mut opt = adam(store.trainable_vars(), cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_e5);
    let val_refs: Vec<&TileImage> = val.iter().collect();
    let val_labels: Vec<Label> = val.iter().map(|t| t.label).collect();
    let eval_val = |m: &TileModel| -> Result<(Option<f64>, Option<f64>)> {
        if val.is_empty() {
            return Ok((None, None));
        }
        let r = m.predict(&val_refs, 16)?;
        let scores: Vec<f64> = r.iter().map(|x| x.score as f64).collect();
        Ok((Some(results_ce(&r, &val_labels)), split_auc(&scores, &val_labels)))
    };
    let extra = [("seed".to_string(), cfg.seed.to_string()), ("flags".to_string(), cfg.flag_string())]
        .into_iter()
        .collect();
    let initial_val_ce = eval_val(&model)?.0;
    let mut best: Option<(f64, f64, usize, Checkpoint)> = None;
    let mut log = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_tile) {
            let base: Vec<TileImage> = chunk
                .iter()
                .map(|&i| {
                    let t = &train[i];
                    if cfg.aug_dihedral {
                        let k = rng.gen_range(0..8u8);
                        TileImage {
                            pixels: dihedral(&t.pixels, k),
                            ..t.clone()
                        }
                    } else {
                        t.clone()
                    }
                })
                .collect();
            let batch: Vec<&TileImage> = base.iter().collect();
            let augmented: Vec<TileImage> = batch
                .iter()
                .map(|t| TileImage {
                    pixels: augment(&t.pixels, &aug_cfg, &mut rng),
                    ..(*t).clone()
                })
                .collect();
            let aug_refs: Vec<&TileImage> = augmented.iter().collect();
            let orig = images_to_tensor(&batch, DType::F32)?;
            let aug = images_to_tensor(&aug_refs, DType::F32)?;
            let labels: Vec<u32> = batch.iter().map(|t| t.label.index() as u32).collect();
            let losses = tile_objective(&model, &orig, &aug, &labels, &opts)?;
            opt.backward_step(&losses.total)?;
            let b = losses.bundle()?;
            log.push(TrainLogRow {
                step,
                epoch,
                l_ce: b.l_ce,
                l_tri: b.l_tri,
                l_am: b.l_am,
                l_focus: b.l_focus,
                total: b.total,
            });
            step += 1;
            sum += b.total * chunk.len() as f64;
            n += chunk.len();
        }
        let (val_ce, val_auc) = eval_val(&model)?;
        epochs.push(EpochRow {
            epoch,
            train_total: sum / n as f64,
            val_ce,
            val_auc,
        });
        let key = (val_auc.unwrap_or(0.0), val_ce.unwrap_or(0.0));
        let better = match &best {
            None => true,
            Some((auc, ce, _, _)) => key.0 > *auc || (key.0 == *auc && key.1 < *ce),
        };
        if better {
            best = Some((key.0, key.1, epoch, model.to_checkpoint(&extra)?));
        }
    }
    let best_epoch = best.as_ref().map(|b| b.2);
    if let Some((_, _, _, ckpt)) = &best {
        store.load_checkpoint(ckpt)?;
    }
    store.unfreeze_all();
    Ok(TileRun {
        checkpoint: model.to_checkpoint(&extra)?,
        model,
        log,
        epochs,
        initial_val_ce,
        best_epoch,
    })
}

/// Tile results of one slide, ready for aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideInput {
    pub slide_id: String,
    pub results: Vec<TileResult>,
    pub label: Label,
}

pub fn score_slides(model: &TileModel, slides: &[Slide]) -> Result<Vec<SlideInput>> {
    slides
        .iter()
        .map(|s| {
            if s.tiles.is_empty() {
                return Err(Error::Dataset(format!("slide {} has no tiles", s.manifest.slide_id)));
            }
            let refs: Vec<&TileImage> = s.tiles.iter().collect();
            Ok(SlideInput {
                slide_id: s.manifest.slide_id.clone(),
                results: model.predict(&refs, 16)?,
                label: s.manifest.slide_label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WsiLogRow {
    pub epoch: usize,
    pub train_ce: f64,
}

#[derive(Debug, Clone)]
pub struct WsiRun {
    pub aggregator: Aggregator,
    pub checkpoint: Checkpoint,
    pub log: Vec<WsiLogRow>,
    /// CE on the training slides after every optimiser step.
    pub step_losses: Vec<f64>,
}

/// Trains the aggregator on precomputed tile results with cross-entropy on
/// slide labels. The tile network is not touched.
pub fn train_aggregator(slides: &[SlideInput], in_dim: usize, cfg: &RunConfig) -> Result<WsiRun> {
    if slides.is_empty() {
        return Err(Error::Dataset("no training slides".into()));
    }
    let topk: Vec<Vec<TopKEntry>> = slides.iter().map(|s| rank_topk(&s.results, cfg.k)).collect::<Result<_>>()?;
    let labels: Vec<u32> = slides.iter().map(|s| s.label.index() as u32).collect();
    let store = ParamStore::new(cfg.seed ^ 0x5a1de, DType::F32);
    let aggregator = Aggregator::new(&store, &cfg.wsi(in_dim))?;
    let mut opt = adam(store.trainable_vars(), cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3051);
    let mut order: Vec<usize> = (0..slides.len()).collect();
    let mut log = Vec::with_capacity(cfg.wsi_epochs);
    let mut step_losses = Vec::new();
    for epoch in 0..cfg.wsi_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_wsi) {
            let batch: Vec<Vec<TopKEntry>> = chunk.iter().map(|&i| topk[i].clone()).collect();
            let y: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
            let ce = crate::losses::cross_entropy(&aggregator.forward(&batch)?, &y)?;
            opt.backward_step(&ce)?;
            let v = ce.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            step_losses.push(v);
            sum += v * chunk.len() as f64;
            n += chunk.len();
        }
        log.push(WsiLogRow {
            epoch,
            train_ce: sum / n as f64,
        });
    }
    Ok(WsiRun {
        checkpoint: aggregator.to_checkpoint()?,
        aggregator,
        log,
        step_losses,
    })
}

/// Scores the slides with the (frozen) tile model, then trains the
/// aggregator.
pub fn train_wsi(model: &TileModel, slides: &[Slide], cfg: &RunConfig) -> Result<WsiRun> {
    let inputs = score_slides(model, slides)?;
    train_aggregator(&inputs, model.embed_dim(), cfg)
}

/// Slide CE of an aggregator over labelled inputs.
pub fn aggregator_ce(aggregator: &Aggregator, slides: &[SlideInput]) -> Result<f64> {
    let topk: Vec<Vec<TopKEntry>> = slides
        .iter()
        .map(|s| rank_topk(&s.results, aggregator.config.k))
        .collect::<Result<_>>()?;
    let labels: Vec<u32> = slides.iter().map(|s| s.label.index() as u32).collect();
    let ce = crate::losses::cross_entropy(&aggregator.forward(&topk)?, &labels)?;
    Ok(ce.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Candida scores of the tile model on a labelled tile set, evaluated.
pub fn evaluate_tiles(model: &TileModel, tiles: &[TileImage]) -> Result<Metrics> {
    let refs: Vec<&TileImage> = tiles.iter().collect();
    let r = model.predict(&refs, 16)?;
    let scores: Vec<f64> = r.iter().map(|x| x.score as f64).collect();
    let pos: Vec<bool> = tiles.iter().map(|t| t.label == Label::Positive).collect();
    evaluate(&scores, &pos)
}

/// The eight PT/SSA/CL combinations in table order (PT most significant).
pub fn ablation_grid() -> Vec<[bool; 3]> {
    (0..8u8).map(|i| [i & 4 != 0, i & 2 != 0, i & 1 != 0]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub pt: bool,
    pub ssa: bool,
    pub cl: bool,
    pub report: MetricsReport,
}

fn select<'a>(tiles: &'a [TileImage], ids: &[String]) -> Result<Vec<TileImage>> {
    let by_id: std::collections::HashMap<&str, &'a TileImage> = tiles.iter().map(|t| (t.tile_id.as_str(), t)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|t| (*t).clone())
                .ok_or_else(|| Error::Dataset(format!("fold references unknown tile '{id}'")))
        })
        .collect()
}

/// Trains and tests every flag combination of `grid` on every fold. Rows
/// with pre-training use `pretrained` when given; otherwise a detector is
/// trained on each fold's training tiles (once per fold).
pub fn run_ablation(
    tiles: &[TileImage],
    folds: &[FoldSplit],
    grid: &[[bool; 3]],
    base: &RunConfig,
    pretrained: Option<&Checkpoint>,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() || folds.is_empty() {
        return Err(param_err!("ablation needs at least one combination and one fold"));
    }
    let mut detectors: Vec<Option<Checkpoint>> = vec![None; folds.len()];
    let mut rows = Vec::with_capacity(grid.len());
    for &[pt, ssa, cl] in grid {
        let cfg = RunConfig { pt, ssa, cl, ..base.clone() };
        let mut per_fold = Vec::with_capacity(folds.len());
        for (fi, fold) in folds.iter().enumerate() {
            let train = select(tiles, &fold.train)?;
            let ckpt = match pretrained {
                Some(c) => Some(c),
                None if pt => {
                    if detectors[fi].is_none() {
                        let run = train_detector(&train, &cfg.detector()?, &cfg.detect_train())?;
                        detectors[fi] = Some(run.encoder_ckpt);
                    }
                    detectors[fi].as_ref()
                }
                None => None,
            };
            let run = train_tile_classifier(&train, &select(tiles, &fold.val)?, &cfg, ckpt)?;
            per_fold.push(evaluate_tiles(&run.model, &select(tiles, &fold.test)?)?);
        }
        rows.push(AblationRow {
            pt,
            ssa,
            cl,
            report: MetricsReport::from_folds(per_fold)?,
        });
    }
    Ok(rows)
}

/// Table layout: flag columns then `mean±std` percentages.
pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["PT", "SSA", "CL", "AUC", "ACC", "Sen", "Spe", "F1", "runs"])?;
    for r in rows {
        let flag = |f: bool| if f { "1" } else { "0" }.to_string();
        let mut rec = vec![flag(r.pt), flag(r.ssa), flag(r.cl)];
        for (m, s) in r.report.mean.as_array().iter().zip(r.report.std.as_array()) {
            rec.push(format!("{:.2}±{:.2}", m * 100.0, s * 100.0));
        }
        rec.push(r.report.folds.len().to_string());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io {
        path: "<memory>".into(),
        source: e.into_error(),
    })?;
    String::from_utf8(bytes).map_err(|e| param_err!("{e}"))
}

pub fn write_csv_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
