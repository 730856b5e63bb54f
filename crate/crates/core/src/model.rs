//! Tile classifier: residual encoder followed by either the skip
//! self-attention head or the global-average-pool baseline head.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::detector::images_to_tensor;
use crate::encoder::{Encoder, EncoderConfig, MultiScaleFeatures};
use crate::error::{param_err, Error, Result};
use crate::nn::Linear;
use crate::params::{Checkpoint, ParamStore};
use crate::ssa::{SsaConfig, SsaHead, TileResult, TokenSequence};
use crate::types::TileImage;

pub const CLASSIFIER_ROOT: &str = "classifier";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileModelConfig {
    pub encoder: EncoderConfig,
    /// `None` selects the pooled baseline head.
    pub ssa: Option<SsaConfig>,
    pub tile_size: usize,
}

impl TileModelConfig {
    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut m = self.encoder.metadata();
        m.insert("tile_size".into(), self.tile_size.to_string());
        match &self.ssa {
            Some(s) => {
                m.insert("head".into(), "ssa".into());
                m.insert(
                    "ssa".into(),
                    format!("{},{},{},{},{}", s.dim, s.heads, s.depth, s.mlp_hidden, s.query_grid),
                );
            }
            None => {
                m.insert("head".into(), "gap".into());
            }
        }
        m
    }

    /// Inverse of [`TileModelConfig::metadata`].
    pub fn from_metadata(ckpt: &Checkpoint) -> Result<Self> {
        let mut encoder = EncoderConfig::preset(ckpt.meta("encoder.arch")?)?;
        let widths: Vec<usize> = parse_list(ckpt.meta("encoder.widths")?)?;
        encoder.widths = widths
            .try_into()
            .map_err(|_| Error::Checkpoint("encoder.widths must have 4 entries".into()))?;
        encoder.blocks_per_stage = parse_list(ckpt.meta("encoder.blocks")?)?[0];
        let tile_size = parse_list(ckpt.meta("tile_size")?)?[0];
        let ssa = match ckpt.meta("head")? {
            "gap" => None,
            "ssa" => {
                let v = parse_list(ckpt.meta("ssa")?)?;
                if v.len() != 5 {
                    return Err(Error::Checkpoint("ssa metadata must have 5 entries".into()));
                }
                Some(SsaConfig {
                    dim: v[0],
                    heads: v[1],
                    depth: v[2],
                    mlp_hidden: v[3],
                    query_grid: v[4],
                })
            }
            other => return Err(Error::Checkpoint(format!("unknown head '{other}'"))),
        };
        Ok(Self { encoder, ssa, tile_size })
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Checkpoint(format!("bad integer list '{s}'"))))
        .collect()
}

/// Pooled C4 features followed by the classifier FC.
#[derive(Debug, Clone)]
pub struct GapHead {
    pub fc: Linear,
}

#[derive(Debug, Clone)]
pub enum TileHead {
    Ssa(SsaHead),
    Gap(GapHead),
}

#[derive(Debug, Clone)]
pub struct TileOutput {
    /// `(B, 2)`.
    pub logits: Tensor,
    /// `(B, d)`, the feature that enters the contrastive losses.
    pub embedding: Tensor,
    /// Spatial tokens whose FC response forms the attention map.
    pub spatial: TokenSequence,
}

#[derive(Debug, Clone)]
pub struct TileModel {
    pub config: TileModelConfig,
    pub encoder: Encoder,
    pub head: TileHead,
    pub store: ParamStore,
}

impl TileModel {
    pub fn new(store: &ParamStore, config: &TileModelConfig) -> Result<Self> {
        let root = store.pp(CLASSIFIER_ROOT);
        let encoder = Encoder::new(&root, &config.encoder)?;
        let [c1, _, _, c4] = config.encoder.widths;
        let hp = root.pp("head");
        let head = match &config.ssa {
            Some(ssa) => {
                let h1 = config.tile_size / 4;
                if config.tile_size % 32 != 0 || h1 % ssa.query_grid != 0 || h1 < ssa.query_grid {
                    return Err(param_err!(
                        "tile size {} incompatible with a {}x{} query grid",
                        config.tile_size,
                        ssa.query_grid,
                        ssa.query_grid
                    ));
                }
                TileHead::Ssa(SsaHead::new(&hp, c1, c4, h1 / ssa.query_grid, ssa)?)
            }
            None => TileHead::Gap(GapHead {
                fc: Linear::new(&hp.pp("fc"), c4, 2)?,
            }),
        };
        Ok(Self {
            config: config.clone(),
            encoder,
            head,
            store: root,
        })
    }

    /// The classifier FC; the attention extractor reuses exactly these
    /// arrays.
    pub fn classifier_fc(&self) -> &Linear {
        match &self.head {
            TileHead::Ssa(h) => &h.fc,
            TileHead::Gap(h) => &h.fc,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<TileOutput> {
        let feats = self.encoder.forward(x)?;
        self.head_forward(&feats)
    }

    pub fn head_forward(&self, feats: &MultiScaleFeatures) -> Result<TileOutput> {
        self.head_forward_parts(&feats.c1, &feats.c4)
    }

    pub fn head_forward_parts(&self, c1: &Tensor, c4: &Tensor) -> Result<TileOutput> {
        match &self.head {
            TileHead::Ssa(h) => {
                let q = h.tokenize_low(c1)?;
                let kv = h.tokenize_high(c4)?;
                let spatial = h.ssa_forward(&q, &kv)?;
                let (logits, embedding) = h.classify(&spatial)?;
                Ok(TileOutput {
                    logits,
                    embedding,
                    spatial,
                })
            }
            TileHead::Gap(h) => {
                let (b, c, gh, gw) = c4.dims4()?;
                let embedding = c4.mean((2, 3))?;
                let cells = c4.reshape((b, c, gh * gw))?.transpose(1, 2)?.contiguous()?;
                Ok(TileOutput {
                    logits: h.fc.forward(&embedding)?,
                    embedding,
                    spatial: TokenSequence {
                        tokens: cells,
                        has_cls: false,
                        grid: (gh, gw),
                    },
                })
            }
        }
    }

    /// Batched inference; results are independent of the batch size.
    pub fn predict(&self, tiles: &[&TileImage], batch_size: usize) -> Result<Vec<TileResult>> {
        let mut out = Vec::with_capacity(tiles.len());
        for chunk in tiles.chunks(batch_size.max(1)) {
            let x = images_to_tensor(chunk, self.store.dtype())?;
            let o = self.forward(&x)?;
            out.extend(TileResult::from_batch(&o.logits, &o.embedding)?);
        }
        Ok(out)
    }

    pub fn embed_dim(&self) -> usize {
        match &self.config.ssa {
            Some(s) => s.dim,
            None => self.config.encoder.widths[3],
        }
    }

    pub fn to_checkpoint(&self, extra: &BTreeMap<String, String>) -> Result<Checkpoint> {
        let mut meta = self.config.metadata();
        meta.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        self.store.to_checkpoint(meta)
    }

    /// Builds a model from a checkpoint written by [`TileModel::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        let config = TileModelConfig::from_metadata(ckpt)?;
        let model = TileModel::new(&ParamStore::new(0, dtype), &config)?;
        model.store.load_checkpoint(ckpt)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_tile, StyleParams};
    use crate::types::Label;

    fn cfg(ssa: bool) -> TileModelConfig {
        TileModelConfig {
            encoder: EncoderConfig::toy(),
            ssa: ssa.then(SsaConfig::toy),
            tile_size: 64,
        }
    }

    #[test]
    fn output_shapes() {
        for ssa in [true, false] {
            let ps = ParamStore::new(0, DType::F32);
            let m = TileModel::new(&ps, &cfg(ssa)).unwrap();
            let t = gen_tile(1, Label::Positive, &StyleParams::default(), 64).unwrap();
            let x = images_to_tensor(&[&t, &t], DType::F32).unwrap();
            let o = m.forward(&x).unwrap();
            assert_eq!(o.logits.dims(), &[2, 2]);
            assert_eq!(o.embedding.dims(), &[2, m.embed_dim()]);
            let expected_grid = if ssa { (8, 8) } else { (2, 2) };
            assert_eq!(o.spatial.grid, expected_grid);
        }
    }

    #[test]
    fn rejects_incompatible_tile_size() {
        let ps = ParamStore::new(0, DType::F32);
        let mut c = cfg(true);
        c.tile_size = 48;
        assert!(TileModel::new(&ps, &c).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_predictions() {
        let ps = ParamStore::new(3, DType::F32);
        let m = TileModel::new(&ps, &cfg(true)).unwrap();
        let ckpt = m.to_checkpoint(&BTreeMap::new()).unwrap();
        let m2 = TileModel::from_checkpoint(&Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap(), DType::F32).unwrap();
        let t = gen_tile(2, Label::Negative, &StyleParams::default(), 64).unwrap();
        assert_eq!(m.predict(&[&t], 1).unwrap(), m2.predict(&[&t], 1).unwrap());
        assert_eq!(TileModelConfig::from_metadata(&ckpt).unwrap(), cfg(true));
    }

    #[test]
    fn prediction_independent_of_batch_size() {
        let ps = ParamStore::new(0, DType::F32);
        let m = TileModel::new(&ps, &cfg(true)).unwrap();
        let tiles: Vec<TileImage> = (0..3)
            .map(|s| gen_tile(s, Label::Positive, &StyleParams::default(), 64).unwrap())
            .collect();
        let refs: Vec<&TileImage> = tiles.iter().collect();
        let a = m.predict(&refs, 1).unwrap();
        let b = m.predict(&refs, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.score - y.score).abs() < 1e-5);
        }
    }
}
