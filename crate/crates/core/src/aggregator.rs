//! Slide-level decisions from tile results: top-k ranking, a small
//! transformer aggregator, and the threshold / MLP baselines.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{Checkpoint, Init, ParamStore};
use crate::ssa::{softmax2, TileResult};
use crate::types::{Label, CANDIDA_INDEX};

pub const DEFAULT_K: usize = 10;
pub const WSI_ROOT: &str = "wsi";
const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKEntry {
    pub score: f32,
    pub embedding: Vec<f32>,
    pub padded: bool,
    /// Position in the input tile list, `None` for padding.
    pub index: Option<usize>,
}

/// The `k` highest-scoring tiles, descending, ties by input index; padded
/// with zero entries when fewer than `k` tiles exist.
pub fn rank_topk(results: &[TileResult], k: usize) -> Result<Vec<TopKEntry>> {
    if k == 0 {
        return Err(param_err!("k must be at least 1"));
    }
    let first = results
        .first()
        .ok_or_else(|| Error::Dataset("slide has no tiles".into()))?;
    let dim = first.embedding.len();
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| results[b].score.total_cmp(&results[a].score).then(a.cmp(&b)));
    let mut out: Vec<TopKEntry> = order
        .into_iter()
        .take(k)
        .map(|i| TopKEntry {
            score: results[i].score,
            embedding: results[i].embedding.clone(),
            padded: false,
            index: Some(i),
        })
        .collect();
    while out.len() < k {
        out.push(TopKEntry {
            score: 0.0,
            embedding: vec![0.0; dim],
            padded: true,
            index: None,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub score: f32,
    pub positive: bool,
}

impl Verdict {
    pub fn from_score(score: f32, tau: f32) -> Self {
        Self {
            score,
            positive: score > tau,
        }
    }

    pub fn label(&self) -> Label {
        if self.positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WsiBundle {
    pub slide_id: String,
    pub tile_results: Vec<TileResult>,
    pub label: Option<Label>,
    pub verdict: Option<Verdict>,
}

/// Mean of the top-`k` tile scores (fewer when the slide is smaller),
/// positive iff above `tau`.
pub fn aggregate_threshold(results: &[TileResult], k: usize, tau: f32) -> Result<Verdict> {
    let top = rank_topk(results, k)?;
    let real: Vec<f64> = top.iter().filter(|e| !e.padded).map(|e| e.score as f64).collect();
    let mean = real.iter().sum::<f64>() / real.len() as f64;
    Ok(Verdict::from_score(mean as f32, tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    Transformer,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WsiConfig {
    pub kind: AggregatorKind,
    /// Tile embedding size.
    pub in_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    pub k: usize,
}

impl WsiConfig {
    pub fn transformer(in_dim: usize, k: usize) -> Self {
        Self {
            kind: AggregatorKind::Transformer,
            in_dim,
            dim: 32,
            heads: 4,
            depth: 2,
            mlp_hidden: 64,
            k,
        }
    }

    pub fn mlp(in_dim: usize, k: usize) -> Self {
        Self {
            kind: AggregatorKind::Mlp,
            ..Self::transformer(in_dim, k)
        }
    }

    pub fn metadata(&self) -> BTreeMap<String, String> {
        let kind = match self.kind {
            AggregatorKind::Transformer => "transformer",
            AggregatorKind::Mlp => "mlp",
        };
        let mut m = BTreeMap::new();
        m.insert("wsi.kind".into(), kind.into());
        m.insert(
            "wsi.shape".into(),
            format!("{},{},{},{},{},{}", self.in_dim, self.dim, self.heads, self.depth, self.mlp_hidden, self.k),
        );
        m
    }

    pub fn from_metadata(ckpt: &Checkpoint) -> Result<Self> {
        let kind = match ckpt.meta("wsi.kind")? {
            "transformer" => AggregatorKind::Transformer,
            "mlp" => AggregatorKind::Mlp,
            other => return Err(Error::Checkpoint(format!("unknown aggregator '{other}'"))),
        };
        let v: Vec<usize> = ckpt
            .meta("wsi.shape")?
            .split(',')
            .map(|p| p.parse().map_err(|_| Error::Checkpoint("bad wsi.shape".into())))
            .collect::<Result<_>>()?;
        if v.len() != 6 {
            return Err(Error::Checkpoint("wsi.shape must have 6 entries".into()));
        }
        Ok(Self {
            kind,
            in_dim: v[0],
            dim: v[1],
            heads: v[2],
            depth: v[3],
            mlp_hidden: v[4],
            k: v[5],
        })
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
}

impl EncoderBlock {
    fn forward(&self, x: &Tensor, key_bias: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, Some(key_bias))?)?;
        let h = self.norm2.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

/// Transformer encoder over the ranked top-k tokens with a class token.
#[derive(Debug, Clone)]
pub struct WsiTransformer {
    in_proj: Linear,
    score_emb: Linear,
    rank_pos: Tensor,
    cls: Tensor,
    blocks: Vec<EncoderBlock>,
    final_norm: LayerNorm,
    fc: Linear,
}

/// Two-layer perceptron over the concatenated top-k embeddings and scores.
#[derive(Debug, Clone)]
pub struct WsiMlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub enum AggregatorNet {
    Transformer(WsiTransformer),
    Mlp(WsiMlp),
}

#[derive(Debug, Clone)]
pub struct Aggregator {
    pub config: WsiConfig,
    pub net: AggregatorNet,
    pub store: ParamStore,
}

/// Stacked `(B, k, d)` embeddings, `(B, k, 1)` scores and `(B, k)` pad flags.
struct Batch {
    emb: Tensor,
    scores: Tensor,
    padded: Vec<Vec<bool>>,
}

fn stack(topk: &[Vec<TopKEntry>], cfg: &WsiConfig, dtype: DType) -> Result<Batch> {
    let b = topk.len();
    let mut emb = Vec::with_capacity(b * cfg.k * cfg.in_dim);
    let mut scores = Vec::with_capacity(b * cfg.k);
    let mut padded = Vec::with_capacity(b);
    for list in topk {
        if list.len() != cfg.k {
            return Err(shape_err!("aggregator expects {} entries, got {}", cfg.k, list.len()));
        }
        if list.iter().all(|e| e.padded) {
            return Err(param_err!("all top-k entries are padding"));
        }
        for e in list {
            if e.embedding.len() != cfg.in_dim {
                return Err(shape_err!("embedding dim {} != {}", e.embedding.len(), cfg.in_dim));
            }
            emb.extend_from_slice(&e.embedding);
            scores.push(e.score);
        }
        padded.push(list.iter().map(|e| e.padded).collect());
    }
    Ok(Batch {
        emb: Tensor::from_vec(emb, (b, cfg.k, cfg.in_dim), &Device::Cpu)?.to_dtype(dtype)?,
        scores: Tensor::from_vec(scores, (b, cfg.k, 1), &Device::Cpu)?.to_dtype(dtype)?,
        padded,
    })
}

impl Aggregator {
    pub fn new(store: &ParamStore, config: &WsiConfig) -> Result<Self> {
        if config.k == 0 || config.in_dim == 0 || config.dim == 0 {
            return Err(param_err!("aggregator sizes must be positive"));
        }
        let ps = store.pp(WSI_ROOT);
        let d = config.dim;
        let net = match config.kind {
            AggregatorKind::Transformer => {
                let mut blocks = Vec::new();
                for i in 0..config.depth {
                    let bp = ps.pp(format!("block{i}"));
                    blocks.push(EncoderBlock {
                        norm1: LayerNorm::new(&bp.pp("norm1"), d)?,
                        attn: MultiHeadAttention::new(&bp.pp("attn"), d, config.heads)?,
                        norm2: LayerNorm::new(&bp.pp("norm2"), d)?,
                        ff: FeedForward::new(&bp.pp("ff"), d, config.mlp_hidden)?,
                    });
                }
                AggregatorNet::Transformer(WsiTransformer {
                    in_proj: Linear::new(&ps.pp("in_proj"), config.in_dim, d)?,
                    score_emb: Linear::new(&ps.pp("score_emb"), 1, d)?,
                    rank_pos: ps.get("rank_pos", &[config.k, d], Init::Normal(0.02))?,
                    cls: ps.get("cls", &[1, 1, d], Init::Normal(0.02))?,
                    blocks,
                    final_norm: LayerNorm::new(&ps.pp("final_norm"), d)?,
                    fc: Linear::new(&ps.pp("fc"), d, 2)?,
                })
            }
            AggregatorKind::Mlp => AggregatorNet::Mlp(WsiMlp {
                fc1: Linear::new(&ps.pp("fc1"), config.k * (config.in_dim + 1), config.mlp_hidden)?,
                fc2: Linear::new(&ps.pp("fc2"), config.mlp_hidden, 2)?,
            }),
        };
        Ok(Self {
            config: *config,
            net,
            store: ps,
        })
    }

    /// `(B, 2)` logits for a batch of ranked top-k lists.
    pub fn forward(&self, topk: &[Vec<TopKEntry>]) -> Result<Tensor> {
        let batch = stack(topk, &self.config, self.store.dtype())?;
        let b = topk.len();
        let k = self.config.k;
        match &self.net {
            AggregatorNet::Transformer(t) => {
                let d = self.config.dim;
                let x = t
                    .in_proj
                    .forward(&batch.emb)?
                    .broadcast_add(&t.score_emb.forward(&batch.scores)?)?
                    .broadcast_add(&t.rank_pos)?;
                let cls = t.cls.broadcast_as((b, 1, d))?.contiguous()?;
                let mut x = Tensor::cat(&[&cls, &x], 1)?;
                let mut bias = Vec::with_capacity(b * (k + 1));
                for flags in &batch.padded {
                    bias.push(0.0);
                    bias.extend(flags.iter().map(|&p| if p { MASK_BIAS } else { 0.0 }));
                }
                let bias = Tensor::from_vec(bias, (b, k + 1), &Device::Cpu)?.to_dtype(self.store.dtype())?;
                for block in &t.blocks {
                    x = block.forward(&x, &bias)?;
                }
                let cls_out = t.final_norm.forward(&x.narrow(1, 0, 1)?.squeeze(1)?)?;
                t.fc.forward(&cls_out)
            }
            AggregatorNet::Mlp(m) => {
                let flat = Tensor::cat(&[&batch.emb, &batch.scores], 2)?.reshape((b, k * (self.config.in_dim + 1)))?;
                m.fc2.forward(&m.fc1.forward(&flat)?.relu()?)
            }
        }
    }

    pub fn verdicts(&self, topk: &[Vec<TopKEntry>], tau: f32) -> Result<Vec<Verdict>> {
        let logits = self.forward(topk)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Ok(logits
            .into_iter()
            .map(|l| Verdict::from_score(softmax2([l[0], l[1]])[CANDIDA_INDEX] as f32, tau))
            .collect())
    }

    /// Ranks one slide's tiles and returns its verdict.
    pub fn decide(&self, results: &[TileResult], tau: f32) -> Result<Verdict> {
        let top = rank_topk(results, self.config.k)?;
        Ok(self.verdicts(&[top], tau)?[0])
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        self.store.to_checkpoint(self.config.metadata())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        let cfg = WsiConfig::from_metadata(ckpt)?;
        let agg = Aggregator::new(&ParamStore::new(0, dtype), &cfg)?;
        agg.store.load_checkpoint(ckpt)?;
        Ok(agg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tr(score: f32, emb: Vec<f32>) -> TileResult {
        TileResult {
            score,
            embedding: emb,
            logits: [0.0, 0.0],
        }
    }

    fn results(scores: &[f32], dim: usize) -> Vec<TileResult> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| tr(s, (0..dim).map(|j| ((i * 3 + j) % 7) as f32 * 0.1 - 0.3).collect()))
            .collect()
    }

    #[test]
    fn topk_sorts_and_pads() {
        let r = results(&[0.9, 0.2, 0.5], 2);
        let top = rank_topk(&r, 2).unwrap();
        assert_eq!(top.iter().map(|e| e.index).collect::<Vec<_>>(), vec![Some(0), Some(2)]);
        assert_eq!(top[1].embedding, r[2].embedding);
        let top = rank_topk(&r, 10).unwrap();
        assert_eq!(top.len(), 10);
        assert_eq!(top.iter().filter(|e| e.padded).count(), 7);
        assert!(top[3..].iter().all(|e| e.score == 0.0 && e.embedding == vec![0.0; 2]));
        assert!(rank_topk(&[], 3).is_err());
        assert!(rank_topk(&r, 0).is_err());
    }

    #[test]
    fn threshold_examples() {
        assert!(!aggregate_threshold(&results(&[0.0; 5], 1), 10, 0.5).unwrap().positive);
        assert!(aggregate_threshold(&results(&[1.0], 1), 1, 0.5).unwrap().positive);
        let v = aggregate_threshold(&results(&[0.9, 0.8, 0.1], 1), 2, 0.5).unwrap();
        assert!((v.score - 0.85).abs() < 1e-6);
        assert!(v.positive);
    }

    #[test]
    fn transformer_contract_and_padding_independence() {
        let ps = ParamStore::new(0, DType::F64);
        let agg = Aggregator::new(&ps, &WsiConfig::transformer(4, 5)).unwrap();
        let r = results(&[0.3, 0.8, 0.6], 4);
        let top = rank_topk(&r, 5).unwrap();
        let logits = agg.forward(&[top.clone()]).unwrap();
        assert_eq!(logits.dims(), &[1, 2]);
        let v = agg.decide(&r, 0.5).unwrap();
        assert!(v.score > 0.0 && v.score < 1.0);
        let mut all_pad = top.clone();
        for e in &mut all_pad {
            e.padded = true;
        }
        assert!(agg.forward(&[all_pad]).is_err());
        assert!(agg.forward(&[top[..4].to_vec()]).is_err());

        // The pad entries' content must not matter.
        let mut noisy = top.clone();
        for e in noisy.iter_mut().filter(|e| e.padded) {
            e.embedding = vec![5.0; 4];
            e.score = 0.7;
        }
        let a = agg.forward(&[top]).unwrap().to_vec2::<f64>().unwrap();
        let b = agg.forward(&[noisy]).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicated_tiles_give_identical_verdict_when_topk_is_unchanged() {
        let ps = ParamStore::new(1, DType::F32);
        let agg = Aggregator::new(&ps, &WsiConfig::transformer(3, 1)).unwrap();
        let r = results(&[0.1, 0.95, 0.4, 0.7], 3);
        let mut twice = r.clone();
        twice.extend(r.iter().cloned());
        assert_eq!(agg.decide(&r, 0.5).unwrap(), agg.decide(&twice, 0.5).unwrap());
    }

    #[test]
    fn mlp_zero_weights_gives_half() {
        let ps = ParamStore::new(0, DType::F64);
        let agg = Aggregator::new(&ps, &WsiConfig::mlp(2, 3)).unwrap();
        let r = results(&[0.2, 0.9], 2);
        assert_eq!(agg.forward(&[rank_topk(&r, 3).unwrap()]).unwrap().dims(), &[1, 2]);
        for (_, v) in ps.named_vars() {
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
        assert_eq!(agg.decide(&r, 0.5).unwrap().score, 0.5);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let ps = ParamStore::new(4, DType::F32);
        let agg = Aggregator::new(&ps, &WsiConfig::transformer(3, 4)).unwrap();
        let ck = agg.to_checkpoint().unwrap();
        let back = Aggregator::from_checkpoint(&ck, DType::F32).unwrap();
        let r = results(&[0.1, 0.95, 0.4], 3);
        assert_eq!(agg.decide(&r, 0.5).unwrap(), back.decide(&r, 0.5).unwrap());
    }

    proptest! {
        #[test]
        fn topk_matches_sort_oracle(
            scores in proptest::collection::vec(prop_oneof![Just(0.5f32), 0.0f32..1.0], 1..60),
            k in 1usize..20,
        ) {
            let r = results(&scores, 1);
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            // Oracle: full sort by (-score, index) then slice.
            idx.sort_by(|&a, &b| (-(scores[a] as f64), a).partial_cmp(&(-(scores[b] as f64), b)).unwrap());
            let top = rank_topk(&r, k).unwrap();
            for (pos, e) in top.iter().enumerate() {
                if pos < scores.len() {
                    prop_assert_eq!(e.index, Some(idx[pos]));
                    prop_assert!(!e.padded);
                } else {
                    prop_assert!(e.padded);
                }
            }
        }

        #[test]
        fn threshold_is_monotone(
            scores in proptest::collection::vec(0.0f32..1.0, 1..20),
            which in 0usize..20,
            bump in 0.0f32..1.0,
        ) {
            let r = results(&scores, 1);
            let before = aggregate_threshold(&r, 3, 0.5).unwrap();
            let mut raised = scores.clone();
            let i = which % scores.len();
            raised[i] = (raised[i] + bump).min(1.0);
            let after = aggregate_threshold(&results(&raised, 1), 3, 0.5).unwrap();
            prop_assert!(!(before.positive && !after.positive));
        }
    }
}
