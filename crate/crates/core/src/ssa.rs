//! Skip self-attention head: stride-4 features become queries, stride-32
//! features become keys/values of a transformer decoder whose class token
//! drives the tile decision.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::nn::{softmax_last, Conv2d, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{Init, ParamStore};
use crate::types::CANDIDA_INDEX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsaConfig {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    /// Query grid side; the C1 patch size is chosen so the grid has this
    /// many cells per side.
    pub query_grid: usize,
}

impl SsaConfig {
    /// Small head for CPU runs; the coarser query grid keeps self-attention
    /// cheap.
    pub fn toy() -> Self {
        Self {
            dim: 32,
            heads: 4,
            depth: 2,
            mlp_hidden: 64,
            query_grid: 8,
        }
    }

    pub fn desk() -> Self {
        Self {
            dim: 128,
            heads: 4,
            depth: 2,
            mlp_hidden: 256,
            query_grid: 16,
        }
    }
}

/// Tokens in `(B, N, d)` layout. With a class token, token 0 is CLS and the
/// remaining `g_h * g_w` tokens follow the spatial grid row-major.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub has_cls: bool,
    pub grid: (usize, usize),
}

impl TokenSequence {
    pub fn spatial(&self) -> Result<Tensor> {
        let n = self.tokens.dim(1)?;
        let expected = self.grid.0 * self.grid.1 + usize::from(self.has_cls);
        if n != expected {
            return Err(shape_err!("{n} tokens do not match grid {:?}", self.grid));
        }
        if self.has_cls {
            Ok(self.tokens.narrow(1, 1, n - 1)?)
        } else {
            Ok(self.tokens.clone())
        }
    }

    pub fn cls(&self) -> Result<Tensor> {
        if !self.has_cls {
            return Err(shape_err!("token sequence has no class token"));
        }
        Ok(self.tokens.narrow(1, 0, 1)?.squeeze(1)?)
    }
}

/// Per-tile decision: candida probability plus the class-token embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileResult {
    pub score: f32,
    pub embedding: Vec<f32>,
    pub logits: [f32; 2],
}

/// Two-way softmax evaluated in f64.
pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

impl TileResult {
    pub fn new(logits: [f32; 2], embedding: Vec<f32>) -> Self {
        let p = softmax2([logits[0] as f64, logits[1] as f64]);
        Self {
            score: p[CANDIDA_INDEX] as f32,
            embedding,
            logits,
        }
    }

    /// Splits batched `(B, 2)` logits and `(B, d)` embeddings into results.
    pub fn from_batch(logits: &Tensor, embedding: &Tensor) -> Result<Vec<Self>> {
        let l = logits.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        let e = embedding.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        Ok(l.into_iter().zip(e).map(|(l, e)| TileResult::new([l[0], l[1]], e)).collect())
    }
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    norm_kv: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl DecoderBlock {
    pub fn new(ps: &ParamStore, cfg: &SsaConfig) -> Result<Self> {
        Ok(Self {
            norm_self: LayerNorm::new(&ps.pp("norm_self"), cfg.dim)?,
            self_attn: MultiHeadAttention::new(&ps.pp("self_attn"), cfg.dim, cfg.heads)?,
            norm_cross: LayerNorm::new(&ps.pp("norm_cross"), cfg.dim)?,
            norm_kv: LayerNorm::new(&ps.pp("norm_kv"), cfg.dim)?,
            cross_attn: MultiHeadAttention::new(&ps.pp("cross_attn"), cfg.dim, cfg.heads)?,
            norm_ff: LayerNorm::new(&ps.pp("norm_ff"), cfg.dim)?,
            ff: FeedForward::new(&ps.pp("ff"), cfg.dim, cfg.mlp_hidden)?,
        })
    }

    /// Self-attention over `[CLS; queries]`, cross-attention into `kv`, then
    /// the feed-forward layer; each pre-normalised with a residual.
    pub fn forward(&self, x: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let h = self.norm_self.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h, None)?)?;
        let h = self.norm_cross.forward(&x)?;
        let kv = self.norm_kv.forward(kv)?;
        let x = (&x + self.cross_attn.forward(&h, &kv, None)?)?;
        let h = self.norm_ff.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct SsaHead {
    pub config: SsaConfig,
    pub patch: usize,
    low_proj: Conv2d,
    high_proj: Linear,
    query_pos: Tensor,
    cls: Tensor,
    pub blocks: Vec<DecoderBlock>,
    final_norm: LayerNorm,
    /// Classifier FC, shared with the attention extractor.
    pub fc: Linear,
}

impl SsaHead {
    pub fn new(ps: &ParamStore, c1_channels: usize, c4_channels: usize, patch: usize, cfg: &SsaConfig) -> Result<Self> {
        if patch == 0 || cfg.depth == 0 || cfg.query_grid == 0 {
            return Err(param_err!("patch, depth and query grid must be positive"));
        }
        let d = cfg.dim;
        let n = cfg.query_grid * cfg.query_grid;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            blocks.push(DecoderBlock::new(&ps.pp(format!("block{i}")), cfg)?);
        }
        Ok(Self {
            config: *cfg,
            patch,
            low_proj: Conv2d::new(&ps.pp("low_proj"), c1_channels, d, patch, patch, 0)?,
            high_proj: Linear::new(&ps.pp("high_proj"), c4_channels, d)?,
            query_pos: ps.get("query_pos", &[n, d], Init::Normal(0.02))?,
            cls: ps.get("cls", &[1, 1, d], Init::Normal(0.02))?,
            blocks,
            final_norm: LayerNorm::new(&ps.pp("final_norm"), d)?,
            fc: Linear::new(&ps.pp("fc"), d, 2)?,
        })
    }

    /// Non-overlapping `patch x patch` blocks of C1, linearly projected.
    pub fn tokenize_low(&self, c1: &Tensor) -> Result<TokenSequence> {
        let (_, _, h, w) = c1.dims4()?;
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(shape_err!("C1 {h}x{w} not divisible by patch {}", self.patch));
        }
        let t = self.low_proj.forward(c1)?;
        let (b, d, gh, gw) = t.dims4()?;
        Ok(TokenSequence {
            tokens: t.reshape((b, d, gh * gw))?.transpose(1, 2)?.contiguous()?,
            has_cls: false,
            grid: (gh, gw),
        })
    }

    /// One token per C4 cell.
    pub fn tokenize_high(&self, c4: &Tensor) -> Result<TokenSequence> {
        let (b, c, h, w) = c4.dims4()?;
        let cells = c4.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        Ok(TokenSequence {
            tokens: self.high_proj.forward(&cells)?,
            has_cls: false,
            grid: (h, w),
        })
    }

    /// Adds the query position embedding, prepends CLS and runs the decoder
    /// blocks. Keys/values receive no positional information.
    pub fn ssa_forward(&self, queries: &TokenSequence, kv: &TokenSequence) -> Result<TokenSequence> {
        let g = self.config.query_grid;
        if queries.grid != (g, g) {
            return Err(shape_err!("query grid {:?}, head expects {g}x{g}", queries.grid));
        }
        let (b, _, d) = queries.tokens.dims3()?;
        if kv.tokens.dim(2)? != d || d != self.config.dim {
            return Err(shape_err!("query dim {d} and kv dim {} must equal {}", kv.tokens.dim(2)?, self.config.dim));
        }
        let q = queries.tokens.broadcast_add(&self.query_pos)?;
        let cls = self.cls.broadcast_as((b, 1, d))?.contiguous()?;
        let mut x = Tensor::cat(&[&cls, &q], 1)?;
        for block in &self.blocks {
            x = block.forward(&x, &kv.tokens)?;
        }
        Ok(TokenSequence {
            tokens: self.final_norm.forward(&x)?,
            has_cls: true,
            grid: queries.grid,
        })
    }

    /// `(logits (B, 2), embedding (B, d))` from the class token.
    pub fn classify(&self, tokens: &TokenSequence) -> Result<(Tensor, Tensor)> {
        let emb = tokens.cls()?;
        Ok((self.fc.forward(&emb)?, emb))
    }
}

/// Softmax candida probability for batched logits.
pub fn candida_prob(logits: &Tensor) -> Result<Tensor> {
    Ok(softmax_last(logits)?.narrow(D::Minus1, CANDIDA_INDEX, 1)?.squeeze(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn head(ps: &ParamStore, cfg: &SsaConfig, c1: usize, c4: usize, patch: usize) -> SsaHead {
        SsaHead::new(ps, c1, c4, patch, cfg).unwrap()
    }

    #[test]
    fn token_counts() {
        let ps = ParamStore::new(0, DType::F32);
        let cfg = SsaConfig {
            query_grid: 16,
            ..SsaConfig::toy()
        };
        let h = head(&ps, &cfg, 8, 64, 2);
        let c1 = Tensor::zeros((1, 8, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let q = h.tokenize_low(&c1).unwrap();
        assert_eq!(q.tokens.dims(), &[1, 256, 32]);
        assert_eq!(q.grid, (16, 16));
        let c4 = Tensor::zeros((1, 64, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(h.tokenize_high(&c4).unwrap().tokens.dims(), &[1, 16, 32]);
        let c4 = Tensor::zeros((1, 64, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(h.tokenize_high(&c4).unwrap().tokens.dims(), &[1, 1024, 32]);
        let out = h.ssa_forward(&q, &h.tokenize_high(&c4).unwrap()).unwrap();
        assert_eq!(out.tokens.dims(), &[1, 257, 32]);
    }

    #[test]
    fn whole_map_patch_gives_one_token() {
        let ps = ParamStore::new(0, DType::F32);
        let cfg = SsaConfig {
            query_grid: 1,
            ..SsaConfig::toy()
        };
        let h = head(&ps, &cfg, 4, 8, 16);
        let c1 = Tensor::ones((1, 4, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(h.tokenize_low(&c1).unwrap().tokens.dims(), &[1, 1, 32]);
        let bad = Tensor::ones((1, 4, 12, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(h.tokenize_low(&bad).is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_tokens() {
        let ps = ParamStore::new(0, DType::F32);
        let h = head(&ps, &SsaConfig::toy(), 8, 64, 2);
        let c1 = Tensor::zeros((2, 8, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let c4 = Tensor::zeros((2, 64, 4, 4), DType::F32, &Device::Cpu).unwrap();
        for t in [h.tokenize_low(&c1).unwrap(), h.tokenize_high(&c4).unwrap()] {
            let m = t.tokens.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(m, 0.0);
        }
    }

    #[test]
    fn classify_requires_cls_and_softmax_closed_forms() {
        let ps = ParamStore::new(0, DType::F32);
        let h = head(&ps, &SsaConfig::toy(), 8, 64, 2);
        let t = TokenSequence {
            tokens: Tensor::zeros((1, 4, 32), DType::F32, &Device::Cpu).unwrap(),
            has_cls: false,
            grid: (2, 2),
        };
        assert!(h.classify(&t).is_err());
        assert_eq!(TileResult::new([0.0, 0.0], vec![]).score, 0.5);
        assert!(TileResult::new([-10.0, 10.0], vec![]).score as f64 >= 1.0 - 1e-8);
        let s = softmax2([1.0, 0.0])[1];
        assert!((s - 1.0 / (1.0 + std::f64::consts::E)).abs() < 1e-15);
        assert!((s - 0.268941).abs() < 1e-6);
    }
}
