//! Layer building blocks on top of candle tensors. Everything here is built
//! from differentiable primitive ops so it works in both f32 and f64.

use candle_core::{Tensor, D};

use crate::error::{shape_err, Result};
use crate::ops::{conv2d, group_norm, normalize_last};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone)]
pub struct Linear {
    /// `(in, out)` so that `y = x W + b`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(ps: &ParamStore, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            weight: ps.get("weight", &[fan_in, fan_out], Init::Uniform(bound))?,
            bias: ps.get("bias", &[fan_out], Init::Zeros)?,
        })
    }

    pub fn with_init(ps: &ParamStore, fan_in: usize, fan_out: usize, w: Init, b: Init) -> Result<Self> {
        Ok(Self {
            weight: ps.get("weight", &[fan_in, fan_out], w)?,
            bias: ps.get("bias", &[fan_out], b)?,
        })
    }

    /// Applies to the last axis of any-rank input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        let fan_in = self.weight.dim(0)?;
        if dims.last() != Some(&fan_in) {
            return Err(shape_err!("linear layer expects last dim {fan_in}, got {dims:?}"));
        }
        let rows = x.elem_count() / fan_in;
        let y = x.reshape((rows, fan_in))?.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        let mut out = dims.to_vec();
        *out.last_mut().expect("non-empty") = self.weight.dim(1)?;
        Ok(y.reshape(out)?)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(ps: &ParamStore, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.get("weight", &[cout, cin, kernel, kernel], Init::Kaiming(cin * kernel * kernel))?,
            bias: ps.get("bias", &[cout], Init::Zeros)?,
            stride,
            padding,
        })
    }

    pub fn with_bias_init(
        ps: &ParamStore,
        cin: usize,
        cout: usize,
        kernel: usize,
        weight: Init,
        bias: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: ps.get("weight", &[cout, cin, kernel, kernel], weight)?,
            bias: ps.get("bias", &[cout], bias)?,
            stride: 1,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, &self.bias, self.stride, self.padding)
    }
}

/// Group normalisation over `(B, C, H, W)`; identical in training and
/// evaluation.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub groups: usize,
}

pub const NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(ps: &ParamStore, channels: usize) -> Result<Self> {
        let groups = (channels / 4).clamp(1, 8);
        let groups = if channels % groups == 0 { groups } else { 1 };
        Ok(Self {
            gamma: ps.get("gamma", &[channels], Init::Ones)?,
            beta: ps.get("beta", &[channels], Init::Zeros)?,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        group_norm(x, &self.gamma, &self.beta, self.groups, NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &ParamStore, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.get("gamma", &[dim], Init::Ones)?,
            beta: ps.get("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = normalize_last(x, NORM_EPS)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Numerically stable softmax along the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs (self-attention passes the same tensor twice).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &ParamStore, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(shape_err!("embed dim {dim} not divisible by {heads} heads"));
        }
        Ok(Self {
            q: Linear::new(&ps.pp("q"), dim, dim)?,
            k: Linear::new(&ps.pp("k"), dim, dim)?,
            v: Linear::new(&ps.pp("v"), dim, dim)?,
            out: Linear::new(&ps.pp("out"), dim, dim)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// `query: (B, Nq, d)`, `kv: (B, Nk, d)`; `key_bias` is an optional
    /// additive `(B, Nk)` term applied to the attention logits (large
    /// negative values mask keys out).
    pub fn forward(&self, query: &Tensor, kv: &Tensor, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, nq, d) = query.dims3()?;
        let (bk, _, dk) = kv.dims3()?;
        if b != bk || d != dk {
            return Err(shape_err!("attention query {:?} incompatible with kv {:?}", query.dims(), kv.dims()));
        }
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(kv)?)?;
        let v = self.split_heads(&self.v.forward(kv)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut logits = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(bias) = key_bias {
            let nk = bias.dim(1)?;
            logits = logits.broadcast_add(&bias.reshape((b, 1, 1, nk))?)?;
        }
        let attn = softmax_last(&logits)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, nq, d))?;
        self.out.forward(&ctx)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(ps: &ParamStore, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&ps.pp("fc1"), dim, hidden)?,
            fc2: Linear::new(&ps.pp("fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [1000.0, 0.0, -1000.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardises() {
        let ps = ParamStore::new(0, DType::F64);
        let ln = LayerNorm::new(&ps, 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 6.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn masked_keys_get_no_weight() {
        let ps = ParamStore::new(1, DType::F64);
        let mha = MultiHeadAttention::new(&ps, 4, 2).unwrap();
        let q = Tensor::randn(0f64, 1.0, (1, 2, 4), &Device::Cpu).unwrap();
        let kv = Tensor::randn(0f64, 1.0, (1, 3, 4), &Device::Cpu).unwrap();
        let bias = Tensor::new(&[[0.0f64, 0.0, -1e9]], &Device::Cpu).unwrap();
        let a = mha.forward(&q, &kv, Some(&bias)).unwrap();
        let b = mha.forward(&q, &kv.narrow(1, 0, 2).unwrap(), None).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }
}
