//! Residual convolutional backbone producing stride-4/8/16/32 feature maps.

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::nn::{Conv2d, GroupNorm};
use crate::params::{Checkpoint, ParamStore};

pub const ENCODER_PREFIX: &str = "encoder";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stem {
    /// One 4x4 stride-4 convolution.
    Patch,
    /// Two stride-2 convolutions, the first with the given kernel size.
    Strided(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub arch: String,
    pub stem: Stem,
    pub widths: [usize; 4],
    pub blocks_per_stage: usize,
}

impl EncoderConfig {
    /// CPU-friendly preset used by tests and acceptance runs.
    pub fn toy() -> Self {
        Self {
            arch: "resnet-toy".into(),
            stem: Stem::Strided(3),
            widths: [8, 16, 32, 64],
            blocks_per_stage: 1,
        }
    }

    pub fn desk() -> Self {
        Self {
            arch: "resnet-desk".into(),
            stem: Stem::Strided(3),
            widths: [16, 32, 64, 128],
            blocks_per_stage: 2,
        }
    }

    /// 18-layer widths.
    pub fn paper() -> Self {
        Self {
            arch: "resnet-18".into(),
            stem: Stem::Strided(7),
            widths: [64, 128, 256, 512],
            blocks_per_stage: 2,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" | "resnet-toy" => Ok(Self::toy()),
            "desk" | "resnet-desk" => Ok(Self::desk()),
            "paper" | "resnet-18" => Ok(Self::paper()),
            other => Err(param_err!("unknown encoder preset '{other}'")),
        }
    }

    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("encoder.arch".into(), self.arch.clone());
        m.insert(
            "encoder.widths".into(),
            self.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
        );
        m.insert("encoder.blocks".into(), self.blocks_per_stage.to_string());
        m
    }
}

/// Encoder stage outputs, low to high level. Layout is `(B, C, H, W)`.
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub c1: Tensor,
    pub c2: Tensor,
    pub c3: Tensor,
    pub c4: Tensor,
}

impl MultiScaleFeatures {
    pub fn stages(&self) -> [&Tensor; 4] {
        [&self.c1, &self.c2, &self.c3, &self.c4]
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
    shortcut: Option<(Conv2d, GroupNorm)>,
}

impl ResidualBlock {
    fn new(ps: &ParamStore, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(&ps.pp("down"), cin, cout, 1, stride, 0)?,
                GroupNorm::new(&ps.pp("down_gn"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&ps.pp("conv1"), cin, cout, 3, stride, 1)?,
            gn1: GroupNorm::new(&ps.pp("gn1"), cout)?,
            conv2: Conv2d::new(&ps.pp("conv2"), cout, cout, 3, 1, 1)?,
            gn2: GroupNorm::new(&ps.pp("gn2"), cout)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.gn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let h = self.gn2.forward(&self.conv2.forward(&h)?)?;
        let skip = match &self.shortcut {
            Some((conv, gn)) => gn.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    stem: Vec<(Conv2d, GroupNorm)>,
    stages: Vec<Vec<ResidualBlock>>,
    store: ParamStore,
}

impl Encoder {
    /// Registers the encoder under `<root>.encoder`.
    pub fn new(root: &ParamStore, config: &EncoderConfig) -> Result<Self> {
        let ps = root.pp(ENCODER_PREFIX);
        let w = config.widths;
        if w.iter().any(|&c| c == 0) || config.blocks_per_stage == 0 {
            return Err(param_err!("encoder widths and block count must be positive"));
        }
        let sp = ps.pp("stem");
        let stem = match config.stem {
            Stem::Patch => vec![(
                Conv2d::new(&sp.pp("conv0"), 3, w[0], 4, 4, 0)?,
                GroupNorm::new(&sp.pp("gn0"), w[0])?,
            )],
            Stem::Strided(k) => vec![
                (Conv2d::new(&sp.pp("conv0"), 3, w[0], k, 2, k / 2)?, GroupNorm::new(&sp.pp("gn0"), w[0])?),
                (Conv2d::new(&sp.pp("conv1"), w[0], w[0], 3, 2, 1)?, GroupNorm::new(&sp.pp("gn1"), w[0])?),
            ],
        };
        let mut stages = Vec::with_capacity(4);
        let mut cin = w[0];
        for (s, &cout) in w.iter().enumerate() {
            let stage_ps = ps.pp(format!("stage{}", s + 1));
            let mut blocks = Vec::with_capacity(config.blocks_per_stage);
            for b in 0..config.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(ResidualBlock::new(&stage_ps.pp(format!("block{b}")), cin, cout, stride)?);
                cin = cout;
            }
            stages.push(blocks);
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
            store: ps,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn out_channels(&self) -> [usize; 4] {
        self.config.widths
    }

    /// `x: (B, 3, H, W)` in `[0, 1]`, with `H` and `W` divisible by 32.
    pub fn forward(&self, x: &Tensor) -> Result<MultiScaleFeatures> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(shape_err!("encoder expects 3 input channels, got {c}"));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(shape_err!("input {h}x{w} is not divisible by 32"));
        }
        let mut h = x.affine(4.0, -2.0)?;
        for (conv, gn) in &self.stem {
            h = gn.forward(&conv.forward(&h)?)?.relu()?;
        }
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(&h)?;
            }
            outs.push(h.clone());
        }
        let mut it = outs.into_iter();
        Ok(MultiScaleFeatures {
            c1: it.next().expect("4 stages"),
            c2: it.next().expect("4 stages"),
            c3: it.next().expect("4 stages"),
            c4: it.next().expect("4 stages"),
        })
    }

    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        let mut meta = self.config.metadata();
        meta.insert("seed".into(), seed.to_string());
        self.store.to_checkpoint(meta)
    }

    /// Copies encoder weights from a checkpoint produced by any model that
    /// shares this encoder architecture.
    pub fn load_pretrained(&self, ckpt: &Checkpoint) -> Result<()> {
        let arch = ckpt.meta("encoder.arch")?;
        if arch != self.config.arch {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint '{arch}', encoder '{}'",
                self.config.arch
            )));
        }
        // Names are relative to the owning model root, which may differ
        // between the detector and the classifier.
        let own_prefix = self.store.prefix().to_string();
        let mut remapped = Checkpoint {
            metadata: ckpt.metadata.clone(),
            arrays: BTreeMap::new(),
        };
        for (name, arr) in &ckpt.arrays {
            if let Some(pos) = name.find(&format!("{ENCODER_PREFIX}.")) {
                if pos == 0 || name.as_bytes()[pos - 1] == b'.' {
                    let rel = &name[pos + ENCODER_PREFIX.len() + 1..];
                    remapped.arrays.insert(format!("{own_prefix}.{rel}"), arr.clone());
                }
            }
        }
        self.store.load_checkpoint(&remapped)
    }

    /// Freezes the stem plus the first `n_stages` stages (`0` freezes
    /// nothing). Any previous encoder freezing is cleared first.
    pub fn freeze_prefix(&self, n_stages: usize) -> Result<()> {
        if n_stages > 4 {
            return Err(param_err!("n_stages {n_stages} outside 0..=4"));
        }
        self.store.unfreeze_all();
        if n_stages == 0 {
            return Ok(());
        }
        let base = self.store.prefix().to_string();
        let mut prefixes = vec![format!("{base}.stem.")];
        for s in 1..=n_stages {
            prefixes.push(format!("{base}.stage{s}."));
        }
        self.store.freeze(|name| prefixes.iter().any(|p| name.starts_with(p)));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    fn input(h: usize, w: usize, dtype: DType) -> Tensor {
        Tensor::rand(0f32, 1f32, (1, 3, h, w), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    #[test]
    fn stride_contract_128() {
        let ps = ParamStore::new(0, DType::F32);
        let enc = Encoder::new(&ps, &EncoderConfig::toy()).unwrap();
        let f = enc.forward(&input(128, 128, DType::F32)).unwrap();
        assert_eq!(f.c1.dims(), &[1, 8, 32, 32]);
        assert_eq!(f.c4.dims(), &[1, 64, 4, 4]);
    }

    #[test]
    fn stride_contract_1024_desk() {
        let ps = ParamStore::new(0, DType::F32);
        let enc = Encoder::new(&ps, &EncoderConfig::desk()).unwrap();
        let f = enc.forward(&input(1024, 1024, DType::F32)).unwrap();
        assert_eq!(&f.c1.dims()[2..], &[256, 256]);
        assert_eq!(&f.c4.dims()[2..], &[32, 32]);
    }

    #[test]
    fn rejects_non_divisible_input() {
        let ps = ParamStore::new(0, DType::F32);
        let enc = Encoder::new(&ps, &EncoderConfig::toy()).unwrap();
        assert!(enc.forward(&input(100, 128, DType::F32)).is_err());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let ps = ParamStore::new(0, DType::F32);
        let enc = Encoder::new(&ps, &EncoderConfig::toy()).unwrap();
        let x = input(64, 64, DType::F32);
        let a = enc.forward(&x).unwrap().c4.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = enc.forward(&x).unwrap().c4.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_schema_is_a_function_of_config() {
        let a = ParamStore::new(0, DType::F32);
        let b = ParamStore::new(99, DType::F32);
        Encoder::new(&a, &EncoderConfig::desk()).unwrap();
        Encoder::new(&b, &EncoderConfig::desk()).unwrap();
        assert_eq!(a.names(), b.names());
        assert_eq!(a.num_elements(), b.num_elements());
    }

    #[test]
    fn freeze_prefix_selects_stem_and_leading_stages() {
        let ps = ParamStore::new(0, DType::F32);
        let enc = Encoder::new(&ps, &EncoderConfig::toy()).unwrap();
        let total = ps.trainable_vars().len();
        enc.freeze_prefix(0).unwrap();
        assert_eq!(ps.trainable_vars().len(), total);
        enc.freeze_prefix(1).unwrap();
        for name in ps.names() {
            let frozen = name.starts_with("encoder.stem.") || name.starts_with("encoder.stage1.");
            assert_eq!(ps.is_frozen(&name), frozen, "{name}");
        }
        enc.freeze_prefix(4).unwrap();
        assert!(ps.trainable_vars().is_empty());
        assert!(enc.freeze_prefix(5).is_err());
    }

    #[test]
    fn load_pretrained_roundtrip_and_errors() {
        let a = ParamStore::new(0, DType::F32);
        let enc_a = Encoder::new(&a, &EncoderConfig::toy()).unwrap();
        let b = ParamStore::new(1, DType::F32);
        let enc_b = Encoder::new(&b.pp("classifier"), &EncoderConfig::toy()).unwrap();
        let ckpt = enc_a.to_checkpoint(0).unwrap();
        enc_b.load_pretrained(&ckpt).unwrap();
        let sa: Vec<_> = a.snapshot().unwrap().into_values().collect();
        let sb: Vec<_> = b.snapshot().unwrap().into_values().collect();
        assert_eq!(sa, sb);

        let mut broken = ckpt.clone();
        broken.arrays.remove("encoder.stage2.block0.conv1.weight");
        let err = enc_b.load_pretrained(&broken).unwrap_err().to_string();
        assert!(err.contains("stage2.block0.conv1.weight"), "{err}");

        let mut other_arch = ckpt;
        other_arch.metadata.insert("encoder.arch".into(), "resnet-18".into());
        assert!(enc_b.load_pretrained(&other_arch).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn stride_contract_for_random_sizes(hm in 1usize..5, wm in 1usize..5) {
            let ps = ParamStore::new(0, DType::F32);
            let enc = Encoder::new(&ps, &EncoderConfig::toy()).unwrap();
            let (h, w) = (32 * hm, 32 * wm);
            let f = enc.forward(&input(h, w, DType::F32)).unwrap();
            for (t, s) in f.stages().iter().zip([4, 8, 16, 32]) {
                prop_assert_eq!(&t.dims()[2..], &[h / s, w / s]);
            }
        }
    }
}
