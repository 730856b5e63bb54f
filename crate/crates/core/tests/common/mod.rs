#![allow(dead_code)]

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wsi_screen::encoder::{EncoderConfig, Stem};
use wsi_screen::model::{TileModel, TileModelConfig};
use wsi_screen::params::ParamStore;
use wsi_screen::ssa::SsaConfig;

/// Small encoder: 64x64 tiles give 16x16 C1 and 2x2 C4.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        arch: "resnet-tiny".into(),
        stem: Stem::Patch,
        widths: [4, 4, 8, 8],
        blocks_per_stage: 1,
    }
}

/// d = 8, two heads, one block, a 2x2 query grid.
pub fn tiny_ssa() -> SsaConfig {
    SsaConfig {
        dim: 8,
        heads: 2,
        depth: 1,
        mlp_hidden: 16,
        query_grid: 2,
    }
}

pub fn tiny_model_config() -> TileModelConfig {
    TileModelConfig {
        encoder: tiny_encoder(),
        ssa: Some(tiny_ssa()),
        tile_size: 64,
    }
}

pub fn tiny_model(seed: u64, dtype: DType) -> TileModel {
    TileModel::new(&ParamStore::new(seed, dtype), &tiny_model_config()).unwrap()
}

pub fn images(b: usize, size: usize, seed: u64, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..b * 3 * size * size).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect();
    Tensor::from_vec(data, (b, 3, size, size), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Gradient norms below `GRAD_FLOOR * max(1, |L|)` are indistinguishable
/// from finite-difference round-off and count as zero.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Result of comparing analytic and central-difference gradients for one
/// tensor: `||g - n|| / max(||g||, ||n||, floor)` over the checked entries.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub rel_err: f64,
    pub norm: f64,
}

/// Central differences of `loss` for up to `per_tensor` random entries of
/// every variable; `grads` holds the analytic gradients of the same loss.
pub fn grad_check(
    vars: &[(String, Var)],
    grads: &GradStore,
    loss: &dyn Fn() -> f64,
    per_tensor: usize,
    eps: f64,
    seed: u64,
) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floor = GRAD_FLOOR * loss().abs().max(1.0);
    let mut reports = Vec::new();
    for (name, var) in vars {
        let base = var.as_tensor().copy().unwrap();
        let values = flat(&base);
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => flat(g),
            None => vec![0.0; values.len()],
        };
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(per_tensor);
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for &i in &idx {
            let eval = |delta: f64| {
                let mut v = values.clone();
                v[i] += delta;
                let t = Tensor::from_vec(v, base.shape(), &Device::Cpu).unwrap().to_dtype(base.dtype()).unwrap();
                var.set(&t).unwrap();
                loss()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            diff += (analytic[i] - numeric).powi(2);
            scale += analytic[i].powi(2).max(numeric.powi(2));
        }
        var.set(&base).unwrap();
        reports.push(GradReport {
            name: name.clone(),
            checked: idx.len(),
            rel_err: diff.sqrt() / scale.sqrt().max(floor),
            norm: scale.sqrt(),
        });
    }
    reports
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Prints one `criterion N ... PASS/FAIL` line, then fails the test if any
/// check failed.
pub fn report(n: usize, title: &str, checks: &[(String, bool)]) {
    let ok = checks.iter().all(|(_, pass)| *pass);
    println!("criterion {n} [{title}]: {}", if ok { "PASS" } else { "FAIL" });
    for (msg, pass) in checks {
        println!("    {} {msg}", if *pass { "ok  " } else { "FAIL" });
    }
    assert!(ok, "criterion {n} failed");
}
