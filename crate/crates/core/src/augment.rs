//! Photometric augmentation between the two views of a sample, plus a
//! dihedral transform applied to the sample before both views are formed.
//! Geometry never differs between the views, so a mask computed on the
//! augmented view stays aligned with the original.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::synth::StyleParams;
use crate::types::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Maximum relative brightness change.
    pub brightness: f32,
    /// Maximum relative contrast change.
    pub contrast: f32,
    /// Maximum hue rotation in turns.
    pub hue: f32,
    pub noise_std: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            brightness: 0.1,
            contrast: 0.1,
            hue: 0.03,
            noise_std: 0.01,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            hue: 0.0,
            noise_std: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f32, hi: f32| v.is_finite() && (0.0..=hi).contains(&v);
        if !ok(self.brightness, 0.2) || !ok(self.contrast, 0.3) || !ok(self.hue, 0.1) || !ok(self.noise_std, 0.2) {
            return Err(param_err!("augmentation strengths out of range: {self:?}"));
        }
        Ok(())
    }
}

/// Random photometric jitter plus Gaussian pixel noise. The identity
/// configuration returns an exact copy without drawing from `rng`.
pub fn augment<R: Rng>(image: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    if cfg.is_identity() {
        return image.clone();
    }
    let mut draw = |m: f32| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
    let style = StyleParams {
        brightness: 1.0 + draw(cfg.brightness),
        contrast: 1.0 + draw(cfg.contrast),
        hue_shift: draw(cfg.hue),
        ..StyleParams::default()
    };
    let mut out = image.clone();
    for px in out.data_mut().chunks_mut(3) {
        let v = style.apply([px[0], px[1], px[2]]);
        px.copy_from_slice(&v);
    }
    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, cfg.noise_std).expect("validated std");
        for v in out.data_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    out
}

/// One of the eight symmetries of the square: `k & 3` quarter turns
/// clockwise, then a horizontal flip when `k & 4` is set. Only square
/// images are transformed; `k = 0` is the identity.
pub fn dihedral(image: &Image, k: u8) -> Image {
    let n = image.height();
    if k & 7 == 0 || n != image.width() {
        return image.clone();
    }
    let mut out = image.clone();
    for y in 0..n {
        for x in 0..n {
            let (mut sy, mut sx) = (y, if k & 4 != 0 { n - 1 - x } else { x });
            for _ in 0..(k & 3) {
                // Undo one clockwise quarter turn: (y, x) <- (n-1-x, y).
                (sy, sx) = (n - 1 - sx, sy);
            }
            out.set(y, x, image.get(sy, sx));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img() -> Image {
        let data = (0..8 * 8 * 3).map(|i| (i % 17) as f32 / 16.0).collect();
        Image::new(8, 8, data).unwrap()
    }

    #[test]
    fn identity_is_bitwise_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img(), &AugmentConfig::identity(), &mut rng), img());
    }

    #[test]
    fn jitter_stays_in_range_and_is_seeded() {
        let cfg = AugmentConfig::default();
        let a = augment(&img(), &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = augment(&img(), &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_ne!(a, img());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(AugmentConfig { hue: 0.5, ..cfg }.validate().is_err());
    }

    #[test]
    fn dihedral_group_structure() {
        let im = img();
        assert_eq!(dihedral(&im, 0), im);
        // A quarter turn moves the top-left pixel to the top-right.
        let r = dihedral(&im, 1);
        assert_eq!(r.get(0, 7), im.get(0, 0));
        assert_eq!(r.get(7, 7), im.get(0, 7));
        // Four quarter turns and two flips are identities.
        let mut x = im.clone();
        for _ in 0..4 {
            x = dihedral(&x, 1);
        }
        assert_eq!(x, im);
        assert_eq!(dihedral(&dihedral(&im, 4), 4), im);
        // All eight elements are distinct on a generic image.
        let all: Vec<Image> = (0..8).map(|k| dihedral(&im, k)).collect();
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(all[i], all[j]);
            }
        }
    }
}
