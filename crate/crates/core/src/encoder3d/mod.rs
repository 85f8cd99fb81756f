//! 3D patch transformer encoder with a lightweight decoder for masked
//! autoencoder pretraining.

mod mae;
mod vit;

use serde::{Deserialize, Serialize};

pub use mae::{ENCODER_PREFIX, mae_forward, mae_loss, pretrain, MaeForward, MaeModel, PretrainConfig, PretrainLog, PretrainOutcome};
pub use vit::{encode, init_encoder, EncoderLayout};
pub(crate) use vit::xavier;

use crate::error::{Error, Result};
use crate::ndtensor::{Real, Rng, Tensor};
use crate::volprep::Volume;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    /// Patch extents `[pd, ph, pw]`.
    pub patch: [usize; 3],
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub decoder_dim: usize,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
    pub mask_ratio: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ViTConfig {
    pub fn desk() -> Self {
        ViTConfig {
            patch: [8, 8, 8],
            embed_dim: 64,
            blocks: 4,
            heads: 4,
            mlp_ratio: 4.0,
            decoder_dim: 32,
            decoder_blocks: 1,
            decoder_heads: 2,
            mask_ratio: 0.75,
        }
    }

    /// Geometry for 64×128×128 inputs.
    pub fn full_scale() -> Self {
        ViTConfig {
            patch: [8, 16, 16],
            embed_dim: 768,
            blocks: 12,
            heads: 12,
            decoder_dim: 256,
            decoder_blocks: 4,
            decoder_heads: 8,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch.iter().any(|&p| p == 0) {
            return bad(format!("patch extents must be ≥ 1, got {:?}", self.patch));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} must be a positive multiple of heads {}", self.embed_dim, self.heads));
        }
        if self.decoder_dim == 0 || self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return bad(format!(
                "decoder_dim {} must be a positive multiple of decoder_heads {}",
                self.decoder_dim, self.decoder_heads
            ));
        }
        if !(self.mlp_ratio > 0.0) {
            return bad(format!("mlp_ratio must be > 0, got {}", self.mlp_ratio));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio must lie in (0, 1), got {}", self.mask_ratio));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.patch.iter().product()
    }

    pub fn mlp_dim(&self, width: usize) -> usize {
        ((width as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Patch grid for a volume of `extents`; errors unless every extent is a
    /// multiple of the patch.
    pub fn grid(&self, extents: [usize; 3]) -> Result<[usize; 3]> {
        for a in 0..3 {
            if self.patch[a] == 0 || extents[a] % self.patch[a] != 0 {
                return Err(Error::Config(format!(
                    "volume extents {extents:?} are not divisible by patch {:?}",
                    self.patch
                )));
            }
        }
        Ok([0, 1, 2].map(|a| extents[a] / self.patch[a]))
    }

    pub fn tokens(&self, extents: [usize; 3]) -> Result<usize> {
        Ok(self.grid(extents)?.iter().product())
    }

    pub fn masked_count(&self, tokens: usize) -> usize {
        ((self.mask_ratio * tokens as f64).ceil() as usize).clamp(1, tokens.max(1))
    }
}

/// Token sequence `[T, pd·ph·pw]` in row-major patch order; voxels within a
/// patch are x-fastest.
pub fn patchify<T: Real>(v: &Volume, cfg: &ViTConfig) -> Result<Tensor<T>> {
    let shape = v.shape();
    let g = cfg.grid(shape)?;
    let [pd, ph, pw] = cfg.patch;
    let mut out = Vec::with_capacity(v.len());
    for gz in 0..g[0] {
        for gy in 0..g[1] {
            for gx in 0..g[2] {
                for z in gz * pd..(gz + 1) * pd {
                    for y in gy * ph..(gy + 1) * ph {
                        let i = v.index(z, y, gx * pw);
                        out.extend(v.data()[i..i + pw].iter().map(|&x| T::lit(x as f64)));
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.iter().product(), cfg.patch_len()], out)
}

pub fn unpatchify<T: Real>(tokens: &Tensor<T>, extents: [usize; 3], cfg: &ViTConfig) -> Result<Volume> {
    let g = cfg.grid(extents)?;
    let n_tok: usize = g.iter().product();
    if tokens.shape() != [n_tok, cfg.patch_len()] {
        return Err(Error::Dimension(format!(
            "expected tokens [{n_tok}, {}], got {:?}",
            cfg.patch_len(),
            tokens.shape()
        )));
    }
    let [pd, ph, pw] = cfg.patch;
    let mut v = Volume::filled(extents, 0.0);
    let mut src = tokens.data().iter();
    for gz in 0..g[0] {
        for gy in 0..g[1] {
            for gx in 0..g[2] {
                for z in gz * pd..(gz + 1) * pd {
                    for y in gy * ph..(gy + 1) * ph {
                        let i = v.index(z, y, gx * pw);
                        for d in &mut v.data_mut()[i..i + pw] {
                            *d = src.next().unwrap().as_f64() as f32;
                        }
                    }
                }
            }
        }
    }
    Ok(v)
}

/// Uniformly random `⌈ratio·T⌉`-subset of token indices, sorted.
pub fn sample_mask(tokens: usize, cfg: &ViTConfig, rng: &mut Rng) -> Vec<usize> {
    let mut m: Vec<usize> = rng.permutation(tokens).into_iter().take(cfg.masked_count(tokens)).collect();
    m.sort_unstable();
    m
}

pub fn complement(tokens: usize, masked: &[usize]) -> Vec<usize> {
    let mut hit = vec![false; tokens];
    for &i in masked {
        hit[i] = true;
    }
    (0..tokens).filter(|&i| !hit[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_grid_has_32_tokens_of_512() {
        let v = Volume::filled([16, 32, 32], 0.3);
        let t = patchify::<f32>(&v, &ViTConfig::desk()).unwrap();
        assert_eq!(t.shape(), &[32, 512]);
        for r in 1..32 {
            assert_eq!(t.row(r), t.row(0));
        }
    }

    #[test]
    fn patchify_roundtrip_exact() {
        let mut rng = Rng::new(3, 0);
        let cfg = ViTConfig { patch: [2, 4, 2], ..ViTConfig::desk() };
        let data: Vec<f32> = (0..4 * 8 * 6).map(|_| rng.normal() as f32).collect();
        let v = Volume::from_data([4, 8, 6], data).unwrap();
        let t = patchify::<f32>(&v, &cfg).unwrap();
        assert_eq!(unpatchify(&t, [4, 8, 6], &cfg).unwrap(), v);
    }

    #[test]
    fn indivisible_extent_is_config_error() {
        let v = Volume::filled([10, 32, 32], 0.0);
        assert!(matches!(patchify::<f32>(&v, &ViTConfig::desk()), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_ratio_still_masks_one() {
        let cfg = ViTConfig { mask_ratio: 1e-6, ..ViTConfig::desk() };
        assert_eq!(sample_mask(32, &cfg, &mut Rng::new(0, 0)).len(), 1);
    }

    #[test]
    fn mask_is_deterministic_and_uniform() {
        let cfg = ViTConfig::desk();
        assert_eq!(sample_mask(32, &cfg, &mut Rng::new(5, 1)), sample_mask(32, &cfg, &mut Rng::new(5, 1)));
        let mut rng = Rng::new(9, 0);
        let mut count = [0usize; 32];
        let draws = 10_000;
        for _ in 0..draws {
            for i in sample_mask(32, &cfg, &mut rng) {
                count[i] += 1;
            }
        }
        for c in count {
            let f = c as f64 / draws as f64;
            assert!((f - 0.75).abs() <= 0.02, "{f}");
        }
    }

    #[test]
    fn validate_checks_heads() {
        assert!(ViTConfig { heads: 5, ..ViTConfig::desk() }.validate().is_err());
        assert!(ViTConfig::full_scale().validate().is_ok());
        assert!(ViTConfig { mask_ratio: 1.0, ..ViTConfig::desk() }.validate().is_err());
    }
}
