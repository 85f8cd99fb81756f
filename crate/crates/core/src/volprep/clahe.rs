use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClaheConfig {
    /// Tile counts per storage axis `[z, y, x]`.
    pub tiles: [usize; 3],
    /// Histogram clip height as a multiple of the uniform bin height. Use
    /// `f64::INFINITY` (or any huge value) for plain equalization.
    pub clip_limit: f64,
    pub bins: usize,
}

impl Default for ClaheConfig {
    fn default() -> Self {
        ClaheConfig { tiles: [2, 4, 4], clip_limit: 2.0, bins: 256 }
    }
}

impl ClaheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tiles.iter().any(|&t| t == 0) {
            return Err(Error::Precondition(format!("CLAHE tiles must be ≥ 1 per axis, got {:?}", self.tiles)));
        }
        if !(self.clip_limit >= 1.0) {
            return Err(Error::Precondition(format!("CLAHE clip limit must be ≥ 1, got {}", self.clip_limit)));
        }
        if self.bins == 0 {
            return Err(Error::Precondition("CLAHE needs at least one bin".into()));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn bin_of(v: f32, bins: usize) -> usize {
    ((v as f64 * bins as f64).floor() as usize).min(bins - 1)
}

/// Tile `k` of `t` along an axis of extent `n` covers `[k·n/t, (k+1)·n/t)`.
fn tile_bounds(n: usize, t: usize) -> Vec<(usize, usize)> {
    (0..t).map(|k| (k * n / t, (k + 1) * n / t)).collect()
}

/// Clipped, redistributed, normalized CDF of one histogram.
pub(crate) fn clipped_cdf(hist: &[f64], clip_limit: f64) -> Vec<f64> {
    let bins = hist.len();
    let count: f64 = hist.iter().sum();
    let clip = clip_limit * count / bins as f64;
    let mut excess = 0.0;
    let clipped: Vec<f64> = hist
        .iter()
        .map(|&h| {
            if h > clip {
                excess += h - clip;
                clip
            } else {
                h
            }
        })
        .collect();
    let share = excess / bins as f64;
    let mut acc = 0.0;
    clipped
        .iter()
        .map(|&h| {
            acc += h + share;
            (acc / count).min(1.0)
        })
        .collect()
}

/// Per-axis blend stencil over tile centers: (lower tile, upper tile, upper weight).
fn tile_stencil(n: usize, t: usize) -> Vec<(usize, usize, f64)> {
    let centers: Vec<f64> = tile_bounds(n, t).iter().map(|&(a, b)| (a + b) as f64 / 2.0).collect();
    (0..n)
        .map(|i| {
            let u = i as f64 + 0.5;
            if u <= centers[0] {
                return (0, 0, 0.0);
            }
            if u >= centers[t - 1] {
                return (t - 1, t - 1, 0.0);
            }
            let k = centers.iter().rposition(|&c| c <= u).unwrap();
            let f = (u - centers[k]) / (centers[k + 1] - centers[k]);
            (k, k + 1, f)
        })
        .collect()
}

/// Contrast-limited adaptive histogram equalization in 3D. Each tile's
/// clipped CDF defines a mapping; every voxel blends the mappings of its
/// eight nearest tile centers trilinearly.
pub fn clahe3d(v: &Volume, cfg: &ClaheConfig) -> Result<Volume> {
    cfg.validate()?;
    let shape = v.shape();
    if let Some(bad) = v.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Precondition(format!("CLAHE input must lie in [0, 1], found {bad}")));
    }
    for a in 0..3 {
        if cfg.tiles[a] > shape[a] {
            return Err(Error::Precondition(format!(
                "{} tiles on axis {a} exceed extent {}",
                cfg.tiles[a], shape[a]
            )));
        }
    }
    let [tz, ty, tx] = cfg.tiles;
    let bins = cfg.bins;
    let bz = tile_bounds(shape[0], tz);
    let by = tile_bounds(shape[1], ty);
    let bx = tile_bounds(shape[2], tx);

    let mut maps = vec![0.0f64; tz * ty * tx * bins];
    let mut hist = vec![0.0f64; bins];
    for (kz, &(z0, z1)) in bz.iter().enumerate() {
        for (ky, &(y0, y1)) in by.iter().enumerate() {
            for (kx, &(x0, x1)) in bx.iter().enumerate() {
                hist.iter_mut().for_each(|h| *h = 0.0);
                for z in z0..z1 {
                    for y in y0..y1 {
                        for x in x0..x1 {
                            hist[bin_of(v.at(z, y, x), bins)] += 1.0;
                        }
                    }
                }
                let t = (kz * ty + ky) * tx + kx;
                maps[t * bins..(t + 1) * bins].copy_from_slice(&clipped_cdf(&hist, cfg.clip_limit));
            }
        }
    }

    let sz = tile_stencil(shape[0], tz);
    let sy = tile_stencil(shape[1], ty);
    let sx = tile_stencil(shape[2], tx);
    let m = |kz: usize, ky: usize, kx: usize, b: usize| maps[((kz * ty + ky) * tx + kx) * bins + b];
    let mut out = Vec::with_capacity(v.len());
    for (z, &(z0, z1, fz)) in sz.iter().enumerate() {
        for (y, &(y0, y1, fy)) in sy.iter().enumerate() {
            for (x, &(x0, x1, fx)) in sx.iter().enumerate() {
                let b = bin_of(v.at(z, y, x), bins);
                let lx = |kz, ky| m(kz, ky, x0, b) + fx * (m(kz, ky, x1, b) - m(kz, ky, x0, b));
                let c0 = lx(z0, y0) + fy * (lx(z0, y1) - lx(z0, y0));
                let c1 = lx(z1, y0) + fy * (lx(z1, y1) - lx(z1, y0));
                out.push((c0 + fz * (c1 - c0)).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Volume::new(shape, v.spacing_mm(), v.orientation(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_volume_stays_constant() {
        let v = Volume::filled([8, 8, 8], 0.3);
        let out = clahe3d(&v, &ClaheConfig { tiles: [2, 2, 2], clip_limit: 2.0, bins: 16 }).unwrap();
        let first = out.data()[0];
        assert!(out.data().iter().all(|&x| x == first));
    }

    #[test]
    fn checkerboard_single_tile() {
        let v = Volume::from_fn([8, 8, 8], |z, y, x| if (z + y + x) % 2 == 0 { 0.1 } else { 0.9 });
        let out = clahe3d(&v, &ClaheConfig { tiles: [1, 1, 1], clip_limit: 2.0, bins: 4 }).unwrap();
        // Both levels hold 256 of 512 voxels; clip height 2·512/4 = 256 so
        // nothing is clipped. CDF at bin 0 is 1/2, at bin 3 is 1.
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let want = if (z + y + x) % 2 == 0 { 0.5 } else { 1.0 };
                    assert_eq!(out.at(z, y, x), want);
                }
            }
        }
    }

    #[test]
    fn clip_redistributes_excess() {
        let cdf = clipped_cdf(&[8.0, 0.0, 0.0, 0.0], 2.0);
        // clip = 4, excess 4 spread as 1 per bin → [5, 1, 1, 1] / 8
        assert_eq!(cdf, vec![5.0 / 8.0, 6.0 / 8.0, 7.0 / 8.0, 1.0]);
    }

    #[test]
    fn rejects_out_of_range_input() {
        let v = Volume::filled([2, 2, 2], 1.5);
        assert!(matches!(clahe3d(&v, &ClaheConfig::default()), Err(Error::Precondition(_))));
        let v = Volume::filled([2, 2, 2], 0.5);
        let bad = ClaheConfig { clip_limit: 0.5, ..ClaheConfig::default() };
        assert!(clahe3d(&v, &bad).is_err());
    }
}
