//! Volumetric preprocessing: RAS reorientation, trilinear resampling,
//! min-max normalization, 3D CLAHE and center crop / zero pad.
//!
//! Storage convention: `shape = [nz, ny, nx]` lists extents slowest to
//! fastest, and voxel data is x-fastest (`index = (z·ny + y)·nx + x`).
//! `spacing_mm` follows the same order, so a 1 mm × 1 mm × 3 mm (x, y, z)
//! grid has `spacing_mm = [3.0, 1.0, 1.0]`.

mod clahe;
mod io;
mod orientation;
mod transform;

use serde::{Deserialize, Serialize};

pub use clahe::{clahe3d, ClaheConfig};
pub use io::{read_volume, sidecar_path, write_volume, VolumeSidecar};
pub use orientation::Orientation;
pub use transform::{crop_or_pad, normalize, reorient_ras, resample};

use crate::error::{Error, Result};

/// 3D scalar grid with voxel spacing and orientation metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    orientation: Orientation,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 3], spacing_mm: [f64; 3], orientation: Orientation, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::Precondition(format!("volume extents must be ≥ 1, got {shape:?}")));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Precondition(format!("voxel spacing must be > 0, got {spacing_mm:?}")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Dimension(format!(
                "volume {shape:?} needs {} voxels, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Volume { shape, spacing_mm, orientation, data })
    }

    /// RAS-oriented volume with unit spacing.
    pub fn from_data(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        Self::new(shape, [1.0; 3], Orientation::RAS, data)
    }

    pub fn filled(shape: [usize; 3], value: f32) -> Self {
        Self::from_data(shape, vec![value; shape.iter().product()]).expect("valid shape")
    }

    pub fn from_fn(shape: [usize; 3], f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::from_data(shape, data).expect("valid shape")
    }

    pub fn with_spacing(self, spacing_mm: [f64; 3]) -> Result<Self> {
        Self::new(self.shape, spacing_mm, self.orientation, self.data)
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.orientation = orientation;
        self
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Full preprocessing recipe, applied as
/// reorient → resample → normalize → CLAHE → crop/pad.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepConfig {
    /// Output spacing in storage order `[z, y, x]`.
    pub target_spacing_mm: [f64; 3],
    pub clahe: ClaheConfig,
    /// Network input geometry `[z, y, x]`.
    pub crop: [usize; 3],
}

impl PrepConfig {
    /// 1×1×3 mm voxels, 64×128×128 input, 2×4×4 CLAHE tiles.
    pub fn full_scale() -> Self {
        PrepConfig { target_spacing_mm: [3.0, 1.0, 1.0], clahe: ClaheConfig::default(), crop: [64, 128, 128] }
    }

    /// Desk-scale geometry (16×32×32).
    pub fn desk() -> Self {
        PrepConfig { crop: [16, 32, 32], ..Self::full_scale() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("target spacing must be > 0, got {:?}", self.target_spacing_mm)));
        }
        if self.crop.iter().any(|&n| n == 0) {
            return Err(Error::Config(format!("crop extents must be ≥ 1, got {:?}", self.crop)));
        }
        self.clahe.validate().map_err(|e| Error::Config(e.to_string()))?;
        for ax in 0..3 {
            if self.clahe.tiles[ax] > self.crop[ax] {
                return Err(Error::Config(format!(
                    "{} CLAHE tiles on axis {ax} exceed crop extent {}",
                    self.clahe.tiles[ax], self.crop[ax]
                )));
            }
        }
        Ok(())
    }
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Run the full preprocessing chain. `center` is the region-of-interest
/// voxel in the input grid; the returned volume is centered on it.
pub fn prep_volume(v: &Volume, center: [usize; 3], cfg: &PrepConfig) -> Result<Volume> {
    let (v, center) = reorient_ras(v, center)?;
    let (v, center) = resample(&v, cfg.target_spacing_mm, center)?;
    let v = normalize(&v);
    let v = clahe3d(&v, &cfg.clahe)?;
    crop_or_pad(&v, cfg.crop, center)
}
