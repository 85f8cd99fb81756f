use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Orientation, Volume};
use crate::error::{Error, Result};

/// `<name>.vol.json` contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSidecar {
    /// `[nz, ny, nx]`, slowest to fastest.
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub orientation: Orientation,
    pub center_voxel: Option<[usize; 3]>,
}

pub fn sidecar_path(vol_path: &Path) -> PathBuf {
    let mut s = vol_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write little-endian f32 voxels (x fastest) plus the JSON sidecar.
pub fn write_volume(path: &Path, v: &Volume, center_voxel: Option<[usize; 3]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for &x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = VolumeSidecar {
        shape: v.shape(),
        spacing_mm: v.spacing_mm(),
        orientation: v.orientation(),
        center_voxel,
    };
    let sp = sidecar_path(path);
    let json = serde_json::to_vec_pretty(&side).map_err(|e| Error::json(&sp, e))?;
    fs::write(&sp, json).map_err(|e| Error::io(&sp, e))
}

pub fn read_volume(path: &Path) -> Result<(Volume, VolumeSidecar)> {
    let sp = sidecar_path(path);
    let text = fs::read(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: VolumeSidecar = serde_json::from_slice(&text).map_err(|e| Error::json(&sp, e))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = side.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Format(format!(
            "{}: expected {} bytes for shape {:?}, found {}",
            path.display(),
            n * 4,
            side.shape,
            bytes.len()
        )));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let v = Volume::new(side.shape, side.spacing_mm, side.orientation, data)?;
    Ok((v, side))
}
