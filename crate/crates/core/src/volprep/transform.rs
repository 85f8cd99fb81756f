use super::{Orientation, Volume};
use crate::error::{Error, Result};

fn strides(shape: [usize; 3]) -> [usize; 3] {
    [shape[1] * shape[2], shape[2], 1]
}

/// Permute and flip axes so the volume is RAS-oriented. `center` is mapped
/// into the output grid alongside the data.
pub fn reorient_ras(v: &Volume, center: [usize; 3]) -> Result<(Volume, [usize; 3])> {
    let src_shape = v.shape();
    // For each target storage axis: (source axis, flipped).
    let mut map = [(usize::MAX, false); 3];
    for a in 0..3 {
        let (world, positive) = v.orientation().storage_axis(a);
        map[2 - world] = (a, !positive);
    }
    if map.iter().any(|m| m.0 == usize::MAX) {
        return Err(Error::Format(format!("orientation `{}` is not a signed permutation", v.orientation())));
    }
    let shape = [src_shape[map[0].0], src_shape[map[1].0], src_shape[map[2].0]];
    let spacing = [v.spacing_mm()[map[0].0], v.spacing_mm()[map[1].0], v.spacing_mm()[map[2].0]];
    let ss = strides(src_shape);

    // Source offset contributed by target index i along target axis t.
    let offsets: Vec<Vec<usize>> = (0..3)
        .map(|t| {
            let (a, flip) = map[t];
            (0..shape[t]).map(|i| ss[a] * if flip { shape[t] - 1 - i } else { i }).collect()
        })
        .collect();
    let src = v.data();
    let mut data = Vec::with_capacity(src.len());
    for &oz in &offsets[0] {
        for &oy in &offsets[1] {
            for &ox in &offsets[2] {
                data.push(src[oz + oy + ox]);
            }
        }
    }
    let mut c = [0; 3];
    for t in 0..3 {
        let (a, flip) = map[t];
        let ci = center[a].min(src_shape[a] - 1);
        c[t] = if flip { src_shape[a] - 1 - ci } else { ci };
    }
    Ok((Volume::new(shape, spacing, Orientation::RAS, data)?, c))
}

/// Per-axis interpolation stencil: lower index, upper index, upper weight.
fn stencil(n_src: usize, n_out: usize, src_sp: f64, out_sp: f64) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|j| {
            let x = ((j as f64 + 0.5) * out_sp / src_sp - 0.5).clamp(0.0, (n_src - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(n_src - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Output extent along one axis after resampling.
pub fn resampled_extent(n: usize, spacing: f64, target: f64) -> usize {
    ((n as f64 * spacing / target).round() as usize).max(1)
}

/// Trilinear resampling to `target_spacing` (storage order) with voxel
/// samples at cell centers and clamped borders.
pub fn resample(v: &Volume, target_spacing: [f64; 3], center: [usize; 3]) -> Result<(Volume, [usize; 3])> {
    if target_spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Precondition(format!("target spacing must be > 0, got {target_spacing:?}")));
    }
    let [nz, ny, nx] = v.shape();
    let sp = v.spacing_mm();
    let out_shape = [
        resampled_extent(nz, sp[0], target_spacing[0]),
        resampled_extent(ny, sp[1], target_spacing[1]),
        resampled_extent(nx, sp[2], target_spacing[2]),
    ];
    let sz = stencil(nz, out_shape[0], sp[0], target_spacing[0]);
    let sy = stencil(ny, out_shape[1], sp[1], target_spacing[1]);
    let sx = stencil(nx, out_shape[2], sp[2], target_spacing[2]);
    let d = v.data();
    let at = |z: usize, y: usize, x: usize| d[(z * ny + y) * nx + x] as f64;
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for &(z0, z1, fz) in &sz {
        for &(y0, y1, fy) in &sy {
            for &(x0, x1, fx) in &sx {
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                let c0 = lerp(c00, c01, fy);
                let c1 = lerp(c10, c11, fy);
                data.push(lerp(c0, c1, fz) as f32);
            }
        }
    }
    let mut c = [0; 3];
    for a in 0..3 {
        let pos = (center[a] as f64 + 0.5) * sp[a] / target_spacing[a] - 0.5;
        c[a] = (pos.round().max(0.0) as usize).min(out_shape[a] - 1);
    }
    Ok((Volume::new(out_shape, target_spacing, v.orientation(), data)?, c))
}

/// Min-max rescale into [0, 1]. A constant volume maps to all zeros.
pub fn normalize(v: &Volume) -> Volume {
    let (lo, hi) = v.min_max();
    let range = hi as f64 - lo as f64;
    let data = if range > 0.0 {
        v.data().iter().map(|&x| (((x as f64 - lo as f64) / range).clamp(0.0, 1.0)) as f32).collect()
    } else {
        vec![0.0; v.len()]
    };
    Volume::new(v.shape(), v.spacing_mm(), v.orientation(), data).expect("same geometry")
}

/// Window of extent `target` centered on `center` (window start is
/// `center - target / 2` per axis); voxels outside the source are 0.
pub fn crop_or_pad(v: &Volume, target: [usize; 3], center: [usize; 3]) -> Result<Volume> {
    let shape = v.shape();
    if (0..3).any(|a| center[a] >= shape[a]) {
        return Err(Error::Precondition(format!("center {center:?} outside volume {shape:?}")));
    }
    if target.iter().any(|&t| t == 0) {
        return Err(Error::Precondition(format!("target extents must be ≥ 1, got {target:?}")));
    }
    let start: Vec<isize> = (0..3).map(|a| center[a] as isize - (target[a] / 2) as isize).collect();
    let inside = |a: usize, j: usize| -> Option<usize> {
        let s = start[a] + j as isize;
        (s >= 0 && (s as usize) < shape[a]).then_some(s as usize)
    };
    let mut data = vec![0.0f32; target.iter().product()];
    for jz in 0..target[0] {
        let Some(z) = inside(0, jz) else { continue };
        for jy in 0..target[1] {
            let Some(y) = inside(1, jy) else { continue };
            let row = (jz * target[1] + jy) * target[2];
            for jx in 0..target[2] {
                if let Some(x) = inside(2, jx) {
                    data[row + jx] = v.at(z, y, x);
                }
            }
        }
    }
    Volume::new(target, v.spacing_mm(), v.orientation(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 3]) -> Volume {
        Volume::from_fn(shape, |z, y, x| ((z * shape[1] + y) * shape[2] + x) as f32 + 1.0)
    }

    #[test]
    fn ras_is_identity() {
        let v = ramp([2, 3, 4]);
        let (out, c) = reorient_ras(&v, [1, 2, 3]).unwrap();
        assert_eq!(out, v);
        assert_eq!(c, [1, 2, 3]);
    }

    #[test]
    fn single_flip_reverses_one_axis_and_is_involution() {
        let v = ramp([2, 3, 4]).with_orientation("LAS".parse().unwrap());
        let (out, _) = reorient_ras(&v, [0, 0, 0]).unwrap();
        for z in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    assert_eq!(out.at(z, y, x), v.at(z, y, 3 - x));
                }
            }
        }
        let back = out.with_orientation("LAS".parse().unwrap());
        let (twice, _) = reorient_ras(&back, [0, 0, 0]).unwrap();
        assert_eq!(twice.data(), v.data());
    }

    #[test]
    fn axis_swap_transposes() {
        // x→R, y→S, z→A: storage y and z trade places.
        let v = Volume::from_fn([2, 3, 4], |z, y, x| (100 * z + 10 * y + x) as f32)
            .with_spacing([5.0, 6.0, 7.0])
            .unwrap()
            .with_orientation("RSA".parse().unwrap());
        let (out, c) = reorient_ras(&v, [1, 2, 3]).unwrap();
        assert_eq!(out.shape(), [3, 2, 4]);
        assert_eq!(out.spacing_mm(), [6.0, 5.0, 7.0]);
        assert_eq!(c, [2, 1, 3]);
        for i in 0..3 {
            for j in 0..2 {
                for x in 0..4 {
                    assert_eq!(out.at(i, j, x), v.at(j, i, x));
                }
            }
        }
    }

    #[test]
    fn resample_identity_constant_and_ramp() {
        let v = ramp([3, 4, 5]);
        let (out, c) = resample(&v, [1.0; 3], [1, 2, 3]).unwrap();
        assert_eq!(out, v);
        assert_eq!(c, [1, 2, 3]);

        let k = Volume::filled([5, 6, 7], 0.375).with_spacing([0.7, 1.3, 2.0]).unwrap();
        let (out, _) = resample(&k, [1.0, 1.0, 3.0], [0, 0, 0]).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.375));

        let line = Volume::from_data([1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let (out, _) = resample(&line, [1.0, 1.0, 2.0], [0, 0, 0]).unwrap();
        // centers of 2 mm voxels sit at source indices 0.5 and 2.5
        assert_eq!(out.shape(), [1, 1, 2]);
        assert_eq!(out.data(), &[0.5, 2.5]);
    }

    #[test]
    fn resample_extent_minimum_one() {
        let v = Volume::filled([1, 1, 2], 1.0);
        let (out, _) = resample(&v, [10.0, 10.0, 10.0], [0, 0, 0]).unwrap();
        assert_eq!(out.shape(), [1, 1, 1]);
    }

    #[test]
    fn normalize_bounds() {
        let v = Volume::from_data([1, 1, 3], vec![-2.0, 0.0, 6.0]).unwrap();
        assert_eq!(normalize(&v).data(), &[0.0, 0.25, 1.0]);
        assert!(normalize(&Volume::filled([2, 2, 2], 3.0)).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn crop_examples() {
        let v = ramp([4, 4, 4]);
        assert_eq!(crop_or_pad(&v, [4, 4, 4], [2, 2, 2]).unwrap(), v);

        let out = crop_or_pad(&v, [2, 2, 2], [1, 1, 1]).unwrap();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(out.at(z, y, x), v.at(z, y, x));
                }
            }
        }

        let big = crop_or_pad(&v, [8, 8, 8], [2, 2, 2]).unwrap();
        assert_eq!(big.shape(), [8, 8, 8]);
        let total: f64 = big.data().iter().map(|&x| x as f64).sum();
        let src: f64 = v.data().iter().map(|&x| x as f64).sum();
        assert_eq!(total, src);
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(big.at(0, i, j), 0.0);
                assert_eq!(big.at(7, i, j), 0.0);
                assert_eq!(big.at(i, 0, j), 0.0);
                assert_eq!(big.at(i, 7, j), 0.0);
                assert_eq!(big.at(i, j, 0), 0.0);
                assert_eq!(big.at(i, j, 7), 0.0);
            }
        }

        assert!(matches!(crop_or_pad(&v, [2, 2, 2], [4, 0, 0]), Err(Error::Precondition(_))));
    }
}
