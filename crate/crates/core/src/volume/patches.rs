use super::{Modality, Volume3D};
use crate::error::{shape_err, Error, Result};

/// A cubic sub-volume and its origin in the source grid. Voxels beyond the
/// source extent are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: [usize; 3],
    pub size: usize,
    pub data: Vec<f32>,
}

/// Origins along one axis: `ceil((dim - patch) / stride) + 1` steps of
/// `stride`, the last one reaching or passing the far border.
pub fn patch_origins(dim: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || stride == 0 {
        return Err(Error::Config(format!("patch size {patch} and stride {stride} must be positive")));
    }
    if patch > dim {
        return Err(shape_err!("patch {patch} is larger than volume extent {dim}"));
    }
    let steps = (dim - patch).div_ceil(stride) + 1;
    Ok((0..steps).map(|i| i * stride).collect())
}

/// Copies the `size³` cube at `origin` out of a `dims` grid, zero-filling
/// outside it.
pub fn crop(data: &[f32], dims: [usize; 3], origin: [usize; 3], size: usize) -> Vec<f32> {
    let [d, h, w] = dims;
    let mut out = vec![0.0f32; size * size * size];
    let zs = size.min(d.saturating_sub(origin[0]));
    let ys = size.min(h.saturating_sub(origin[1]));
    let xs = size.min(w.saturating_sub(origin[2]));
    for z in 0..zs {
        for y in 0..ys {
            let src = ((origin[0] + z) * h + origin[1] + y) * w + origin[2];
            let dst = (z * size + y) * size;
            out[dst..dst + xs].copy_from_slice(&data[src..src + xs]);
        }
    }
    out
}

/// Tiles `v` with cubes of side `patch` at step `stride`, zero-padded at
/// the far borders so that every voxel is covered.
pub fn extract_patches(v: &Volume3D, patch: usize, stride: usize) -> Result<Vec<Patch>> {
    let oz = patch_origins(v.dims[0], patch, stride)?;
    let oy = patch_origins(v.dims[1], patch, stride)?;
    let ox = patch_origins(v.dims[2], patch, stride)?;
    let mut out = Vec::with_capacity(oz.len() * oy.len() * ox.len());
    for &z in &oz {
        for &y in &oy {
            for &x in &ox {
                let origin = [z, y, x];
                out.push(Patch { origin, size: patch, data: crop(&v.data, v.dims, origin, patch) });
            }
        }
    }
    Ok(out)
}

/// Reassembles patches onto a `dims` grid, averaging overlaps with uniform
/// weight and cropping padding.
pub fn stitch_patches(patches: &[Patch], dims: [usize; 3]) -> Result<Volume3D> {
    let [d, h, w] = dims;
    let n = d * h * w;
    let mut sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    for p in patches {
        let s = p.size;
        if p.data.len() != s * s * s {
            return Err(shape_err!("patch at {:?}: {} values for size {s}", p.origin, p.data.len()));
        }
        for z in 0..s.min(d.saturating_sub(p.origin[0])) {
            for y in 0..s.min(h.saturating_sub(p.origin[1])) {
                for x in 0..s.min(w.saturating_sub(p.origin[2])) {
                    let i = ((p.origin[0] + z) * h + p.origin[1] + y) * w + p.origin[2] + x;
                    sum[i] += p.data[(z * s + y) * s + x] as f64;
                    count[i] += 1;
                }
            }
        }
    }
    if let Some(i) = count.iter().position(|&c| c == 0) {
        return Err(Error::Invalid(format!(
            "stitching leaves voxel ({}, {}, {}) uncovered",
            i / (h * w),
            (i / w) % h,
            i % w
        )));
    }
    let data = sum.iter().zip(&count).map(|(s, &c)| (s / c as f64) as f32).collect();
    Volume3D::new(dims, [1.0; 3], data, Modality::Prediction)
}
