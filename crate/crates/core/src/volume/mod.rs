//! Dense 3D volumes, their on-disk formats, normalisation and patching.
//!
//! A [`Volume3D`] is stored row-major over `(D, H, W)`, the last axis
//! fastest. NIfTI axes `(i, j, k)` map to `(D, H, W)`, so the NIfTI slice
//! axis `k` is the last one.

mod cohort;
mod format;
mod normalize;
mod patches;

pub use cohort::{load_cohort, read_manifest, save_cohort, Label, ManifestEntry, Split, SubjectRecord, MANIFEST_FILE};
pub use format::{clamp_for_modality, load_volume, read_nifti, read_vol3d, save_volume, sha256_hex, vol3d_bytes};
pub use normalize::{minmax_normalize, normalize, zscore_normalize, NormMethod, Normalized};
pub use patches::{crop, extract_patches, patch_origins, stitch_patches, Patch};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    T1w,
    FA,
    MD,
    Mask,
    Prediction,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::T1w => 0,
            Modality::FA => 1,
            Modality::MD => 2,
            Modality::Mask => 3,
            Modality::Prediction => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Modality::T1w,
            1 => Modality::FA,
            2 => Modality::MD,
            3 => Modality::Mask,
            4 => Modality::Prediction,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
    pub modality: Modality,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>, modality: Modality) -> Result<Self> {
        if dims.contains(&0) {
            return Err(shape_err!("volume extents must be positive, got {dims:?}"));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Invalid(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(shape_err!("volume {dims:?} needs {n} voxels, got {}", data.len()));
        }
        if modality == Modality::Mask {
            if let Some(i) = data.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Invalid(format!("mask voxel {i} has value {} (expected 0 or 1)", data[i])));
            }
        }
        Ok(Volume3D { dims, spacing, data, modality })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f32; 3], modality: Modality) -> Self {
        Volume3D { dims, spacing, data: vec![0.0; dims.iter().product()], modality }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// Same dims and spacing.
    pub fn same_grid(&self, other: &Volume3D) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    pub fn expect_same_dims(&self, other: &Volume3D, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err!("{what}: dims {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(())
    }

    /// Number of voxels with positive value.
    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }
}
