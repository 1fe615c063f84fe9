use serde::{Deserialize, Serialize};

use super::Volume3D;
use crate::error::{Error, Result};

/// Guards the z-score divisor.
pub const ZSCORE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMethod {
    Zscore,
    Minmax,
    None,
}

impl std::str::FromStr for NormMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(NormMethod::Zscore),
            "minmax" => Ok(NormMethod::Minmax),
            "none" => Ok(NormMethod::None),
            _ => Err(Error::Config(format!("unknown normalisation `{s}` (zscore, minmax, none)"))),
        }
    }
}

/// A normalised volume. `degenerate` is set when the masked region was
/// constant and the output inside the mask was forced to zero.
#[derive(Clone, Debug)]
pub struct Normalized {
    pub volume: Volume3D,
    pub degenerate: bool,
}

fn masked_values<'a>(v: &'a Volume3D, mask: &'a Volume3D) -> Result<impl Iterator<Item = f64> + Clone + 'a> {
    v.expect_same_dims(mask, "normalisation mask")?;
    if mask.count_positive() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(v.data.iter().zip(&mask.data).filter(|(_, &m)| m > 0.0).map(|(&x, _)| x as f64))
}

fn apply(v: &Volume3D, mask: &Volume3D, f: impl Fn(f64) -> f64) -> Volume3D {
    let data = v
        .data
        .iter()
        .zip(&mask.data)
        .map(|(&x, &m)| if m > 0.0 { f(x as f64) as f32 } else { 0.0 })
        .collect();
    Volume3D { data, ..v.clone() }
}

/// Masked voxels to mean 0 and population sd 1; voxels outside the mask
/// become 0.
pub fn zscore_normalize(v: &Volume3D, mask: &Volume3D) -> Result<Normalized> {
    let vals = masked_values(v, mask)?;
    let (mut n, mut sum) = (0usize, 0.0f64);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in vals.clone() {
        n += 1;
        sum += x;
        lo = lo.min(x);
        hi = hi.max(x);
    }
    let mean = sum / n as f64;
    let sd = (vals.map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if lo == hi || !sd.is_finite() {
        return Ok(Normalized { volume: apply(v, mask, |_| 0.0), degenerate: true });
    }
    Ok(Normalized { volume: apply(v, mask, |x| (x - mean) / (sd + ZSCORE_EPS)), degenerate: false })
}

/// Masked voxels affinely onto `[0, 1]`; voxels outside the mask become 0.
pub fn minmax_normalize(v: &Volume3D, mask: &Volume3D) -> Result<Normalized> {
    let (lo, hi) = masked_values(v, mask)?.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    if range == 0.0 || !range.is_finite() {
        return Ok(Normalized { volume: apply(v, mask, |_| 0.0), degenerate: true });
    }
    Ok(Normalized { volume: apply(v, mask, |x| ((x - lo) / range).clamp(0.0, 1.0)), degenerate: false })
}

/// Dispatches on `method`. `None` keeps raw intensities inside the mask.
pub fn normalize(v: &Volume3D, mask: &Volume3D, method: NormMethod) -> Result<Normalized> {
    match method {
        NormMethod::Zscore => zscore_normalize(v, mask),
        NormMethod::Minmax => minmax_normalize(v, mask),
        NormMethod::None => {
            let _ = masked_values(v, mask)?;
            Ok(Normalized { volume: apply(v, mask, |x| x), degenerate: false })
        }
    }
}
