//! `vol3d` read/write and read-only single-file NIfTI-1.
//!
//! vol3d layout, all little-endian:
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0 | 4 | magic `VOL3` |
//! | 4 | 4 | u32 version = 1 |
//! | 8 | 12 | u32 D, H, W |
//! | 20 | 12 | f32 spacing |
//! | 32 | 1 | u8 modality code |
//! | 33 | 4·D·H·W | f32 voxels, row-major |

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Modality, Volume3D};
use crate::error::{Error, Result};

const VOL3_MAGIC: &[u8; 4] = b"VOL3";
const VOL3_VERSION: u32 = 1;
const VOL3_HEADER: usize = 33;

const NIFTI_HEADER: usize = 348;

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

pub fn vol3d_bytes(v: &Volume3D) -> Vec<u8> {
    let mut out = Vec::with_capacity(VOL3_HEADER + 4 * v.data.len());
    out.extend_from_slice(VOL3_MAGIC);
    out.extend_from_slice(&VOL3_VERSION.to_le_bytes());
    for &d in &v.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &s in &v.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(v.modality.code());
    for &x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `v` in the vol3d format.
pub fn save_volume(path: impl AsRef<Path>, v: &Volume3D) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, vol3d_bytes(v)).map_err(|e| Error::io(path, e))
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

pub fn read_vol3d(bytes: &[u8]) -> Result<Volume3D> {
    if bytes.len() < VOL3_HEADER {
        return Err(parse_err(bytes.len(), format!("vol3d header needs {VOL3_HEADER} bytes, file has {}", bytes.len())));
    }
    if &bytes[..4] != VOL3_MAGIC {
        return Err(parse_err(0, format!("bad magic {:?}, expected \"VOL3\"", String::from_utf8_lossy(&bytes[..4]))));
    }
    let version = u32_at(bytes, 4);
    if version != VOL3_VERSION {
        return Err(parse_err(4, format!("unsupported vol3d version {version}")));
    }
    let dims = [u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize, u32_at(bytes, 16) as usize];
    if let Some(a) = dims.iter().position(|&d| d == 0) {
        return Err(parse_err(8 + 4 * a, "zero extent"));
    }
    let spacing = [f32_at(bytes, 20), f32_at(bytes, 24), f32_at(bytes, 28)];
    let modality = Modality::from_code(bytes[32]).ok_or_else(|| parse_err(32, format!("unknown modality code {}", bytes[32])))?;
    let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| parse_err(8, "dims overflow"))?;
    let payload = bytes.len() - VOL3_HEADER;
    if payload != 4 * n {
        return Err(parse_err(
            VOL3_HEADER + payload.min(4 * n),
            format!("header dims {dims:?} need {} data bytes, file has {payload}", 4 * n),
        ));
    }
    let data = bytes[VOL3_HEADER..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Volume3D::new(dims, spacing, data, modality)
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct Reader<'a> {
    b: &'a [u8],
    e: Endian,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut a: [u8; N] = self.b[off..off + N].try_into().unwrap();
        if let Endian::Big = self.e {
            a.reverse();
        }
        a
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.bytes(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.bytes(off))
    }
    fn f64(&self, off: usize) -> f64 {
        f64::from_le_bytes(self.bytes(off))
    }
}

/// Single-file NIfTI-1 (`n+1`) with datatype 4 (i16), 16 (f32) or 64 (f64).
/// `scl_slope`/`scl_inter` are applied when the slope is nonzero.
pub fn read_nifti(bytes: &[u8], modality: Modality) -> Result<Volume3D> {
    if bytes.len() < NIFTI_HEADER {
        return Err(parse_err(bytes.len(), format!("NIfTI header needs {NIFTI_HEADER} bytes, file has {}", bytes.len())));
    }
    let e = if i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == 348 {
        Endian::Little
    } else if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 {
        Endian::Big
    } else {
        return Err(parse_err(0, "sizeof_hdr is not 348"));
    };
    let r = Reader { b: bytes, e };
    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => return Err(parse_err(344, "two-file NIfTI (.hdr/.img) is not supported")),
        m => return Err(parse_err(344, format!("bad magic {:?}, expected \"n+1\"", String::from_utf8_lossy(m)))),
    }
    let ndim = r.i16(40);
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let v = r.i16(42 + 2 * a);
        if v <= 0 {
            return Err(parse_err(42 + 2 * a, format!("dim[{}] = {v} is not positive", a + 1)));
        }
        *d = v as usize;
    }
    let extra_ok = (4..=7).all(|a| a as i16 > ndim || r.i16(40 + 2 * a) == 1);
    if !(1..=7).contains(&ndim) || !extra_ok {
        return Err(parse_err(40, format!("only 3D volumes are supported (dim[0] = {ndim})")));
    }
    let datatype = r.i16(70);
    let width = match datatype {
        4 => 2,
        16 => 4,
        64 => 8,
        other => return Err(parse_err(70, format!("unsupported datatype code {other} (supported: 4, 16, 64)"))),
    };
    let mut spacing = [1.0f32; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let v = r.f32(80 + 4 * a).abs();
        *s = if v.is_finite() && v > 0.0 { v } else { 1.0 };
    }
    let vox_offset = r.f32(108);
    if !(vox_offset >= NIFTI_HEADER as f32) || vox_offset.fract() != 0.0 {
        return Err(parse_err(108, format!("vox_offset {vox_offset} is invalid")));
    }
    let start = vox_offset as usize;
    let (slope, inter) = (r.f32(112), r.f32(116));
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() { (1.0, 0.0) } else { (slope as f64, inter as f64) };
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let need = start + n * width;
    if bytes.len() < need {
        return Err(parse_err(
            bytes.len(),
            format!("header dims {dims:?} with datatype {datatype} need data up to byte {need}, file ends at {}", bytes.len()),
        ));
    }
    let raw = |i: usize| -> f64 {
        let off = start + i * width;
        match datatype {
            4 => r.i16(off) as f64,
            16 => r.f32(off) as f64,
            _ => r.f64(off),
        }
    };
    // NIfTI stores i fastest; Volume3D stores the last axis fastest.
    let mut data = vec![0.0f32; n];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                data[(i * ny + j) * nz + k] = (raw(i + nx * (j + ny * k)) * slope + inter) as f32;
            }
        }
    }
    Volume3D::new(dims, spacing, data, modality)
}

/// Clamps FA into `[0, 1]` and MD to `≥ 0`; returns the number of voxels
/// changed. Other modalities are untouched.
pub fn clamp_for_modality(v: &mut Volume3D) -> usize {
    let (lo, hi) = match v.modality {
        Modality::FA => (0.0, 1.0),
        Modality::MD => (0.0, f32::INFINITY),
        _ => return 0,
    };
    let mut changed = 0;
    for x in &mut v.data {
        let c = x.clamp(lo, hi);
        if c != *x {
            *x = c;
            changed += 1;
        }
    }
    changed
}

/// Loads a vol3d or single-file NIfTI volume, chosen by magic bytes.
/// NIfTI carries no modality tag and takes `expected`; a vol3d tag must
/// match it. FA and MD are clamped to their valid ranges.
pub fn load_volume(path: impl AsRef<Path>, expected: Modality) -> Result<Volume3D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut v = if bytes.starts_with(VOL3_MAGIC) {
        let v = read_vol3d(&bytes)?;
        if v.modality != expected {
            return Err(Error::Invalid(format!(
                "{}: expected a {expected:?} volume, file is tagged {:?}",
                path.display(),
                v.modality
            )));
        }
        v
    } else {
        read_nifti(&bytes, expected)?
    };
    let clamped = clamp_for_modality(&mut v);
    if clamped > 0 {
        log::warn!("{}: clamped {clamped} {:?} voxels into range", path.display(), v.modality);
    }
    Ok(v)
}
