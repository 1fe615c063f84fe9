//! Analytic brain phantoms with paired T1w, FA, MD and mask volumes.
//!
//! Anatomy is a brain ellipsoid with a cortical shell, two ventricles and
//! five tube-shaped tracts in white matter. Tissue boundaries are soft
//! (partial volume), and FA/MD are fixed functions of the noiseless tissue
//! fractions and the severity `s`:
//!
//! * tract FA `0.8·(1 − 0.4·s)`
//! * GM, WM and tract MD scaled by `1 + 0.5·s`
//!
//! T1w sees severity only faintly (a slight tract darkening and ventricle
//! growth). Acquisition profiles change global intensity scale, noise and
//! bias field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::mix_seed;
use crate::volume::{Label, Modality, Split, SubjectRecord, Volume3D};

pub const MIN_DIM: usize = 32;

/// Tract FA at severity 0.
pub const TRACT_FA: f64 = 0.8;
/// Relative tract FA loss at severity 1.
pub const TRACT_FA_LOSS: f64 = 0.4;
/// Relative MD increase of GM/WM/tract at severity 1.
pub const MD_GAIN: f64 = 0.5;

/// Per-tissue constants, indexed by [`Tissue`].
const FA: [f64; 5] = [0.0, 0.08, 0.18, 0.42, TRACT_FA];
/// MD in units of 1e-3 mm²/s.
const MD: [f64; 5] = [0.0, 3.0, 0.85, 0.72, 0.62];
const T1: [f64; 5] = [0.0, 0.22, 0.55, 0.80, 0.90];
/// Tract T1w darkening at severity 1.
const T1_TRACT_SEVERITY: f64 = 0.05;
/// Ventricle growth at severity 1.
const VENTRICLE_GROWTH: f64 = 0.10;
/// Half-width of the partial-volume transition, voxels.
const EDGE: f64 = 0.9;
/// Tracts keep a pure core at small grid sizes.
const MIN_TRACT_RADIUS: f64 = 2.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tissue {
    Background = 0,
    Csf = 1,
    Gm = 2,
    Wm = 3,
    Tract = 4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    /// Research-grade acquisition.
    A,
    /// Clinical-grade acquisition.
    B,
}

impl Profile {
    pub fn intensity_scale(self) -> f64 {
        match self {
            Profile::A => 1.0,
            Profile::B => 1.6,
        }
    }

    pub fn noise_sd(self) -> f64 {
        match self {
            Profile::A => 0.02,
            Profile::B => 0.05,
        }
    }

    /// Peak relative deviation of the multiplicative bias field.
    pub fn bias(self) -> f64 {
        match self {
            Profile::A => 0.05,
            Profile::B => 0.15,
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Profile::A),
            "B" | "b" => Ok(Profile::B),
            _ => Err(Error::Config(format!("unknown profile `{s}` (A or B)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub seed: u64,
    pub severity: f64,
    pub profile: Profile,
}

/// Per-subject anatomy, in normalised coordinates `[-1, 1]³`.
struct Anatomy {
    brain_center: [f64; 3],
    brain_radii: [f64; 3],
    /// Inner boundary of the cortical shell, relative to the brain radius.
    wm_fraction: f64,
    ventricles: [([f64; 3], [f64; 3]); 2],
    tracts: Vec<([f64; 3], [f64; 3], f64)>,
    bias_dir: [f64; 3],
}

impl Anatomy {
    fn sample(rng: &mut ChaCha8Rng, severity: f64) -> Self {
        let mut jitter = |a: f64| rng.gen_range(-a..a);
        let brain_center = [jitter(0.03), jitter(0.03), jitter(0.03)];
        let brain_radii = [0.82 + jitter(0.04), 0.86 + jitter(0.04), 0.80 + jitter(0.04)];
        let wm_fraction = 0.84 + jitter(0.02);
        let grow = 1.0 + VENTRICLE_GROWTH * severity;
        let vsize = 1.0 + jitter(0.12);
        let vent = |side: f64, j: &mut dyn FnMut(f64) -> f64| {
            ([side * (0.14 + j(0.02)), 0.04 + j(0.03), 0.05 + j(0.03)], [0.08 * vsize * grow, 0.26 * vsize * grow, 0.13 * vsize * grow])
        };
        let ventricles = [vent(-1.0, &mut jitter), vent(1.0, &mut jitter)];
        let mut tracts = Vec::new();
        // commissural tract across axis 0
        let z = 0.12 + jitter(0.04);
        tracts.push(([-0.5, 0.0 + jitter(0.04), z], [0.5, 0.0 + jitter(0.04), z], 0.075));
        // two longitudinal tracts along axis 1
        for side in [-1.0, 1.0] {
            let x = side * (0.36 + jitter(0.04));
            let w = jitter(0.06);
            tracts.push(([x, -0.55, w], [x + jitter(0.05), 0.5, w + jitter(0.05)], 0.07));
        }
        // two projection tracts along axis 2
        for side in [-1.0, 1.0] {
            let x = side * (0.22 + jitter(0.03));
            let y = -0.25 + jitter(0.05);
            tracts.push(([x, y, -0.5], [x + jitter(0.05), y + jitter(0.05), 0.45], 0.065));
        }
        let d = [jitter(1.0), jitter(1.0), jitter(1.0)];
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-6);
        let bias_dir = [d[0] / norm, d[1] / norm, d[2] / norm];
        Anatomy { brain_center, brain_radii, wm_fraction, ventricles, tracts, bias_dir }
    }
}

/// 0 outside, 1 inside, cubic ramp across `[-EDGE, EDGE]`.
fn smooth_step(signed_dist_vox: f64) -> f64 {
    let t = ((signed_dist_vox / EDGE + 1.0) / 2.0).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Soft inside-ness of an ellipsoid: approximate signed distance in voxels.
fn ellipsoid(p: [f64; 3], c: [f64; 3], r: [f64; 3], half: [f64; 3]) -> f64 {
    let rho = ((0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>()).sqrt();
    let mean_r_vox = (0..3).map(|a| r[a] * half[a]).sum::<f64>() / 3.0;
    smooth_step((1.0 - rho) * mean_r_vox)
}

fn tube(p: [f64; 3], a: [f64; 3], b: [f64; 3], radius: f64, half: [f64; 3]) -> f64 {
    // distance in voxel units
    let to_vox = |v: [f64; 3]| [v[0] * half[0], v[1] * half[1], v[2] * half[2]];
    let (p, a, b) = (to_vox(p), to_vox(a), to_vox(b));
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab.iter().map(|v| v * v).sum::<f64>();
    let t = ((0..3).map(|i| ab[i] * ap[i]).sum::<f64>() / len2).clamp(0.0, 1.0);
    let dist = (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum::<f64>().sqrt();
    let r_vox = (radius * (half[0] + half[1] + half[2]) / 3.0).max(MIN_TRACT_RADIUS);
    smooth_step(r_vox - dist)
}

/// Tissue fractions at every voxel, in [`Tissue`] order.
fn tissue_fractions(anat: &Anatomy, dims: [usize; 3]) -> Vec<[f64; 5]> {
    let half = [dims[0] as f64 / 2.0, dims[1] as f64 / 2.0, dims[2] as f64 / 2.0];
    let mut out = Vec::with_capacity(dims.iter().product());
    let inner_r = anat.brain_radii.map(|r| r * anat.wm_fraction);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [(z as f64 + 0.5) / half[0] - 1.0, (y as f64 + 0.5) / half[1] - 1.0, (x as f64 + 0.5) / half[2] - 1.0];
                let brain = ellipsoid(p, anat.brain_center, anat.brain_radii, half);
                let inner = ellipsoid(p, anat.brain_center, inner_r, half).min(brain);
                let vent = anat.ventricles.iter().map(|&(c, r)| ellipsoid(p, c, r, half)).fold(0.0, f64::max);
                let tract = anat.tracts.iter().map(|&(a, b, r)| tube(p, a, b, r, half)).fold(0.0, f64::max);
                let csf = inner * vent;
                let tr = inner * (1.0 - vent) * tract;
                let wm = inner * (1.0 - vent) * (1.0 - tract);
                out.push([1.0 - brain, csf, brain - inner, wm, tr]);
            }
        }
    }
    out
}

fn validate(spec: &PhantomSpec) -> Result<()> {
    if spec.dims.iter().any(|&d| d < MIN_DIM) {
        return Err(Error::Config(format!("phantom dims {:?} too small; each extent must be at least {MIN_DIM}", spec.dims)));
    }
    if !(0.0..=1.0).contains(&spec.severity) {
        return Err(Error::Config(format!("severity {} outside [0, 1]", spec.severity)));
    }
    Ok(())
}

/// Tract FA at severity `s`.
pub fn tract_fa(s: f64) -> f64 {
    TRACT_FA * (1.0 - TRACT_FA_LOSS * s)
}

/// One phantom subject. The split defaults to train and the id to
/// `phantom-<seed>`; cohorts overwrite both.
pub fn generate_subject(spec: &PhantomSpec) -> Result<SubjectRecord> {
    validate(spec)?;
    let s = spec.severity;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let anat = Anatomy::sample(&mut rng, s);
    let fractions = tissue_fractions(&anat, spec.dims);

    let md_scale = 1.0 + MD_GAIN * s;
    let fa_t = [FA[0], FA[1], FA[2], FA[3], tract_fa(s)];
    let md_t = [MD[0], MD[1], MD[2] * md_scale, MD[3] * md_scale, MD[4] * md_scale];
    let t1_t = [T1[0], T1[1], T1[2], T1[3], T1[4] - T1_TRACT_SEVERITY * s];
    let mix = |f: &[f64; 5], t: &[f64; 5]| (0..5).map(|i| f[i] * t[i]).sum::<f64>();

    let half = spec.dims.map(|d| d as f64 / 2.0);
    let noise = Normal::new(0.0, spec.profile.noise_sd()).expect("positive sd");
    let scale = spec.profile.intensity_scale();
    let bias = spec.profile.bias();
    let n = fractions.len();
    let (mut t1, mut fa, mut md, mut mask) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (i, f) in fractions.iter().enumerate() {
        let (z, y, x) = (i / (spec.dims[1] * spec.dims[2]), (i / spec.dims[2]) % spec.dims[1], i % spec.dims[2]);
        let p = [(z as f64 + 0.5) / half[0] - 1.0, (y as f64 + 0.5) / half[1] - 1.0, (x as f64 + 0.5) / half[2] - 1.0];
        let field = 1.0 + bias * (0..3).map(|a| anat.bias_dir[a] * p[a]).sum::<f64>();
        t1.push((scale * field * mix(f, &t1_t) + noise.sample(&mut rng)) as f32);
        fa.push(mix(f, &fa_t) as f32);
        md.push(mix(f, &md_t) as f32);
        mask.push(if f[0] < 0.5 { 1.0 } else { 0.0 });
    }
    let sp = [1.0; 3];
    let mask = Volume3D::new(spec.dims, sp, mask, Modality::Mask)?;
    let zero_outside = |v: Vec<f32>| v.into_iter().zip(&mask.data).map(|(a, &m)| a * m).collect::<Vec<f32>>();
    Ok(SubjectRecord {
        id: format!("phantom-{}", spec.seed),
        t1w: Volume3D::new(spec.dims, sp, t1, Modality::T1w)?,
        fa: Some(Volume3D::new(spec.dims, sp, zero_outside(fa), Modality::FA)?),
        md: Some(Volume3D::new(spec.dims, sp, zero_outside(md), Modality::MD)?),
        mask: Some(mask),
        label: Label::from_severity(s),
        split: Split::Train,
        severity: Some(s),
    })
}

/// Noiseless tissue fractions per voxel, indexed by [`Tissue`].
pub fn tissue_fractions_of(spec: &PhantomSpec) -> Result<Vec<[f64; 5]>> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let anat = Anatomy::sample(&mut rng, spec.severity);
    Ok(tissue_fractions(&anat, spec.dims))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { val: 0.1, test: 0.1 }
    }
}

/// Stratified split sizes `(train, val, test)` for `n` subjects of one
/// class. With three or more subjects val and test get at least one each.
pub fn split_sizes(n: usize, f: SplitFractions) -> (usize, usize, usize) {
    let mut val = (n as f64 * f.val).round() as usize;
    let mut test = (n as f64 * f.test).round() as usize;
    if n >= 3 {
        val = val.max(1);
        test = test.max(1);
    }
    while val + test > n.saturating_sub(1) && val + test > 0 {
        if test >= val {
            test -= 1;
        } else {
            val -= 1;
        }
    }
    (n - val - test, val, test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub dims: [usize; 3],
    pub n_per_class: usize,
    pub profile: Profile,
    pub seed: u64,
    #[serde(default)]
    pub split: SplitFractions,
}

/// `n_per_class` subjects each of NC, MCI and AD with severities drawn from
/// `[0, 1/3)`, `[1/3, 2/3)` and `[2/3, 1)`, split subject-wise per class.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<SubjectRecord>> {
    if spec.n_per_class == 0 {
        return Err(Error::Config("n-per-class must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 0xC0_40_27]));
    let (n_train, n_val, _) = split_sizes(spec.n_per_class, spec.split);
    let classes = [(Label::NC, 0.0), (Label::MCI, 1.0), (Label::AD, 2.0)];
    let mut plan = Vec::new();
    for &(label, lo) in &classes {
        let mut splits: Vec<Split> = (0..spec.n_per_class)
            .map(|i| if i < n_train { Split::Train } else if i < n_train + n_val { Split::Val } else { Split::Test })
            .collect();
        for i in (1..splits.len()).rev() {
            splits.swap(i, rng.gen_range(0..=i));
        }
        for split in splits {
            let s = (lo + rng.gen_range(0.0..1.0)) / 3.0;
            plan.push((label, split, s));
        }
    }
    // interleave classes so ids do not reveal the label block
    let n = spec.n_per_class;
    let order: Vec<usize> = (0..n).flat_map(|i| (0..3).map(move |c| c * n + i)).collect();
    order
        .iter()
        .enumerate()
        .map(|(idx, &p)| {
            let (label, split, s) = plan[p];
            let sub = PhantomSpec { dims: spec.dims, seed: mix_seed(&[spec.seed, idx as u64]), severity: s, profile: spec.profile };
            let mut rec = generate_subject(&sub)?;
            debug_assert_eq!(rec.label, label);
            rec.id = format!("sub-{idx:04}");
            rec.split = split;
            Ok(rec)
        })
        .collect()
}
