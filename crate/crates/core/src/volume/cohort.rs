//! Subjects, labels, splits and the on-disk cohort manifest.
//!
//! A cohort directory holds one vol3d file per subject volume plus
//! `manifest.jsonl`, one JSON record per subject with paths relative to
//! the directory.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{load_volume, save_volume, Modality, Volume3D};
use crate::error::{shape_err, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Diagnostic label. Class indices follow the order AD, MCI, NC.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    AD,
    MCI,
    NC,
    #[serde(rename = "unlabeled")]
    Unlabeled,
}

impl Label {
    pub const CLASSES: [Label; 3] = [Label::AD, Label::MCI, Label::NC];

    /// Index among AD, MCI, NC.
    pub fn index(self) -> Option<usize> {
        Label::CLASSES.iter().position(|&l| l == self)
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::CLASSES.get(i).copied()
    }

    /// Label for phantom severity `s`: NC below 1/3, MCI below 2/3, else AD.
    pub fn from_severity(s: f64) -> Label {
        if s < 1.0 / 3.0 {
            Label::NC
        } else if s < 2.0 / 3.0 {
            Label::MCI
        } else {
            Label::AD
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::AD => "AD",
            Label::MCI => "MCI",
            Label::NC => "NC",
            Label::Unlabeled => "unlabeled",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub t1w: Volume3D,
    pub fa: Option<Volume3D>,
    pub md: Option<Volume3D>,
    pub mask: Option<Volume3D>,
    pub label: Label,
    pub split: Split,
    /// Disease severity of phantom subjects.
    pub severity: Option<f64>,
}

impl SubjectRecord {
    /// All volumes share dims and spacing.
    pub fn validate(&self) -> Result<()> {
        for v in [&self.fa, &self.md, &self.mask].into_iter().flatten() {
            if !v.same_grid(&self.t1w) {
                return Err(shape_err!(
                    "subject {}: {:?} volume {:?}/{:?} does not match T1w {:?}/{:?}",
                    self.id,
                    v.modality,
                    v.dims,
                    v.spacing,
                    self.t1w.dims,
                    self.t1w.spacing
                ));
            }
        }
        Ok(())
    }

    /// The brain mask, or an all-ones mask when none is present.
    pub fn mask_or_full(&self) -> Volume3D {
        self.mask.clone().unwrap_or_else(|| Volume3D {
            data: vec![1.0; self.t1w.len()],
            modality: Modality::Mask,
            ..self.t1w.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub label: Label,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<f64>,
    pub t1w: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fa: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub md: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

/// Writes every subject's volumes and the manifest into `dir`.
pub fn save_cohort(dir: impl AsRef<Path>, subjects: &[SubjectRecord]) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(subjects.len());
    for s in subjects {
        s.validate()?;
        let put = |v: &Volume3D, suffix: &str| -> Result<String> {
            let name = format!("{}_{suffix}.vol3d", s.id);
            save_volume(dir.join(&name), v)?;
            Ok(name)
        };
        let t1w = put(&s.t1w, "t1w")?;
        let fa = s.fa.as_ref().map(|v| put(v, "fa")).transpose()?;
        let md = s.md.as_ref().map(|v| put(v, "md")).transpose()?;
        let mask = s.mask.as_ref().map(|v| put(v, "mask")).transpose()?;
        entries.push(ManifestEntry {
            subject_id: s.id.clone(),
            label: s.label,
            split: s.split,
            severity: s.severity,
            t1w,
            fa,
            md,
            mask,
        });
    }
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for e in &entries {
        let line = serde_json::to_string(e).expect("manifest entries serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(entries)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut offset = 0;
    let mut out = Vec::new();
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            let entry = serde_json::from_str(line.trim()).map_err(|e| Error::Parse {
                offset,
                message: format!("{}: {e}", path.display()),
            })?;
            out.push(entry);
        }
        offset += line.len();
    }
    Ok(out)
}

/// Loads every subject listed in `dir`'s manifest.
pub fn load_cohort(dir: impl AsRef<Path>) -> Result<Vec<SubjectRecord>> {
    let dir = dir.as_ref();
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            let get = |p: &Option<String>, m: Modality| p.as_ref().map(|p| load_volume(dir.join(p), m)).transpose();
            let s = SubjectRecord {
                t1w: load_volume(dir.join(&e.t1w), Modality::T1w)?,
                fa: get(&e.fa, Modality::FA)?,
                md: get(&e.md, Modality::MD)?,
                mask: get(&e.mask, Modality::Mask)?,
                id: e.subject_id,
                label: e.label,
                split: e.split,
                severity: e.severity,
            };
            s.validate()?;
            Ok(s)
        })
        .collect()
}
