//! Synthesis and classification quality metrics.
//!
//! Undefined values (Pearson r of a constant reference, precision of a
//! class never predicted) are `None`, written as `NaN` in report tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume3D;
use crate::window::ssim_sum;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMetrics {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    pub ssim: Option<f64>,
    pub pearson_r: Option<f64>,
}

fn masked_pairs<'a>(pred: &'a Volume3D, reference: &'a Volume3D, mask: &'a Volume3D) -> Result<impl Iterator<Item = (f64, f64)> + Clone + 'a> {
    if pred.dims != reference.dims || mask.dims != reference.dims {
        return Err(crate::error::shape_err!("prediction {:?}, reference {:?} and mask {:?} differ", pred.dims, reference.dims, mask.dims));
    }
    if !mask.data.iter().any(|&m| m > 0.0) {
        return Err(Error::EmptyMask);
    }
    Ok(pred.data.iter().zip(&reference.data).zip(&mask.data).filter(|(_, &m)| m > 0.0).map(|((&p, &r), _)| (p as f64, r as f64)))
}

/// Error metrics and Pearson r over masked voxels, SSIM over windows
/// centred on masked voxels. SSIM is `None` when the masked reference is
/// constant or no full window fits.
pub fn synth_metrics(pred: &Volume3D, reference: &Volume3D, mask: &Volume3D) -> Result<SynthMetrics> {
    let pairs = masked_pairs(pred, reference, mask)?;
    let (mut n, mut se, mut ae, mut sp, mut sr) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, r) in pairs.clone() {
        n += 1.0;
        se += (p - r) * (p - r);
        ae += (p - r).abs();
        sp += p;
        sr += r;
    }
    let (mp, mr) = (sp / n, sr / n);
    let (mut cov, mut vp, mut vr) = (0.0, 0.0, 0.0);
    for (p, r) in pairs {
        cov += (p - mp) * (r - mr);
        vp += (p - mp) * (p - mp);
        vr += (r - mr) * (r - mr);
    }
    let pearson_r = (vp > 0.0 && vr > 0.0).then(|| (cov / (vp * vr).sqrt()).clamp(-1.0, 1.0));
    let ssim = match ssim3d(pred, reference, mask, SSIM_WINDOW, SSIM_K1, SSIM_K2) {
        Ok(s) => Some(s),
        Err(Error::DegenerateReference) => None,
        Err(Error::Invalid(_)) => None,
        Err(e) => return Err(e),
    };
    let mse = se / n;
    Ok(SynthMetrics { mse, mae: ae / n, rmse: mse.sqrt(), ssim, pearson_r })
}

/// Mean local SSIM with a uniform `window³` box, `C1 = (k1·L)²`,
/// `C2 = (k2·L)²`, `L` the masked dynamic range of the reference. Windows
/// are centred on masked voxels and must lie inside the volume.
pub fn ssim3d(pred: &Volume3D, reference: &Volume3D, mask: &Volume3D, window: usize, k1: f64, k2: f64) -> Result<f64> {
    if window % 2 == 0 {
        return Err(Error::Config(format!("ssim window must be odd, got {window}")));
    }
    let (lo, hi) = masked_pairs(pred, reference, mask)?.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, r)| (lo.min(r), hi.max(r)));
    let range = hi - lo;
    if range <= 0.0 {
        return Err(Error::DegenerateReference);
    }
    let (c1, c2) = ((k1 * range).powi(2), (k2 * range).powi(2));
    let s = ssim_sum(&pred.data, &reference.data, reference.dims, window, c1, c2, |i| mask.data[i] > 0.0, false);
    if s.count == 0 {
        return Err(Error::Invalid(format!("no {window}³ window centred on a masked voxel fits inside {:?}", reference.dims)));
    }
    Ok(s.sum / s.count as f64)
}

/// Mean of each metric over subjects; flagged entries are skipped and a
/// metric flagged everywhere stays flagged.
pub fn mean_synth_metrics(items: &[SynthMetrics]) -> Option<SynthMetrics> {
    if items.is_empty() {
        return None;
    }
    let n = items.len() as f64;
    let mean_opt = |f: fn(&SynthMetrics) -> Option<f64>| {
        let vals: Vec<f64> = items.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Some(SynthMetrics {
        mse: items.iter().map(|m| m.mse).sum::<f64>() / n,
        mae: items.iter().map(|m| m.mae).sum::<f64>() / n,
        rmse: items.iter().map(|m| m.rmse).sum::<f64>() / n,
        ssim: mean_opt(|m| m.ssim),
        pearson_r: mean_opt(|m| m.pearson_r),
    })
}

/// Harmonic mean of precision and recall.
pub fn f1(precision: f64, recall: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&precision) || !(0.0..=1.0).contains(&recall) {
        return Err(Error::Invalid(format!("precision {precision} and recall {recall} must lie in [0, 1]")));
    }
    if precision + recall == 0.0 {
        return Err(Error::Invalid("f1 is undefined when precision and recall are both 0".into()));
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    /// Fraction of the class's subjects predicted correctly (equals recall).
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// Metrics of a confusion matrix with rows = truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub confusion: Vec<Vec<u64>>,
    pub positive: usize,
    pub per_class: Vec<PerClass>,
    pub accuracy: f64,
    pub auc: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn class_metrics(confusion: &[Vec<u64>], positive: usize) -> Result<ClassMetrics> {
    let k = confusion.len();
    if k < 2 {
        return Err(Error::Invalid(format!("confusion matrix needs at least 2 classes, got {k}")));
    }
    if confusion.iter().any(|r| r.len() != k) {
        return Err(crate::error::shape_err!("confusion matrix must be {k}×{k}"));
    }
    if positive >= k {
        return Err(Error::Invalid(format!("positive class {positive} out of range for {k} classes")));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Invalid("confusion matrix is empty".into()));
    }
    let per_class = (0..k)
        .map(|c| {
            let tp = confusion[c][c];
            let row: u64 = confusion[c].iter().sum();
            let col: u64 = confusion.iter().map(|r| r[c]).sum();
            let (precision, recall) = (ratio(tp, col), ratio(tp, row));
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) => f1(p, r).ok(),
                _ => None,
            };
            PerClass { accuracy: recall, precision, recall, f1 }
        })
        .collect();
    let trace: u64 = (0..k).map(|c| confusion[c][c]).sum();
    Ok(ClassMetrics { confusion: confusion.to_vec(), positive, per_class, accuracy: trace as f64 / total as f64, auc: None })
}

/// Confusion matrix from `(truth, predicted)` class indices.
pub fn confusion_matrix(pairs: &[(usize, usize)], k: usize) -> Result<Vec<Vec<u64>>> {
    let mut m = vec![vec![0u64; k]; k];
    for &(t, p) in pairs {
        if t >= k || p >= k {
            return Err(Error::Invalid(format!("class index ({t}, {p}) out of range for {k} classes")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn subject_auc(scores: &[(f64, bool)]) -> Result<f64> {
    if scores.iter().any(|s| s.0.is_nan()) {
        return Err(Error::Invalid("AUC scores contain NaN".into()));
    }
    let n_pos = scores.iter().filter(|s| s.1).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid(format!("AUC needs both classes; have {n_pos} positive and {n_neg} negative")));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sum of 1-based midranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * sorted[i..j].iter().filter(|s| s.1).count() as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Formats a flagged value for a report cell.
pub fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), |v| format!("{v:.6}"))
}

pub const SYNTH_COLUMNS: [&str; 7] = ["set", "map", "mse", "mae", "rmse", "ssim", "pearson_r"];

/// One row per `(set, map)` with the five synthesis metrics, tab-separated.
pub fn synth_table(rows: &[(String, String, SynthMetrics)]) -> String {
    let mut s = SYNTH_COLUMNS.join("\t") + "\n";
    for (set, map, m) in rows {
        let _ = writeln!(s, "{set}\t{map}\t{}\t{}\t{}\t{}\t{}", cell(Some(m.mse)), cell(Some(m.mae)), cell(Some(m.rmse)), cell(m.ssim), cell(m.pearson_r));
    }
    s
}

/// Parses a table written by [`synth_table`].
pub fn parse_synth_table(text: &str) -> Result<Vec<(String, String, SynthMetrics)>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.split('\t').collect::<Vec<_>>() != SYNTH_COLUMNS {
        return Err(Error::Parse { offset: 0, message: format!("expected header `{}`", SYNTH_COLUMNS.join(" ")) });
    }
    let mut offset = header.len() + 1;
    let mut out = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Parse { offset, message: "synthesis report row needs 7 fields".into() };
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let opt = |s: &str| num(s).map(|v| (!v.is_nan()).then_some(v));
        out.push((f[0].to_string(), f[1].to_string(), SynthMetrics { mse: num(f[2])?, mae: num(f[3])?, rmse: num(f[4])?, ssim: opt(f[5])?, pearson_r: opt(f[6])? }));
        offset += line.len() + 1;
    }
    Ok(out)
}

/// Per-class metric rows, the confusion matrix, overall accuracy and AUC.
/// For two classes the rows are repeated with the class labels swapped,
/// the layout some published tables use.
pub fn class_table(m: &ClassMetrics, names: &[&str]) -> String {
    let k = m.confusion.len();
    let mut s = format!("metric\t{}\n", names.join("\t"));
    let rows: [(&str, fn(&PerClass) -> Option<f64>); 4] =
        [("accuracy", |p| p.accuracy), ("precision", |p| p.precision), ("recall", |p| p.recall), ("f1", |p| p.f1)];
    for (name, f) in rows {
        let cells: Vec<String> = m.per_class.iter().map(|p| cell(f(p))).collect();
        let _ = writeln!(s, "{name}\t{}", cells.join("\t"));
    }
    if k == 2 {
        for (name, f) in rows {
            let cells: Vec<String> = m.per_class.iter().rev().map(|p| cell(f(p))).collect();
            let _ = writeln!(s, "{name}_swapped\t{}", cells.join("\t"));
        }
    }
    for (i, row) in m.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "true_{}\t{}", names[i], cells.join("\t"));
    }
    let _ = writeln!(s, "overall_accuracy\t{}", cell(Some(m.accuracy)));
    if k == 2 {
        let _ = writeln!(s, "subject_auc\t{}", cell(m.auc));
    }
    s
}
