//! Brute-force metric oracles: every quantity recomputed from its
//! definition, sharing no code with the library.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxsynth::metrics::{class_metrics, ssim3d, subject_auc, synth_metrics};
use voxsynth::volume::{Modality, Volume3D};

pub const ORACLE_TOL: f64 = 1e-6;
pub const IDENTITY_TOL: f64 = 1e-12;

pub fn vol(dims: [usize; 3], data: Vec<f32>) -> Volume3D {
    Volume3D::new(dims, [1.0; 3], data, Modality::Prediction).unwrap()
}

/// Direct-summation SSIM: every window recomputed from scratch.
pub fn ssim_oracle(x: &[f32], y: &[f32], mask: &[f32], dims: [usize; 3], w: usize, k1: f64, k2: f64) -> f64 {
    let [d, h, wd] = dims;
    let r = w / 2;
    let idx = |z: usize, yy: usize, xx: usize| (z * h + yy) * wd + xx;
    let masked_ref: Vec<f64> = (0..x.len()).filter(|&i| mask[i] > 0.0).map(|i| y[i] as f64).collect();
    let l = masked_ref.iter().cloned().fold(f64::MIN, f64::max) - masked_ref.iter().cloned().fold(f64::MAX, f64::min);
    let (c1, c2) = ((k1 * l).powi(2), (k2 * l).powi(2));
    let (mut total, mut count) = (0.0, 0);
    for z in r..d.saturating_sub(r) {
        for yy in r..h.saturating_sub(r) {
            for xx in r..wd.saturating_sub(r) {
                if mask[idx(z, yy, xx)] <= 0.0 {
                    continue;
                }
                let mut px = Vec::new();
                let mut py = Vec::new();
                for a in z - r..=z + r {
                    for b in yy - r..=yy + r {
                        for c in xx - r..=xx + r {
                            px.push(x[idx(a, b, c)] as f64);
                            py.push(y[idx(a, b, c)] as f64);
                        }
                    }
                }
                let n = px.len() as f64;
                let mx = px.iter().sum::<f64>() / n;
                let my = py.iter().sum::<f64>() / n;
                let vx = px.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
                let vy = py.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
                let cxy = px.iter().zip(&py).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn random_pair(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let n = dims.iter().product();
    let x: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let y: Vec<f32> = x.iter().map(|v| v * rng.gen_range(0.5..1.5) + rng.gen_range(-0.2..0.2)).collect();
    let mask: Vec<f32> = (0..n).map(|_| if rng.gen_bool(0.7) { 1.0 } else { 0.0 }).collect();
    (x, y, mask)
}

pub fn confusion_oracle(m: &[Vec<u64>]) -> (Vec<(Option<f64>, Option<f64>)>, f64) {
    let k = m.len();
    let mut out = Vec::new();
    for c in 0..k {
        let mut col = 0;
        let mut row = 0;
        for i in 0..k {
            col += m[i][c];
            row += m[c][i];
        }
        let p = if col == 0 { None } else { Some(m[c][c] as f64 / col as f64) };
        let r = if row == 0 { None } else { Some(m[c][c] as f64 / row as f64) };
        out.push((p, r));
    }
    let total: u64 = m.iter().map(|r| r.iter().sum::<u64>()).sum();
    let diag: u64 = (0..k).map(|i| m[i][i]).sum();
    (out, diag as f64 / total as f64)
}

pub fn auc_oracle(s: &[(f64, bool)]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for a in s.iter().filter(|x| x.1) {
        for b in s.iter().filter(|x| !x.1) {
            pairs += 1.0;
            wins += if a.0 > b.0 {
                1.0
            } else if a.0 == b.0 {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

/// One random instance of every metric against its oracle; returns the
/// first disagreement.
pub fn check_instance(case: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0AC1E ^ case);
    let dims = if case % 2 == 0 { [4, 4, 4] } else { [6, 5, 7] };
    let (x, y, mut mask) = random_pair(&mut rng, dims);
    // one interior centre is always masked, so SSIM is defined
    mask[(dims[1] + 1) * dims[2] + 1 + dims[1] * dims[2]] = 1.0;
    let m = synth_metrics(&vol(dims, x.clone()), &vol(dims, y.clone()), &vol(dims, mask.clone())).map_err(|e| e.to_string())?;
    let pairs: Vec<(f64, f64)> = (0..x.len()).filter(|&i| mask[i] > 0.0).map(|i| (x[i] as f64, y[i] as f64)).collect();
    let n = pairs.len() as f64;
    let mse = pairs.iter().map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let mae = pairs.iter().map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let (ma, mb) = (pairs.iter().map(|p| p.0).sum::<f64>() / n, pairs.iter().map(|p| p.1).sum::<f64>() / n);
    let cov: f64 = pairs.iter().map(|(a, b)| (a - ma) * (b - mb)).sum();
    let va: f64 = pairs.iter().map(|(a, _)| (a - ma).powi(2)).sum();
    let vb: f64 = pairs.iter().map(|(_, b)| (b - mb).powi(2)).sum();
    let ssim = ssim3d(&vol(dims, x.clone()), &vol(dims, y.clone()), &vol(dims, mask.clone()), 3, 0.01, 0.03).map_err(|e| e.to_string())?;
    let checks = [
        ("mse", m.mse, mse),
        ("mae", m.mae, mae),
        ("rmse", m.rmse, mse.sqrt()),
        ("pearson", m.pearson_r.unwrap_or(f64::NAN), cov / (va * vb).sqrt()),
        ("ssim", ssim, ssim_oracle(&x, &y, &mask, dims, 3, 0.01, 0.03)),
    ];
    for (name, got, want) in checks {
        if !((got - want).abs() < ORACLE_TOL) {
            return Err(format!("case {case}: {name} {got} vs oracle {want}"));
        }
    }
    if (m.rmse * m.rmse - m.mse).abs() > IDENTITY_TOL * m.mse.max(1e-300) {
        return Err(format!("case {case}: rmse² − mse = {:e}", m.rmse * m.rmse - m.mse));
    }

    let k = rng.gen_range(2..5);
    let mut cm: Vec<Vec<u64>> = (0..k).map(|_| (0..k).map(|_| rng.gen_range(0..6)).collect()).collect();
    cm[0][0] += 1;
    let got = class_metrics(&cm, 0).map_err(|e| e.to_string())?;
    let (pr, acc) = confusion_oracle(&cm);
    if (got.accuracy - acc).abs() >= ORACLE_TOL {
        return Err(format!("case {case}: accuracy {} vs oracle {acc}", got.accuracy));
    }
    for (c, (p, r)) in pr.into_iter().enumerate() {
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() < ORACLE_TOL,
            (a, b) => a.is_none() && b.is_none(),
        };
        let f = match (p, r) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        let pc = &got.per_class[c];
        if !close(pc.precision, p) || !close(pc.recall, r) || !close(pc.f1, f) {
            return Err(format!("case {case}: class {c} {pc:?} vs oracle p {p:?} r {r:?} f1 {f:?}"));
        }
    }

    let len = rng.gen_range(2..20);
    let mut s: Vec<(f64, bool)> = (0..len).map(|_| ((rng.gen_range(0..8) as f64) / 8.0, rng.gen_bool(0.5))).collect();
    s[0].1 = true;
    s[1].1 = false;
    let auc = subject_auc(&s).map_err(|e| e.to_string())?;
    if (auc - auc_oracle(&s)).abs() >= ORACLE_TOL {
        return Err(format!("case {case}: auc {auc} vs oracle {}", auc_oracle(&s)));
    }
    Ok(())
}
