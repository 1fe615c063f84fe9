use serde::{Deserialize, Serialize};

use super::{BackwardOp, Graph, Mode, Var};
use crate::error::{shape_err, Result};

/// Running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub momentum: f32,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Affine normalisation backward shared by batch- and layer-norm.
struct NormOp {
    name: &'static str,
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f32>,
    /// 1/sqrt(var+eps) per group
    inv_std: Vec<f32>,
    /// Statistics were computed from the input (train batch-norm, layer-norm)
    /// rather than frozen running values.
    batch_stats: bool,
    layout: GroupLayout,
}

/// How elements map to normalisation groups and to affine channels.
#[derive(Clone, Copy)]
enum GroupLayout {
    /// `[N, C, S...]`: group = channel, affine index = channel
    Channels { n: usize, c: usize, s: usize },
    /// `[..., E]`: group = row, affine index = position in row
    Rows { rows: usize, e: usize },
}

impl GroupLayout {
    /// Calls `f(group, affine_index, flat_index)` for every element.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        match *self {
            GroupLayout::Channels { n, c, s } => {
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * s;
                        for i in base..base + s {
                            f(ch, ch, i);
                        }
                    }
                }
            }
            GroupLayout::Rows { rows, e } => {
                for r in 0..rows {
                    for j in 0..e {
                        f(r, j, r * e + j);
                    }
                }
            }
        }
    }

    fn groups(&self) -> (usize, usize) {
        match *self {
            GroupLayout::Channels { n, c, s } => (c, n * s),
            GroupLayout::Rows { rows, e } => (rows, e),
        }
    }
}

impl BackwardOp for NormOp {
    fn name(&self) -> &'static str {
        self.name
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.input, self.gamma, self.beta]
    }
    fn backward(&self, g: &Graph, _out: Var, grad_out: &[f32]) -> Vec<Option<Vec<f32>>> {
        let gamma = g.value(self.gamma);
        let affine = gamma.len();
        let (groups, count) = self.layout.groups();
        let mut dgamma = vec![0.0f64; affine];
        let mut dbeta = vec![0.0f64; affine];
        // per group: sum of dxhat and of dxhat*xhat
        let mut s1 = vec![0.0f64; groups];
        let mut s2 = vec![0.0f64; groups];
        self.layout.for_each(|grp, a, i| {
            let dy = grad_out[i] as f64;
            dgamma[a] += dy * self.xhat[i] as f64;
            dbeta[a] += dy;
            let dxh = dy * gamma[a] as f64;
            s1[grp] += dxh;
            s2[grp] += dxh * self.xhat[i] as f64;
        });
        let mut dx = vec![0.0f32; grad_out.len()];
        let m = count as f64;
        self.layout.for_each(|grp, a, i| {
            let dxh = grad_out[i] as f64 * gamma[a] as f64;
            let inv = self.inv_std[grp] as f64;
            dx[i] = if self.batch_stats {
                (inv / m * (m * dxh - s1[grp] - self.xhat[i] as f64 * s2[grp])) as f32
            } else {
                (inv * dxh) as f32
            };
        });
        let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
        vec![Some(dx), Some(to32(dgamma)), Some(to32(dbeta))]
    }
}

impl Graph {
    fn channel_layout(&self, x: Var, gamma: Var, beta: Var, what: &str) -> Result<GroupLayout> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(shape_err!("{what}: input needs [N, C, ...], got {shape:?}"));
        }
        let (n, c) = (shape[0], shape[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!(
                "{what}: {c} channels but gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        Ok(GroupLayout::Channels { n, c, s: shape[2..].iter().product() })
    }

    /// Batch normalisation over every axis except the channel axis 1.
    ///
    /// In train mode the batch statistics normalise the input and are folded
    /// into `stats` with its momentum (unbiased variance, as is customary).
    /// In eval mode `stats` is only read.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: &mut RunningStats, mode: Mode, eps: f32) -> Result<Var> {
        if mode == Mode::Eval {
            return self.batch_norm_eval(x, gamma, beta, stats, eps);
        }
        let layout = self.channel_layout(x, gamma, beta, "batch_norm")?;
        let GroupLayout::Channels { n, c, s } = layout else { unreachable!() };
        if stats.channels() != c {
            return Err(shape_err!("batch_norm: running stats for {} channels, input has {c}", stats.channels()));
        }
        let xs = self.value(x);
        let count = (n * s) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                mean[ch] += xs[base..base + s].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                var[ch] += xs[base..base + s].iter().map(|&v| (v as f64 - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f32> = var.iter().map(|&v| (1.0 / (v + eps as f64).sqrt()) as f32).collect();
        let (values, xhat) = self.affine_normalize(x, gamma, beta, layout, |ch| (mean[ch], inv_std[ch] as f64));
        let mom = stats.momentum as f64;
        for ch in 0..c {
            let unbiased = if count > 1.0 { var[ch] * count / (count - 1.0) } else { var[ch] };
            stats.mean[ch] = ((1.0 - mom) * stats.mean[ch] as f64 + mom * mean[ch]) as f32;
            stats.var[ch] = ((1.0 - mom) * stats.var[ch] as f64 + mom * unbiased) as f32;
        }
        let shape = self.shape(x).to_vec();
        let op = NormOp { name: "batch_norm", input: x, gamma, beta, xhat, inv_std, batch_stats: true, layout };
        Ok(self.push_op(values, shape, Box::new(op)))
    }

    /// Batch normalisation with frozen running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, stats: &RunningStats, eps: f32) -> Result<Var> {
        let layout = self.channel_layout(x, gamma, beta, "batch_norm")?;
        let GroupLayout::Channels { c, .. } = layout else { unreachable!() };
        if stats.channels() != c {
            return Err(shape_err!("batch_norm: running stats for {} channels, input has {c}", stats.channels()));
        }
        let inv_std: Vec<f32> = stats.var.iter().map(|&v| (1.0 / (v as f64 + eps as f64).sqrt()) as f32).collect();
        let (values, xhat) = self.affine_normalize(x, gamma, beta, layout, |ch| (stats.mean[ch] as f64, inv_std[ch] as f64));
        let shape = self.shape(x).to_vec();
        let op = NormOp { name: "batch_norm", input: x, gamma, beta, xhat, inv_std, batch_stats: false, layout };
        Ok(self.push_op(values, shape, Box::new(op)))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let e = *shape.last().unwrap();
        if self.shape(gamma) != [e] || self.shape(beta) != [e] {
            return Err(shape_err!("layer_norm: last axis {e} but gamma {:?}", self.shape(gamma)));
        }
        let rows = self.value(x).len() / e;
        let xs = self.value(x);
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * e..(r + 1) * e];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / e as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / e as f64;
            stats.push((mean, 1.0 / (var + eps as f64).sqrt()));
        }
        let layout = GroupLayout::Rows { rows, e };
        let (values, xhat) = self.affine_normalize(x, gamma, beta, layout, |r| stats[r]);
        let inv_std = stats.iter().map(|s| s.1 as f32).collect();
        let op = NormOp { name: "layer_norm", input: x, gamma, beta, xhat, inv_std, batch_stats: true, layout };
        Ok(self.push_op(values, shape, Box::new(op)))
    }

    fn affine_normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: GroupLayout,
        group_stats: impl Fn(usize) -> (f64, f64),
    ) -> (Vec<f32>, Vec<f32>) {
        let xs = self.value(x);
        let gm = self.value(gamma);
        let bt = self.value(beta);
        let mut xhat = vec![0.0f32; xs.len()];
        let mut out = vec![0.0f32; xs.len()];
        let mut cache: Option<(usize, f64, f64)> = None;
        layout.for_each(|grp, a, i| {
            let (mean, inv) = match cache {
                Some((g0, m, s)) if g0 == grp => (m, s),
                _ => {
                    let (m, s) = group_stats(grp);
                    cache = Some((grp, m, s));
                    (m, s)
                }
            };
            let h = ((xs[i] as f64 - mean) * inv) as f32;
            xhat[i] = h;
            out[i] = gm[a] * h + bt[a];
        });
        (out, xhat)
    }
}
