//! Finite-difference checks of every autodiff primitive against naive
//! 64-bit reference forwards.
//!
//! Each case projects the op output onto fixed random weights so the
//! checked scalar has a non-degenerate gradient. The engine gradient (f32)
//! is compared to central differences of the f64 reference with h = 1e-3.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxsynth::tensor::{dropout_mask, AttentionWeights, ConvSpec, Graph, Mode, RunningStats, Var};

pub const FD_STEP: f64 = 1e-3;
pub const PRIMITIVE_TOL: f64 = 1e-4;

pub struct Input {
    pub values: Vec<f32>,
    pub shape: Vec<usize>,
    pub grad: bool,
}

type Engine = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;
type Reference = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

pub struct Case {
    pub op: &'static str,
    pub label: String,
    pub inputs: Vec<Input>,
    pub engine: Engine,
    pub reference: Reference,
}

pub struct Outcome {
    pub op: &'static str,
    pub label: String,
    pub forward_err: f64,
    pub grad_err: f64,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.forward_err < PRIMITIVE_TOL && self.grad_err < PRIMITIVE_TOL
    }
}

/// `‖a − b‖∞ / ‖b‖∞`, falling back to the absolute error when `b` is zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

pub fn run(case: &Case, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut g = Graph::with_seed(seed, 0);
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|i| g.leaf(i.values.clone(), &i.shape, i.grad).unwrap())
        .collect();
    let y = (case.engine)(&mut g, &vars);
    let out: Vec<f64> = g.value(y).iter().map(|&v| v as f64).collect();
    let weights: Vec<f32> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let l = g.weighted_sum(y, weights.clone()).unwrap();
    g.backward(l).unwrap();

    let xs: Vec<Vec<f64>> = case.inputs.iter().map(|i| i.values.iter().map(|&v| v as f64).collect()).collect();
    let reference_out = (case.reference)(&xs);
    let forward_err = rel_err(&out, &reference_out);
    let project = |xs: &[Vec<f64>]| -> f64 {
        (case.reference)(xs).iter().zip(&weights).map(|(v, &w)| v * w as f64).sum()
    };

    // Error is taken over the full gradient vector: some inputs (e.g. the
    // key bias of attention) have an exactly zero true gradient.
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, input) in case.inputs.iter().enumerate() {
        if !input.grad {
            continue;
        }
        analytic.extend(g.grad(vars[k]).unwrap().iter().map(|&v| v as f64));
        let mut probe = xs.clone();
        for j in 0..probe[k].len() {
            let orig = probe[k][j];
            probe[k][j] = orig + FD_STEP;
            let up = project(&probe);
            probe[k][j] = orig - FD_STEP;
            let down = project(&probe);
            probe[k][j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    let grad_err = rel_err(&analytic, &numeric);
    Outcome { op: case.op, label: case.label.clone(), forward_err, grad_err }
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn new(seed: u64) -> Self {
        Gen(ChaCha8Rng::seed_from_u64(seed))
    }

    fn uniform(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| self.0.gen_range(lo..hi)).collect()
    }

    /// Values at least `gap` away from zero, for ops with a kink at 0.
    fn away_from_zero(&mut self, n: usize, gap: f32) -> Vec<f32> {
        (0..n)
            .map(|_| {
                let m = self.0.gen_range(gap..1.0);
                if self.0.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect()
    }

    /// Distinct values separated by at least 0.01, shuffled.
    fn distinct(&mut self, n: usize) -> Vec<f32> {
        let mut v: Vec<f32> = (0..n).map(|i| i as f32 * 0.01 - n as f32 * 0.005).collect();
        for i in (1..n).rev() {
            let j = self.0.gen_range(0..=i);
            v.swap(i, j);
        }
        v
    }
}

fn inp(values: Vec<f32>, shape: &[usize], grad: bool) -> Input {
    Input { values, shape: shape.to_vec(), grad }
}

fn numel(s: &[usize]) -> usize {
    s.iter().product()
}

// ---------- f64 reference forwards ----------

/// Naive convolution over `[N,C,D,H,W]` with weight `[F,C,kd,kh,kw]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_ref(x: &[f64], xs: [usize; 5], w: &[f64], ws: [usize; 5], b: Option<&[f64]>, stride: usize, pad: [usize; 3]) -> (Vec<f64>, [usize; 5]) {
    let [n, c, d, h, wd] = xs;
    let [f, _, kd, kh, kw] = ws;
    let od = (d + 2 * pad[0] - kd) / stride + 1;
    let oh = (h + 2 * pad[1] - kh) / stride + 1;
    let ow = (wd + 2 * pad[2] - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * f * od * oh * ow);
    for bn in 0..n {
        for fi in 0..f {
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b[fi]);
                        for ci in 0..c {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for cc in 0..kw {
                                        let iz = (z * stride + a) as isize - pad[0] as isize;
                                        let iy = (y * stride + bb) as isize - pad[1] as isize;
                                        let ix = (xo * stride + cc) as isize - pad[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((bn * c + ci) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((fi * c + ci) * kd + a) * kh + bb) * kw + cc;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    (out, [n, f, od, oh, ow])
}

/// Per-channel normalisation of `[N, C, S]` with given or batch statistics.
pub fn batch_norm_ref(x: &[f64], n: usize, c: usize, s: usize, gamma: &[f64], beta: &[f64], stats: Option<(&[f64], &[f64])>, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let idx = |b: usize, i: usize| (b * c + ch) * s + i;
        let (mean, var) = match stats {
            Some((m, v)) => (m[ch], v[ch]),
            None => {
                let cnt = (n * s) as f64;
                let mean = (0..n).flat_map(|b| (0..s).map(move |i| (b, i))).map(|(b, i)| x[idx(b, i)]).sum::<f64>() / cnt;
                let var = (0..n)
                    .flat_map(|b| (0..s).map(move |i| (b, i)))
                    .map(|(b, i)| (x[idx(b, i)] - mean).powi(2))
                    .sum::<f64>()
                    / cnt;
                (mean, var)
            }
        };
        for b in 0..n {
            for i in 0..s {
                out[idx(b, i)] = gamma[ch] * (x[idx(b, i)] - mean) / (var + eps).sqrt() + beta[ch];
            }
        }
    }
    out
}

pub fn layer_norm_ref(x: &[f64], e: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    x.chunks(e)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / e as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / e as f64;
            row.iter()
                .enumerate()
                .map(move |(j, v)| gamma[j] * (v - mean) / (var + eps).sqrt() + beta[j])
                .collect::<Vec<_>>()
        })
        .collect()
}

/// `x·Wᵀ + b` with `x` of `rows × inf`, `w` of `outf × inf`.
pub fn linear_ref(x: &[f64], w: &[f64], b: Option<&[f64]>, inf: usize, outf: usize) -> Vec<f64> {
    let rows = x.len() / inf;
    let mut out = Vec::with_capacity(rows * outf);
    for r in 0..rows {
        for o in 0..outf {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for i in 0..inf {
                acc += x[r * inf + i] * w[o * inf + i];
            }
            out.push(acc);
        }
    }
    out
}

pub fn attention_ref(p: &[Vec<f64>], n: usize, t: usize, e: usize, heads: usize) -> Vec<f64> {
    let x = &p[0];
    let q = linear_ref(x, &p[1], Some(&p[2]), e, e);
    let k = linear_ref(x, &p[3], Some(&p[4]), e, e);
    let v = linear_ref(x, &p[5], Some(&p[6]), e, e);
    let dh = e / heads;
    let mut o = vec![0.0; n * t * e];
    for b in 0..n {
        for h in 0..heads {
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| (0..dh).map(|d| q[(b * t + i) * e + h * dh + d] * k[(b * t + j) * e + h * dh + d]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = ex.iter().sum();
                for d in 0..dh {
                    o[(b * t + i) * e + h * dh + d] = (0..t).map(|j| ex[j] / z * v[(b * t + j) * e + h * dh + d]).sum();
                }
            }
        }
    }
    linear_ref(&o, &p[7], Some(&p[8]), e, e)
}

/// Mean local SSIM with a uniform window over fully interior centres with
/// positive mask, straight from the definition.
pub fn ssim_ref(x: &[f64], y: &[f64], dims: [usize; 3], window: usize, c1: f64, c2: f64, mask: &[f64]) -> Option<f64> {
    let [d, h, w] = dims;
    let r = window / 2;
    let mut sum = 0.0;
    let mut count = 0usize;
    for z in r..d.saturating_sub(r) {
        for yy in r..h.saturating_sub(r) {
            for xx in r..w.saturating_sub(r) {
                let centre = (z * h + yy) * w + xx;
                if mask[centre] <= 0.0 {
                    continue;
                }
                let mut idx = Vec::new();
                for a in z - r..=z + r {
                    for b in yy - r..=yy + r {
                        for c in xx - r..=xx + r {
                            idx.push((a * h + b) * w + c);
                        }
                    }
                }
                let m = idx.len() as f64;
                let mx = idx.iter().map(|&i| x[i]).sum::<f64>() / m;
                let my = idx.iter().map(|&i| y[i]).sum::<f64>() / m;
                let vx = idx.iter().map(|&i| (x[i] - mx).powi(2)).sum::<f64>() / m;
                let vy = idx.iter().map(|&i| (y[i] - my).powi(2)).sum::<f64>() / m;
                let cxy = idx.iter().map(|&i| (x[i] - mx) * (y[i] - my)).sum::<f64>() / m;
                sum += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

pub fn max_pool_ref(x: &[f64], planes: usize, dims: [usize; 3], pool_depth: bool) -> Vec<f64> {
    let [d, h, w] = dims;
    let kd = if pool_depth { 2 } else { 1 };
    let od = d / kd;
    let mut out = Vec::new();
    for p in 0..planes {
        for z in 0..od {
            for y in 0..h / 2 {
                for xo in 0..w / 2 {
                    let mut m = f64::NEG_INFINITY;
                    for a in 0..kd {
                        for b in 0..2 {
                            for c in 0..2 {
                                m = m.max(x[p * d * h * w + ((z * kd + a) * h + y * 2 + b) * w + xo * 2 + c]);
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

// ---------- cases ----------

fn conv3d_cases(g: &mut Gen) -> Vec<Case> {
    let configs: [([usize; 5], usize, usize, usize, usize); 4] = [
        ([1, 2, 5, 5, 5], 3, 3, 1, 1),
        ([2, 1, 4, 3, 5], 2, 3, 1, 0),
        ([1, 3, 6, 6, 4], 2, 3, 2, 1),
        ([1, 2, 4, 4, 4], 2, 1, 1, 0),
    ];
    configs
        .iter()
        .map(|&(xs, f, k, stride, pad)| {
            let ws = [f, xs[1], k, k, k];
            let inputs = vec![
                inp(g_uniform(g, numel(&xs)), &xs, true),
                inp(g_uniform(g, numel(&ws)), &ws, true),
                inp(g_uniform(g, f), &[f], true),
            ];
            Case {
                op: "conv3d",
                label: format!("x{xs:?} w{ws:?} s{stride} p{pad}"),
                inputs,
                engine: Box::new(move |g, v| g.conv3d(v[0], v[1], Some(v[2]), ConvSpec { stride, padding: pad }).unwrap()),
                reference: Box::new(move |p| conv_ref(&p[0], xs, &p[1], ws, Some(&p[2]), stride, [pad; 3]).0),
            }
        })
        .collect()
}

fn g_uniform(g: &mut Gen, n: usize) -> Vec<f32> {
    g.uniform(n, -1.0, 1.0)
}

fn conv2d_cases(g: &mut Gen) -> Vec<Case> {
    let configs: [([usize; 4], usize, usize, usize, usize); 3] = [
        ([1, 2, 6, 6], 3, 3, 1, 1),
        ([2, 3, 5, 7], 2, 3, 2, 1),
        ([1, 1, 4, 4], 2, 2, 1, 0),
    ];
    configs
        .iter()
        .map(|&(xs, f, k, stride, pad)| {
            let ws = [f, xs[1], k, k];
            let inputs = vec![
                inp(g_uniform(g, numel(&xs)), &xs, true),
                inp(g_uniform(g, numel(&ws)), &ws, true),
                inp(g_uniform(g, f), &[f], true),
            ];
            let x5 = [xs[0], xs[1], 1, xs[2], xs[3]];
            let w5 = [f, xs[1], 1, k, k];
            Case {
                op: "conv2d",
                label: format!("x{xs:?} w{ws:?} s{stride} p{pad}"),
                inputs,
                engine: Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvSpec { stride, padding: pad }).unwrap()),
                reference: Box::new(move |p| conv_ref(&p[0], x5, &p[1], w5, Some(&p[2]), stride, [0, pad, pad]).0),
            }
        })
        .collect()
}

fn batch_norm_cases(g: &mut Gen) -> Vec<Case> {
    let mut cases = Vec::new();
    for shape in [vec![2, 3, 4, 4], vec![3, 2, 5], vec![2, 2, 2, 3, 2]] {
        let (n, c) = (shape[0], shape[1]);
        let s = numel(&shape[2..]);
        let inputs = vec![
            inp(g.uniform(numel(&shape), -2.0, 2.0), &shape, true),
            inp(g.uniform(c, 0.5, 1.5), &[c], true),
            inp(g_uniform(g, c), &[c], true),
        ];
        cases.push(Case {
            op: "batch_norm(train)",
            label: format!("{shape:?}"),
            inputs,
            engine: Box::new(move |g, v| {
                let mut stats = RunningStats::new(c);
                g.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train, 1e-5).unwrap()
            }),
            reference: Box::new(move |p| batch_norm_ref(&p[0], n, c, s, &p[1], &p[2], None, 1e-5)),
        });
    }
    for shape in [vec![2, 3, 4, 4], vec![1, 2, 6], vec![2, 4, 3]] {
        let (n, c) = (shape[0], shape[1]);
        let s = numel(&shape[2..]);
        let mean = g.uniform(c, -0.5, 0.5);
        let var = g.uniform(c, 0.5, 2.0);
        let inputs = vec![
            inp(g_uniform(g, numel(&shape)), &shape, true),
            inp(g.uniform(c, 0.5, 1.5), &[c], true),
            inp(g_uniform(g, c), &[c], true),
        ];
        let stats = RunningStats { mean: mean.clone(), var: var.clone(), momentum: 0.1 };
        let (m64, v64): (Vec<f64>, Vec<f64>) = (mean.iter().map(|&v| v as f64).collect(), var.iter().map(|&v| v as f64).collect());
        cases.push(Case {
            op: "batch_norm(eval)",
            label: format!("{shape:?}"),
            inputs,
            engine: Box::new(move |g, v| g.batch_norm_eval(v[0], v[1], v[2], &stats, 1e-5).unwrap()),
            reference: Box::new(move |p| batch_norm_ref(&p[0], n, c, s, &p[1], &p[2], Some((&m64, &v64)), 1e-5)),
        });
    }
    cases
}

fn layer_norm_cases(g: &mut Gen) -> Vec<Case> {
    [vec![2, 5], vec![1, 3, 4], vec![2, 2, 8]]
        .into_iter()
        .map(|shape| {
            let e = *shape.last().unwrap();
            let inputs = vec![
                inp(g.uniform(numel(&shape), -2.0, 2.0), &shape, true),
                inp(g.uniform(e, 0.5, 1.5), &[e], true),
                inp(g_uniform(g, e), &[e], true),
            ];
            Case {
                op: "layer_norm",
                label: format!("{shape:?}"),
                inputs,
                engine: Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
                reference: Box::new(move |p| layer_norm_ref(&p[0], e, &p[1], &p[2], 1e-5)),
            }
        })
        .collect()
}

fn attention_cases(g: &mut Gen) -> Vec<Case> {
    [(1, 3, 4, 2), (2, 2, 4, 1), (1, 4, 6, 3)]
        .into_iter()
        .map(|(n, t, e, heads)| {
            let mut inputs = vec![inp(g_uniform(g, n * t * e), &[n, t, e], true)];
            for _ in 0..4 {
                inputs.push(inp(g.uniform(e * e, -0.7, 0.7), &[e, e], true));
                inputs.push(inp(g.uniform(e, -0.3, 0.3), &[e], true));
            }
            Case {
                op: "multi_head_attention",
                label: format!("[{n},{t},{e}] heads={heads}"),
                inputs,
                engine: Box::new(move |g, v| {
                    let w = AttentionWeights { wq: v[1], bq: v[2], wk: v[3], bk: v[4], wv: v[5], bv: v[6], wo: v[7], bo: v[8] };
                    g.multi_head_attention(v[0], heads, w).unwrap()
                }),
                reference: Box::new(move |p| attention_ref(p, n, t, e, heads)),
            }
        })
        .collect()
}

fn unary_cases(g: &mut Gen) -> Vec<Case> {
    let mut cases = Vec::new();
    for shape in [vec![7], vec![2, 3, 4], vec![3, 1, 5]] {
        let n = numel(&shape);
        cases.push(Case {
            op: "relu",
            label: format!("{shape:?}"),
            inputs: vec![inp(g.away_from_zero(n, 0.01), &shape, true)],
            engine: Box::new(|g, v| g.relu(v[0])),
            reference: Box::new(|p| p[0].iter().map(|&v| v.max(0.0)).collect()),
        });
        cases.push(Case {
            op: "sigmoid",
            label: format!("{shape:?}"),
            inputs: vec![inp(g.uniform(n, -3.0, 3.0), &shape, true)],
            engine: Box::new(|g, v| g.sigmoid(v[0])),
            reference: Box::new(|p| p[0].iter().map(|&v| sigmoid(v)).collect()),
        });
        cases.push(Case {
            op: "scale",
            label: format!("{shape:?}"),
            inputs: vec![inp(g_uniform(g, n), &shape, true)],
            engine: Box::new(|g, v| g.scale(v[0], -1.75)),
            reference: Box::new(|p| p[0].iter().map(|&v| v * -1.75f32 as f64).collect()),
        });
        let seed_shape = shape.clone();
        cases.push(Case {
            op: "dropout",
            label: format!("{shape:?} p=0.5"),
            inputs: vec![inp(g_uniform(g, n), &shape, true)],
            engine: Box::new(|g, v| g.dropout(v[0], 0.5, Mode::Train).unwrap()),
            reference: Box::new(move |p| {
                // The dropout output is node 1 in a graph seeded with DROPOUT_SEED.
                let mask = dropout_mask(DROPOUT_SEED, 1, 0, numel(&seed_shape), 0.5);
                p[0].iter().zip(mask).map(|(v, m)| v * m as f64).collect()
            }),
        });
    }
    cases
}

pub const DROPOUT_SEED: u64 = 41;

fn softmax_cases(g: &mut Gen) -> Vec<Case> {
    [(vec![2, 5], 1), (vec![3, 4, 2], 1), (vec![4, 3], 0)]
        .into_iter()
        .map(|(shape, axis)| {
            let sh = shape.clone();
            Case {
                op: "softmax",
                label: format!("{shape:?} axis={axis}"),
                inputs: vec![inp(g.uniform(numel(&shape), -2.0, 2.0), &shape, true)],
                engine: Box::new(move |g, v| g.softmax(v[0], axis).unwrap()),
                reference: Box::new(move |p| {
                    let outer: usize = sh[..axis].iter().product();
                    let len = sh[axis];
                    let inner: usize = sh[axis + 1..].iter().product();
                    let mut out = vec![0.0; p[0].len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| o * len * inner + a * inner + i;
                            let z: f64 = (0..len).map(|a| p[0][at(a)].exp()).sum();
                            for a in 0..len {
                                out[at(a)] = p[0][at(a)].exp() / z;
                            }
                        }
                    }
                    out
                }),
            }
        })
        .collect()
}

fn pool_cases(g: &mut Gen) -> Vec<Case> {
    let mut cases = Vec::new();
    for shape in [[1usize, 2, 4, 4, 4], [2, 1, 2, 4, 6], [1, 1, 5, 4, 3]] {
        let planes = shape[0] * shape[1];
        let dims = [shape[2], shape[3], shape[4]];
        cases.push(Case {
            op: "max_pool3d",
            label: format!("{shape:?}"),
            inputs: vec![inp(g.distinct(numel(&shape)), &shape, true)],
            engine: Box::new(|g, v| g.max_pool3d(v[0]).unwrap()),
            reference: Box::new(move |p| max_pool_ref(&p[0], planes, dims, true)),
        });
    }
    for shape in [[1usize, 2, 4, 4], [2, 3, 6, 2], [1, 1, 5, 7]] {
        let planes = shape[0] * shape[1];
        let dims = [1, shape[2], shape[3]];
        cases.push(Case {
            op: "max_pool2d",
            label: format!("{shape:?}"),
            inputs: vec![inp(g.distinct(numel(&shape)), &shape, true)],
            engine: Box::new(|g, v| g.max_pool2d(v[0]).unwrap()),
            reference: Box::new(move |p| max_pool_ref(&p[0], planes, dims, false)),
        });
    }
    for shape in [vec![2, 3, 4, 4], vec![1, 2, 3, 2, 2], vec![3, 2, 5]] {
        let spatial = numel(&shape[2..]);
        cases.push(Case {
            op: "adaptive_avg_pool",
            label: format!("{shape:?}"),
            inputs: vec![inp(g_uniform(g, numel(&shape)), &shape, true)],
            engine: Box::new(|g, v| g.adaptive_avg_pool(v[0]).unwrap()),
            reference: Box::new(move |p| p[0].chunks(spatial).map(|c| c.iter().sum::<f64>() / spatial as f64).collect()),
        });
    }
    for shape in [[1usize, 1, 2, 2, 2], [1, 2, 2, 3, 1], [2, 1, 1, 2, 3]] {
        let [n, c, d, h, w] = shape;
        cases.push(Case {
            op: "upsample3d",
            label: format!("{shape:?}"),
            inputs: vec![inp(g_uniform(g, numel(&shape)), &shape, true)],
            engine: Box::new(|g, v| g.upsample3d(v[0]).unwrap()),
            reference: Box::new(move |p| {
                let mut out = Vec::new();
                for pl in 0..n * c {
                    for z in 0..2 * d {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                out.push(p[0][pl * d * h * w + ((z / 2) * h + y / 2) * w + x / 2]);
                            }
                        }
                    }
                }
                out
            }),
        });
    }
    cases
}

fn structural_cases(g: &mut Gen) -> Vec<Case> {
    let mut cases = Vec::new();
    for (xs, inf, outf, bias) in [(vec![3, 4], 4, 2, true), (vec![2, 3, 5], 5, 3, true), (vec![1, 6], 6, 1, false)] {
        let mut inputs = vec![inp(g_uniform(g, numel(&xs)), &xs, true), inp(g_uniform(g, inf * outf), &[outf, inf], true)];
        if bias {
            inputs.push(inp(g_uniform(g, outf), &[outf], true));
        }
        cases.push(Case {
            op: "linear",
            label: format!("{xs:?} -> {outf}"),
            inputs,
            engine: Box::new(move |g, v| g.linear(v[0], v[1], bias.then(|| v[2])).unwrap()),
            reference: Box::new(move |p| linear_ref(&p[0], &p[1], bias.then(|| p[2].as_slice()), inf, outf)),
        });
    }
    for (a, b, axis) in [(vec![2, 3], vec![2, 2], 1), (vec![1, 2, 2, 2], vec![1, 3, 2, 2], 1), (vec![2, 3], vec![1, 3], 0)] {
        let (a2, b2) = (a.clone(), b.clone());
        cases.push(Case {
            op: "concat",
            label: format!("{a:?} ++ {b:?} axis={axis}"),
            inputs: vec![inp(g_uniform(g, numel(&a)), &a, true), inp(g_uniform(g, numel(&b)), &b, true)],
            engine: Box::new(move |g, v| g.concat(&[v[0], v[1]], axis).unwrap()),
            reference: Box::new(move |p| {
                let outer: usize = a2[..axis].iter().product();
                let ca = numel(&a2[axis..]);
                let cb = numel(&b2[axis..]);
                (0..outer).flat_map(|o| p[0][o * ca..(o + 1) * ca].iter().chain(&p[1][o * cb..(o + 1) * cb]).copied().collect::<Vec<_>>()).collect()
            }),
        });
    }
    for (shape, axes) in [(vec![2, 3], vec![1, 0]), (vec![2, 3, 4], vec![2, 0, 1]), (vec![1, 2, 3, 2], vec![0, 3, 1, 2])] {
        let (sh, ax) = (shape.clone(), axes.clone());
        cases.push(Case {
            op: "permute",
            label: format!("{shape:?} {axes:?}"),
            inputs: vec![inp(g_uniform(g, numel(&shape)), &shape, true)],
            engine: Box::new(move |g, v| g.permute(v[0], &axes).unwrap()),
            reference: Box::new(move |p| {
                let out_shape: Vec<usize> = ax.iter().map(|&a| sh[a]).collect();
                let mut strides = vec![1usize; sh.len()];
                for i in (0..sh.len() - 1).rev() {
                    strides[i] = strides[i + 1] * sh[i + 1];
                }
                let mut out = Vec::new();
                let mut idx = vec![0usize; sh.len()];
                for _ in 0..p[0].len() {
                    out.push(p[0][idx.iter().zip(&ax).map(|(i, &a)| i * strides[a]).sum::<usize>()]);
                    for d in (0..idx.len()).rev() {
                        idx[d] += 1;
                        if idx[d] < out_shape[d] {
                            break;
                        }
                        idx[d] = 0;
                    }
                }
                out
            }),
        });
    }
    for shape in [vec![4], vec![2, 3], vec![2, 2, 2]] {
        cases.push(Case {
            op: "add",
            label: format!("{shape:?}"),
            inputs: vec![inp(g_uniform(g, numel(&shape)), &shape, true), inp(g_uniform(g, numel(&shape)), &shape, true)],
            engine: Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
            reference: Box::new(|p| p[0].iter().zip(&p[1]).map(|(a, b)| a + b).collect()),
        });
        let n = numel(&shape);
        cases.push(Case {
            op: "reshape",
            label: format!("{shape:?} -> [{n}]"),
            inputs: vec![inp(g_uniform(g, n), &shape, true)],
            engine: Box::new(move |g, v| g.reshape(v[0], &[n]).unwrap()),
            reference: Box::new(|p| p[0].clone()),
        });
        cases.push(Case {
            op: "sum",
            label: format!("{shape:?}"),
            inputs: vec![inp(g_uniform(g, n), &shape, true)],
            engine: Box::new(|g, v| g.sum(v[0])),
            reference: Box::new(|p| vec![p[0].iter().sum()]),
        });
    }
    cases
}

fn loss_cases(g: &mut Gen) -> Vec<Case> {
    let mut cases = Vec::new();
    for (shape, masked) in [(vec![5], false), (vec![2, 3, 4], true), (vec![1, 1, 3, 3, 3], true)] {
        let n = numel(&shape);
        let target = g_uniform(g, n);
        let offset = g.away_from_zero(n, 0.01);
        let pred: Vec<f32> = target.iter().zip(&offset).map(|(t, o)| t + o).collect();
        let weights: Option<Vec<f32>> = masked.then(|| (0..n).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect());
        let (w1, w2) = (weights.clone(), weights.clone());
        let wsum = move |w: &Option<Vec<f32>>, terms: Vec<f64>| -> f64 {
            match w {
                Some(w) => terms.iter().zip(w).map(|(t, &w)| t * w as f64).sum::<f64>() / w.iter().map(|&w| w as f64).sum::<f64>(),
                None => terms.iter().sum::<f64>() / terms.len() as f64,
            }
        };
        cases.push(Case {
            op: "l1_loss",
            label: format!("{shape:?} masked={masked}"),
            inputs: vec![inp(pred, &shape, true), inp(target.clone(), &shape, true)],
            engine: Box::new(move |g, v| g.l1_loss(v[0], v[1], w1.as_deref()).unwrap()),
            reference: Box::new(move |p| vec![wsum(&weights, p[0].iter().zip(&p[1]).map(|(a, b)| (a - b).abs()).collect())]),
        });
        let w3 = w2.clone();
        cases.push(Case {
            op: "mse_loss",
            label: format!("{shape:?} masked={masked}"),
            inputs: vec![inp(g_uniform(g, n), &shape, true), inp(target, &shape, true)],
            engine: Box::new(move |g, v| g.mse_loss(v[0], v[1], w2.as_deref()).unwrap()),
            reference: Box::new(move |p| vec![wsum(&w3, p[0].iter().zip(&p[1]).map(|(a, b)| (a - b).powi(2)).collect())]),
        });
    }
    for shape in [vec![4], vec![3, 1], vec![2, 5]] {
        let n = numel(&shape);
        let targets: Vec<f32> = (0..n).map(|i| [0.0, 1.0, 0.25][i % 3]).collect();
        cases.push(Case {
            op: "bce_with_logits_loss",
            label: format!("{shape:?}"),
            inputs: vec![inp(g.uniform(n, -4.0, 4.0), &shape, true), inp(targets, &shape, false)],
            engine: Box::new(|g, v| g.bce_with_logits_loss(v[0], v[1]).unwrap()),
            reference: Box::new(move |p| {
                let l: f64 = p[0].iter().zip(&p[1]).map(|(&x, &t)| -(t * sigmoid(x).ln() + (1.0 - t) * (1.0 - sigmoid(x)).ln())).sum();
                vec![l / n as f64]
            }),
        });
    }
    for (n, k) in [(1usize, 3usize), (4, 2), (3, 5)] {
        let targets: Vec<usize> = (0..n).map(|i| (i * 7 + 1) % k).collect();
        let t2 = targets.clone();
        cases.push(Case {
            op: "cross_entropy_loss",
            label: format!("[{n},{k}]"),
            inputs: vec![inp(g.uniform(n * k, -3.0, 3.0), &[n, k], true)],
            engine: Box::new(move |g, v| g.cross_entropy_loss(v[0], &targets).unwrap()),
            reference: Box::new(move |p| {
                let l: f64 = (0..n)
                    .map(|r| {
                        let row = &p[0][r * k..(r + 1) * k];
                        let z: f64 = row.iter().map(|v| v.exp()).sum();
                        -(row[t2[r]].exp() / z).ln()
                    })
                    .sum();
                vec![l / n as f64]
            }),
        });
    }
    for (shape, window, masked) in [([1usize, 1, 5, 5, 5], 3usize, false), ([1, 2, 4, 5, 6], 3, true), ([1, 1, 8, 8, 8], 7, false)] {
        let n = numel(&shape);
        let dims = [shape[2], shape[3], shape[4]];
        let vol = numel(&dims);
        let mask: Option<Vec<f32>> = masked.then(|| (0..n).map(|i| if (i / 2) % 3 == 0 { 0.0 } else { 1.0 }).collect());
        let mask64: Vec<f64> = mask.as_ref().map_or(vec![1.0; n], |m| m.iter().map(|&v| v as f64).collect());
        let (c1, c2) = (1e-4, 9e-4);
        let m2 = mask.clone();
        cases.push(Case {
            op: "ssim_loss",
            label: format!("{shape:?} window={window} masked={masked}"),
            inputs: vec![inp(g.uniform(n, 0.0, 1.0), &shape, true), inp(g.uniform(n, 0.0, 1.0), &shape, false)],
            engine: Box::new(move |g, v| g.ssim_loss(v[0], v[1], m2.as_deref(), window, c1, c2).unwrap()),
            reference: Box::new(move |p| {
                let mut sum = 0.0;
                let mut count = 0usize;
                for b in 0..n / vol {
                    let r = b * vol..(b + 1) * vol;
                    let centres = centre_count(dims, window, &mask64[r.clone()]);
                    if let Some(s) = ssim_ref(&p[0][r.clone()], &p[1][r.clone()], dims, window, c1, c2, &mask64[r]) {
                        sum += s * centres as f64;
                        count += centres;
                    }
                }
                vec![1.0 - sum / count as f64]
            }),
        });
    }
    cases
}

fn centre_count(dims: [usize; 3], window: usize, mask: &[f64]) -> usize {
    let r = window / 2;
    let [d, h, w] = dims;
    let mut c = 0;
    for z in r..d - r {
        for y in r..h - r {
            for x in r..w - r {
                if mask[(z * h + y) * w + x] > 0.0 {
                    c += 1;
                }
            }
        }
    }
    c
}

/// Every primitive, at three or more shapes.
pub fn suite() -> Vec<Case> {
    let mut g = Gen::new(2024);
    let mut all = Vec::new();
    all.extend(conv3d_cases(&mut g));
    all.extend(conv2d_cases(&mut g));
    all.extend(batch_norm_cases(&mut g));
    all.extend(layer_norm_cases(&mut g));
    all.extend(attention_cases(&mut g));
    all.extend(unary_cases(&mut g));
    all.extend(softmax_cases(&mut g));
    all.extend(pool_cases(&mut g));
    all.extend(structural_cases(&mut g));
    all.extend(loss_cases(&mut g));
    all
}

/// Runs the suite; dropout cases need the graph seed their reference uses.
pub fn run_suite() -> Vec<Outcome> {
    suite().iter().map(|c| run(c, DROPOUT_SEED)).collect()
}
