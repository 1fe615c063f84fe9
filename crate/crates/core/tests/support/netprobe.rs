//! Finite-difference probes of whole networks.
//!
//! The engine runs in f32, and its ReLU and max-pool kinks sit closer
//! together than any step f32 roundoff allows. So the numeric side runs on
//! a composed f64 reference forward built from the primitive references.
//! That makes steps near 1e-6 usable, where crossings are rare. It also
//! gives a whole-network forward check.
//!
//! Each tensor is perturbed along its own normalised engine gradient, so the
//! exact directional derivative is the gradient norm. The step is halved
//! until successive central differences agree and the forward and backward
//! one-sided slopes agree, which rejects a step straddling a kink.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxsynth::classifier::{self, ClfConfig};
use voxsynth::nn::{ParamStore, BN_EPS, LN_EPS};
use voxsynth::synthnet::{self, SynthConfig};
use voxsynth::tensor::{Graph, Mode};

use super::gradcheck::{attention_ref, batch_norm_ref, layer_norm_ref, linear_ref, max_pool_ref, rel_err};

pub const NETWORK_TOL: f64 = 1e-3;
/// Engine (f32) against reference (f64) outputs, relative to the largest.
pub const FORWARD_TOL: f64 = 1e-4;
const FIRST_STEP: f64 = 1e-4;
const LAST_STEP: f64 = 1e-8;
const AGREE: f64 = 1e-5;
/// One-sided slopes differ by O(h) curvature even without a kink.
const ONE_SIDED_AGREE: f64 = 1e-3;
/// Tensors whose gradient norm is below this are invariant directions
/// (biases feeding batch norm) and are not probed.
const ZERO_GRAD: f64 = 1e-6;

pub struct Probe {
    pub name: String,
    /// Gradient norm, the analytic directional derivative.
    pub analytic: f64,
    pub numeric: f64,
    pub step: f64,
    /// False when no step down to the smallest resolved.
    pub resolved: bool,
}

impl Probe {
    pub fn passed(&self) -> bool {
        self.resolved && self.rel_err() < NETWORK_TOL
    }

    pub fn rel_err(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.numeric.abs().max(1e-6)
    }
}

pub struct NetworkCheck {
    pub forward_err: f64,
    pub probes: Vec<Probe>,
}

impl NetworkCheck {
    pub fn passed(&self) -> bool {
        self.forward_err < FORWARD_TOL && !self.probes.is_empty() && self.probes.iter().all(Probe::passed)
    }
}

/// Central difference of `f` at zero with the step refined as described in
/// the module docs; `Err` carries the last estimate when none agreed.
pub fn refined_difference(mut f: impl FnMut(f64) -> f64) -> Result<(f64, f64), (f64, f64)> {
    let f0 = f(0.0);
    let mut h = FIRST_STEP;
    let mut prev = (f(h) - f(-h)) / (2.0 * h);
    while h > LAST_STEP {
        h /= 2.0;
        let (up, down) = (f(h), f(-h));
        let d = (up - down) / (2.0 * h);
        let scale = d.abs().max(1e-6);
        if (d - prev).abs() <= AGREE * scale && ((up - f0) / h - (f0 - down) / h).abs() <= ONE_SIDED_AGREE * scale {
            return Ok((d, h));
        }
        prev = d;
    }
    Err((prev, h))
}

type Params = BTreeMap<String, Vec<f64>>;

fn to_f64(store: &ParamStore) -> Params {
    store.names().map(|n| (n.to_string(), store.get(n).unwrap().value.iter().map(|&v| v as f64).collect())).collect()
}

/// Probes every tensor with a non-vanishing gradient.
fn probe_all(params: &Params, grads: &BTreeMap<String, Vec<f32>>, loss: impl Fn(&Params) -> f64) -> Vec<Probe> {
    let mut out = Vec::new();
    for (name, gv) in grads {
        let norm = gv.iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
        if norm < ZERO_GRAD {
            continue;
        }
        let mut p = params.clone();
        let r = refined_difference(|t| {
            let moved: Vec<f64> = params[name].iter().zip(gv).map(|(&o, &g)| o + t * g as f64 / norm).collect();
            p.insert(name.clone(), moved);
            loss(&p)
        });
        let resolved = r.is_ok();
        let (numeric, step) = r.unwrap_or_else(|e| e);
        out.push(Probe { name: name.clone(), analytic: norm, numeric, step, resolved });
    }
    out
}

fn uniform(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

// ---------- composed reference layers ----------

fn relu(x: Vec<f64>) -> Vec<f64> {
    x.into_iter().map(|v| v.max(0.0)).collect()
}

/// 3×3(×3) same-padded conv, then batch norm on batch statistics, then ReLU.
/// `dims` is `[d, h, w]` with `d = 1` for 2D.
#[allow(clippy::too_many_arguments)]
fn conv_bn_relu(p: &Params, name: &str, bn: &str, x: &[f64], n: usize, cin: usize, cout: usize, dims: [usize; 3]) -> Vec<f64> {
    let y = conv(p, name, x, n, cin, cout, dims, 3);
    let s = dims.iter().product();
    relu(batch_norm_ref(&y, n, cout, s, &p[&format!("{bn}.gamma")], &p[&format!("{bn}.beta")], None, BN_EPS as f64))
}

/// Same-padded conv, accumulating shifted input rows so the inner loop is
/// contiguous. Agrees with `conv_ref`; see `fast_conv_matches_naive`.
#[allow(clippy::too_many_arguments)]
fn conv(p: &Params, name: &str, x: &[f64], n: usize, cin: usize, cout: usize, [d, h, w]: [usize; 3], k: usize) -> Vec<f64> {
    let (wt, bias) = (&p[&format!("{name}.weight")], &p[&format!("{name}.bias")]);
    let kd = if d == 1 { 1 } else { k };
    let (r, rd) = ((k / 2) as isize, (kd / 2) as isize);
    let s = d * h * w;
    let mut out = vec![0.0; n * cout * s];
    for b in 0..n {
        for f in 0..cout {
            let o = &mut out[(b * cout + f) * s..][..s];
            o.fill(bias[f]);
            for c in 0..cin {
                let xin = &x[(b * cin + c) * s..][..s];
                for a in 0..kd {
                    for bb in 0..k {
                        for cc in 0..k {
                            let wv = wt[(((f * cin + c) * kd + a) * k + bb) * k + cc];
                            let (dz, dy, dx) = (a as isize - rd, bb as isize - r, cc as isize - r);
                            let (x0, x1) = ((-dx).max(0) as usize, (w as isize - dx.max(0)) as usize);
                            for z in 0..d {
                                let iz = z as isize + dz;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for y in 0..h {
                                    let iy = y as isize + dy;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let orow = &mut o[(z * h + y) * w..][x0..x1];
                                    let irow = &xin[(iz as usize * h + iy as usize) * w..][(x0 as isize + dx) as usize..];
                                    for (ov, iv) in orow.iter_mut().zip(irow) {
                                        *ov += wv * iv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn upsample(x: &[f64], planes: usize, [d, h, w]: [usize; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * 8);
    for q in 0..planes {
        for z in 0..2 * d {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.push(x[q * d * h * w + ((z / 2) * h + y / 2) * w + xx / 2]);
                }
            }
        }
    }
    out
}

/// Channel concatenation of `[n, ca, s]` and `[n, cb, s]`.
fn concat(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let (ra, rb) = (a.len() / n, b.len() / n);
    (0..n).flat_map(|i| a[i * ra..(i + 1) * ra].iter().chain(&b[i * rb..(i + 1) * rb]).copied()).collect()
}

/// `[n, r, c]` to `[n, c, r]`.
fn transpose(x: &[f64], n: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for i in 0..r {
            for j in 0..c {
                out[(b * c + j) * r + i] = x[(b * r + i) * c + j];
            }
        }
    }
    out
}

/// Train-mode synthnet forward with dropout off, double conv blocks.
pub fn synthnet_ref(cfg: &SynthConfig, p: &Params, x: &[f64], n: usize) -> Vec<f64> {
    let block = |name: &str, x: &[f64], cin: usize, cout: usize, dims: [usize; 3]| {
        let h = conv_bn_relu(p, &format!("{name}.conv1"), &format!("{name}.bn1"), x, n, cin, cout, dims);
        conv_bn_relu(p, &format!("{name}.conv2"), &format!("{name}.bn2"), &h, n, cout, cout, dims)
    };
    let ps = cfg.patch_size;
    let mut dims = [ps; 3];
    let (mut h, mut c) = (x.to_vec(), 1);
    let mut skips = Vec::new();
    for i in 0..cfg.depth {
        h = block(&format!("enc{i}"), &h, c, cfg.channels(i), dims);
        c = cfg.channels(i);
        skips.push(h.clone());
        h = max_pool_ref(&h, n * c, dims, true);
        dims = dims.map(|v| v / 2);
    }
    let e = cfg.embedding();
    h = block("bottleneck", &h, c, e, dims);
    if cfg.transformer {
        let t: usize = dims.iter().product();
        let tokens = transpose(&h, n, e, t);
        let ln = |name: &str, x: &[f64]| layer_norm_ref(x, e, &p[&format!("bottleneck.{name}.gamma")], &p[&format!("bottleneck.{name}.beta")], LN_EPS as f64);
        let mut inputs = vec![ln("ln1", &tokens)];
        inputs.extend(["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"].map(|w| p[&format!("bottleneck.attn.{w}")].clone()));
        let a = attention_ref(&inputs, n, t, e, cfg.heads);
        let y: Vec<f64> = tokens.iter().zip(&a).map(|(u, v)| u + v).collect();
        h = transpose(&relu(ln("ln2", &y)), n, t, e);
    }
    c = e;
    for i in (0..cfg.depth).rev() {
        let up = upsample(&h, n * c, dims);
        dims = dims.map(|v| v * 2);
        let ci = cfg.channels(i);
        let up = conv(p, &format!("dec{i}.up"), &up, n, c, ci, dims, 3);
        h = block(&format!("dec{i}"), &concat(&up, &skips[i], n), 2 * ci, ci, dims);
        c = ci;
    }
    let heads: Vec<Vec<f64>> = cfg.tasks.names().iter().map(|t| conv(p, &format!("head.{t}"), &h, n, c, 1, dims, 1)).collect();
    heads[1..].iter().fold(heads[0].clone(), |acc, hd| concat(&acc, hd, n))
}

/// Train-mode classifier forward with dropout off.
pub fn classifier_ref(cfg: &ClfConfig, p: &Params, x: &[f64], n: usize, size: usize) -> Vec<f64> {
    let (mut h, mut c, mut s) = (x.to_vec(), cfg.in_channels, size);
    for i in 0..cfg.conv_layers {
        let co = cfg.base_channels << i;
        h = conv_bn_relu(p, &format!("conv{i}"), &format!("bn{i}"), &h, n, c, co, [1, s, s]);
        h = max_pool_ref(&h, n * co, [1, s, s], false);
        (c, s) = (co, s / 2);
    }
    h = h.chunks(s * s).map(|q| q.iter().sum::<f64>() / (s * s) as f64).collect();
    for i in 1..=3 {
        let w = &p[&format!("fc{i}.weight")];
        let outf = w.len() / c;
        h = linear_ref(&h, w, Some(&p[&format!("fc{i}.bias")]), c, outf);
        if i < 3 {
            h = relu(h);
        }
        c = outf;
    }
    h
}

fn named_grads(store: &ParamStore, grads: Vec<Option<Vec<f32>>>) -> BTreeMap<String, Vec<f32>> {
    store.names().zip(grads).filter_map(|(n, g)| Some((n.to_string(), g?))).collect()
}

/// The TransUNet at 16³, depth 2, base 4, attention on, batch 1, under the
/// L1 loss against a uniform random target.
pub fn synthnet_check() -> NetworkCheck {
    let cfg = SynthConfig { base_channels: 4, depth: 2, transformer: true, heads: 2, patch_size: 16, dropout: 0.0, ..SynthConfig::default() };
    let mut m = synthnet::build(cfg.clone(), 2).unwrap();
    let shape = [1, 1, 16, 16, 16];
    let x = uniform(4096, 1);
    let target = uniform(8192, 2);
    let mut g = Graph::with_seed(9, 0);
    let xv = g.constant(x.clone(), &shape).unwrap();
    let (y, b) = m.forward(&mut g, xv, Mode::Train).unwrap();
    let t = g.constant(target.clone(), &[1, 2, 16, 16, 16]).unwrap();
    let l = g.l1_loss(y, t, None).unwrap();
    let engine_out: Vec<f64> = g.value(y).iter().map(|&v| v as f64).collect();
    g.backward(l).unwrap();
    let grads = named_grads(&m.params, b.take_grads(&mut g));

    let params = to_f64(&m.params);
    let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let forward_err = rel_err(&engine_out, &synthnet_ref(&cfg, &params, &x64, 1));
    let loss = |p: &Params| synthnet_ref(&cfg, p, &x64, 1).iter().zip(&target).map(|(a, &b)| (a - b as f64).abs()).sum::<f64>() / 8192.0;
    NetworkCheck { forward_err, probes: probe_all(&params, &grads, loss) }
}

/// A base-4 three-class slice classifier at 32×32, batch 2, train mode,
/// under a fixed projection of the logits.
pub fn classifier_check() -> NetworkCheck {
    let cfg = ClfConfig { in_channels: 3, classes: 3, base_channels: 4, fc_dropout: 0.0, ..ClfConfig::default() };
    let mut m = classifier::build(cfg.clone(), 3).unwrap();
    let x = uniform(2 * 3 * 32 * 32, 3);
    let weights: Vec<f32> = vec![0.7, -0.4, 0.2, -0.9, 0.5, 0.3];
    let mut g = Graph::with_seed(12, 0);
    let xv = g.constant(x.clone(), &[2, 3, 32, 32]).unwrap();
    let (y, b) = m.forward(&mut g, xv, Mode::Train).unwrap();
    let engine_out: Vec<f64> = g.value(y).iter().map(|&v| v as f64).collect();
    let l = g.weighted_sum(y, weights.clone()).unwrap();
    g.backward(l).unwrap();
    let grads = named_grads(&m.params, b.take_grads(&mut g));

    let params = to_f64(&m.params);
    let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let forward_err = rel_err(&engine_out, &classifier_ref(&cfg, &params, &x64, 2, 32));
    let loss = |p: &Params| classifier_ref(&cfg, p, &x64, 2, 32).iter().zip(&weights).map(|(a, &w)| a * w as f64).sum::<f64>();
    NetworkCheck { forward_err, probes: probe_all(&params, &grads, loss) }
}

#[test]
fn fast_conv_matches_naive() {
    let (n, cin, cout) = (2, 3, 2);
    for (dims, k) in [([4, 5, 6], 3), ([1, 7, 5], 3), ([3, 4, 4], 1)] {
        let s: usize = dims.iter().product();
        let x: Vec<f64> = uniform(n * cin * s, 4).into_iter().map(f64::from).collect();
        let kd = if dims[0] == 1 { 1 } else { k };
        let mut p = Params::new();
        p.insert("c.weight".into(), uniform(cout * cin * kd * k * k, 5).into_iter().map(f64::from).collect());
        p.insert("c.bias".into(), vec![0.25, -0.5]);
        let pad = if dims[0] == 1 { [0, k / 2, k / 2] } else { [k / 2; 3] };
        let (want, _) = super::gradcheck::conv_ref(&x, [n, cin, dims[0], dims[1], dims[2]], &p["c.weight"], [cout, cin, kd, k, k], Some(&p["c.bias"]), 1, pad);
        assert!(rel_err(&conv(&p, "c", &x, n, cin, cout, dims, k), &want) < 1e-14);
    }
}
