//! 2D and 3D convolution via chunked im2col + GEMM.
//!
//! A 2D convolution is run as a 3D one with a unit depth axis, so both share
//! the same kernels. Columns are built for a slab of output planes at a time
//! to bound scratch memory on large volumes.

use super::gemm::{sgemm, Layout};
use super::{BackwardOp, Graph, Var};
use crate::error::{shape_err, Result};

/// Scratch budget for one im2col slab, in elements.
const COLS_BUDGET: usize = 1 << 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn same() -> Self {
        ConvSpec { stride: 1, padding: 1 }
    }
    pub fn valid() -> Self {
        ConvSpec { stride: 1, padding: 0 }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    c: usize,
    f: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    pad: [usize; 3],
    stride: usize,
    out: [usize; 3],
}

impl Geom {
    fn ck(&self) -> usize {
        self.c * self.kernel.iter().product::<usize>()
    }
    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }
    fn plane(&self) -> usize {
        self.out[1] * self.out[2]
    }
    fn planes_per_chunk(&self) -> usize {
        (COLS_BUDGET / (self.ck() * self.plane()).max(1)).clamp(1, self.out[0])
    }

    /// Output index range `[lo, hi)` along one axis whose input tap at kernel
    /// offset `k` lands inside the input.
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad[axis] as isize;
        let len = self.input[axis] as isize;
        // need 0 <= o*s + off <= len-1
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if len - 1 - off < 0 { 0 } else { (len - 1 - off) / s + 1 };
        let hi = hi.min(self.out[axis] as isize);
        (lo.max(0) as usize, hi.max(lo.max(0)) as usize)
    }

    fn src_index(&self, axis: usize, o: usize, k: usize) -> usize {
        o * self.stride + k - self.pad[axis]
    }
}

/// Builds columns `[C·k³, (z1-z0)·Ho·Wo]` for output planes `z0..z1`.
fn im2col(g: &Geom, input: &[f32], z0: usize, z1: usize, cols: &mut [f32]) {
    let p = (z1 - z0) * g.plane();
    let [_, hi, wi] = g.input;
    let [_, _, wo] = g.out;
    let [kd, kh, kw] = g.kernel;
    let mut row = 0;
    for c in 0..g.c {
        let chan = &input[c * g.in_vol()..(c + 1) * g.in_vol()];
        for dz in 0..kd {
            let (zlo, zhi) = g.valid_range(0, dz);
            for dy in 0..kh {
                let (ylo, yhi) = g.valid_range(1, dy);
                for dx in 0..kw {
                    let (xlo, xhi) = g.valid_range(2, dx);
                    let dst = &mut cols[row * p..(row + 1) * p];
                    dst.fill(0.0);
                    for z in z0.max(zlo)..z1.min(zhi) {
                        let iz = g.src_index(0, z, dz);
                        for y in ylo..yhi {
                            let iy = g.src_index(1, y, dy);
                            let src = &chan[(iz * hi + iy) * wi..(iz * hi + iy + 1) * wi];
                            let d = &mut dst[(z - z0) * g.plane() + y * wo..][..wo];
                            if g.stride == 1 {
                                let ix = xlo + dx - g.pad[2];
                                d[xlo..xhi].copy_from_slice(&src[ix..ix + (xhi - xlo)]);
                            } else {
                                for x in xlo..xhi {
                                    d[x] = src[g.src_index(2, x, dx)];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds columns back into the input gradient (adjoint of im2col).
fn col2im(g: &Geom, cols: &[f32], z0: usize, z1: usize, dinput: &mut [f32]) {
    let p = (z1 - z0) * g.plane();
    let [_, hi, wi] = g.input;
    let [_, _, wo] = g.out;
    let [kd, kh, kw] = g.kernel;
    let mut row = 0;
    for c in 0..g.c {
        let chan = &mut dinput[c * g.in_vol()..(c + 1) * g.in_vol()];
        for dz in 0..kd {
            let (zlo, zhi) = g.valid_range(0, dz);
            for dy in 0..kh {
                let (ylo, yhi) = g.valid_range(1, dy);
                for dx in 0..kw {
                    let (xlo, xhi) = g.valid_range(2, dx);
                    let srcrow = &cols[row * p..(row + 1) * p];
                    for z in z0.max(zlo)..z1.min(zhi) {
                        let iz = g.src_index(0, z, dz);
                        for y in ylo..yhi {
                            let iy = g.src_index(1, y, dy);
                            let d = &mut chan[(iz * hi + iy) * wi..(iz * hi + iy + 1) * wi];
                            let s = &srcrow[(z - z0) * g.plane() + y * wo..][..wo];
                            for x in xlo..xhi {
                                d[g.src_index(2, x, dx)] += s[x];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn conv_forward(g: &Geom, input: &[f32], weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let ov = g.out_vol();
    let mut out = vec![0.0f32; g.n * g.f * ov];
    let ck = g.ck();
    let chunk = g.planes_per_chunk();
    let mut cols = vec![0.0f32; ck * chunk * g.plane()];
    for n in 0..g.n {
        let x = &input[n * g.c * g.in_vol()..(n + 1) * g.c * g.in_vol()];
        let mut z0 = 0;
        while z0 < g.out[0] {
            let z1 = (z0 + chunk).min(g.out[0]);
            let p = (z1 - z0) * g.plane();
            im2col(g, x, z0, z1, &mut cols);
            let dst = &mut out[n * g.f * ov + z0 * g.plane()..];
            sgemm(g.f, ck, p, 1.0, weight, Layout::row_major(ck), &cols, Layout::row_major(p), 0.0, dst, Layout::strided(ov, 1));
            z0 = z1;
        }
        if let Some(b) = bias {
            for f in 0..g.f {
                let base = (n * g.f + f) * ov;
                out[base..base + ov].iter_mut().for_each(|v| *v += b[f]);
            }
        }
    }
    out
}

struct ConvOp {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    geom: Geom,
}

impl BackwardOp for ConvOp {
    fn name(&self) -> &'static str {
        "conv"
    }
    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.input, self.weight];
        v.extend(self.bias);
        v
    }
    fn backward(&self, graph: &Graph, _out: Var, grad_out: &[f32]) -> Vec<Option<Vec<f32>>> {
        let g = &self.geom;
        let want_x = graph.requires_grad(self.input);
        let want_w = graph.requires_grad(self.weight);
        let x = graph.value(self.input);
        let w = graph.value(self.weight);
        let ov = g.out_vol();
        let ck = g.ck();
        let chunk = g.planes_per_chunk();
        let mut cols = vec![0.0f32; ck * chunk * g.plane()];
        let mut dcols = if want_x { vec![0.0f32; ck * chunk * g.plane()] } else { Vec::new() };
        let mut dx = want_x.then(|| vec![0.0f32; x.len()]);
        let mut dw = want_w.then(|| vec![0.0f32; w.len()]);
        for n in 0..g.n {
            let xn = &x[n * g.c * g.in_vol()..(n + 1) * g.c * g.in_vol()];
            let mut z0 = 0;
            while z0 < g.out[0] {
                let z1 = (z0 + chunk).min(g.out[0]);
                let p = (z1 - z0) * g.plane();
                let dy = &grad_out[n * g.f * ov + z0 * g.plane()..];
                if let Some(dw) = dw.as_mut() {
                    im2col(g, xn, z0, z1, &mut cols);
                    sgemm(g.f, p, ck, 1.0, dy, Layout::strided(ov, 1), &cols, Layout::transposed(p), 1.0, dw, Layout::row_major(ck));
                }
                if let Some(dx) = dx.as_mut() {
                    sgemm(ck, g.f, p, 1.0, w, Layout::transposed(ck), dy, Layout::strided(ov, 1), 0.0, &mut dcols, Layout::row_major(p));
                    let dxn = &mut dx[n * g.c * g.in_vol()..(n + 1) * g.c * g.in_vol()];
                    col2im(g, &dcols, z0, z1, dxn);
                }
                z0 = z1;
            }
        }
        let mut grads = vec![dx, dw];
        if self.bias.is_some() {
            let mut db = vec![0.0f64; g.f];
            for n in 0..g.n {
                for (f, acc) in db.iter_mut().enumerate() {
                    let base = (n * g.f + f) * ov;
                    *acc += grad_out[base..base + ov].iter().map(|&v| v as f64).sum::<f64>();
                }
            }
            grads.push(Some(db.into_iter().map(|v| v as f32).collect()));
        }
        grads
    }
}

impl Graph {
    /// 3D convolution: input `[N,C,D,H,W]`, weight `[F,C,kd,kh,kw]`, bias `[F]`.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xs = self.expect_shape(input, 5, "conv3d input")?.to_vec();
        let ws = self.expect_shape(weight, 5, "conv3d weight")?.to_vec();
        let geom = self.conv_geom(&xs[..2], [xs[2], xs[3], xs[4]], &ws[..2], [ws[2], ws[3], ws[4]], [spec.padding; 3], spec.stride, bias)?;
        let out_shape = vec![geom.n, geom.f, geom.out[0], geom.out[1], geom.out[2]];
        Ok(self.conv_finish(input, weight, bias, geom, out_shape))
    }

    /// 2D convolution: input `[N,C,H,W]`, weight `[F,C,kh,kw]`, bias `[F]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xs = self.expect_shape(input, 4, "conv2d input")?.to_vec();
        let ws = self.expect_shape(weight, 4, "conv2d weight")?.to_vec();
        let geom = self.conv_geom(&xs[..2], [1, xs[2], xs[3]], &ws[..2], [1, ws[2], ws[3]], [0, spec.padding, spec.padding], spec.stride, bias)?;
        let out_shape = vec![geom.n, geom.f, geom.out[1], geom.out[2]];
        Ok(self.conv_finish(input, weight, bias, geom, out_shape))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_geom(
        &self,
        nc: &[usize],
        input: [usize; 3],
        fc: &[usize],
        kernel: [usize; 3],
        pad: [usize; 3],
        stride: usize,
        bias: Option<Var>,
    ) -> Result<Geom> {
        if nc[1] != fc[1] {
            return Err(shape_err!(
                "conv: input has {} channels but weight expects {} (weight shape [{}, {}, ...])",
                nc[1],
                fc[1],
                fc[0],
                fc[1]
            ));
        }
        if stride == 0 {
            return Err(shape_err!("conv: stride must be at least 1"));
        }
        let mut out = [0usize; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * pad[a];
            if padded < kernel[a] {
                return Err(shape_err!(
                    "conv: kernel {} exceeds padded extent {} on spatial axis {a}",
                    kernel[a],
                    padded
                ));
            }
            out[a] = (padded - kernel[a]) / stride + 1;
        }
        if let Some(b) = bias {
            if self.shape(b) != [fc[0]] {
                return Err(shape_err!("conv: bias shape {:?} for {} filters", self.shape(b), fc[0]));
            }
        }
        Ok(Geom { n: nc[0], c: nc[1], f: fc[0], input, kernel, pad, stride, out })
    }

    fn conv_finish(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: Geom, out_shape: Vec<usize>) -> Var {
        let values = conv_forward(&geom, self.value(input), self.value(weight), bias.map(|b| self.value(b)));
        self.push_op(values, out_shape, Box::new(ConvOp { input, weight, bias, geom }))
    }
}
