use super::{BackwardOp, Graph, Var};
use crate::error::{shape_err, Result};

/// Gradient routed to a fixed source index per output element.
struct ScatterOp {
    name: &'static str,
    input: Var,
    source: Vec<usize>,
}

impl BackwardOp for ScatterOp {
    fn name(&self) -> &'static str {
        self.name
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }
    fn backward(&self, g: &Graph, _out: Var, grad_out: &[f32]) -> Vec<Option<Vec<f32>>> {
        let mut dx = vec![0.0f32; g.value(self.input).len()];
        for (o, &s) in self.source.iter().enumerate() {
            dx[s] += grad_out[o];
        }
        vec![Some(dx)]
    }
}

struct AvgPoolOp {
    input: Var,
    spatial: usize,
}

impl BackwardOp for AvgPoolOp {
    fn name(&self) -> &'static str {
        "adaptive_avg_pool"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }
    fn backward(&self, _g: &Graph, _out: Var, grad_out: &[f32]) -> Vec<Option<Vec<f32>>> {
        let inv = 1.0 / self.spatial as f32;
        let dx = grad_out
            .iter()
            .flat_map(|&go| std::iter::repeat(go * inv).take(self.spatial))
            .collect();
        vec![Some(dx)]
    }
}

impl Graph {
    /// Max pooling with window 2 and stride 2 over the trailing three axes of
    /// `[N, C, D, H, W]`. Odd trailing rows are dropped.
    pub fn max_pool3d(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_shape(x, 5, "max_pool3d")?.to_vec();
        self.max_pool(x, s[0] * s[1], [s[2], s[3], s[4]], true)
    }

    /// Max pooling with window 2 and stride 2 over `[N, C, H, W]`.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_shape(x, 4, "max_pool2d")?.to_vec();
        self.max_pool(x, s[0] * s[1], [1, s[2], s[3]], false)
    }

    fn max_pool(&mut self, x: Var, planes: usize, dims: [usize; 3], pool_depth: bool) -> Result<Var> {
        let [d, h, w] = dims;
        let (od, oh, ow) = (if pool_depth { d / 2 } else { d }, h / 2, w / 2);
        if od == 0 || oh == 0 || ow == 0 {
            return Err(shape_err!("max_pool: spatial extent {dims:?} too small for window 2"));
        }
        let kd = if pool_depth { 2 } else { 1 };
        let xs = self.value(x);
        let in_vol = d * h * w;
        let out_vol = od * oh * ow;
        let mut out = Vec::with_capacity(planes * out_vol);
        let mut source = Vec::with_capacity(planes * out_vol);
        for p in 0..planes {
            let base = p * in_vol;
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut best = usize::MAX;
                        let mut best_v = f32::NEG_INFINITY;
                        for dz in 0..kd {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = base + ((z * kd + dz) * h + y * 2 + dy) * w + xo * 2 + dx;
                                    // first maximum wins ties
                                    if best == usize::MAX || xs[i] > best_v {
                                        best = i;
                                        best_v = xs[i];
                                    }
                                }
                            }
                        }
                        out.push(best_v);
                        source.push(best);
                    }
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        let r = shape.len();
        shape[r - 1] = ow;
        shape[r - 2] = oh;
        if pool_depth {
            shape[r - 3] = od;
        }
        Ok(self.push_op(out, shape, Box::new(ScatterOp { name: "max_pool", input: x, source })))
    }

    /// Global average over all spatial axes: `[N, C, ...] -> [N, C]`.
    pub fn adaptive_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(shape_err!("adaptive_avg_pool: need [N, C, spatial...], got {s:?}"));
        }
        let spatial: usize = s[2..].iter().product();
        let out = self
            .value(x)
            .chunks(spatial)
            .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / spatial as f64) as f32)
            .collect();
        Ok(self.push_op(out, vec![s[0], s[1]], Box::new(AvgPoolOp { input: x, spatial })))
    }

    /// Nearest-neighbour upsampling by 2 on the trailing three axes.
    pub fn upsample3d(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_shape(x, 5, "upsample3d")?.to_vec();
        let dims = [s[2], s[3], s[4]];
        let planes = s[0] * s[1];
        let [d, h, w] = dims;
        let xs = self.value(x);
        let mut out = Vec::with_capacity(planes * 8 * d * h * w);
        for p in 0..planes {
            for z in 0..2 * d {
                for y in 0..2 * h {
                    let row = &xs[p * d * h * w + ((z / 2) * h + y / 2) * w..][..w];
                    for &v in row {
                        out.push(v);
                        out.push(v);
                    }
                }
            }
        }
        let shape = vec![s[0], s[1], 2 * d, 2 * h, 2 * w];
        Ok(self.push_op(out, shape, Box::new(UpsampleOp { input: x, planes, dims })))
    }
}

struct UpsampleOp {
    input: Var,
    planes: usize,
    dims: [usize; 3],
}

impl BackwardOp for UpsampleOp {
    fn name(&self) -> &'static str {
        "upsample3d"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }
    fn backward(&self, _g: &Graph, _out: Var, grad_out: &[f32]) -> Vec<Option<Vec<f32>>> {
        let [d, h, w] = self.dims;
        let mut dx = vec![0.0f32; self.planes * d * h * w];
        let mut o = 0;
        for p in 0..self.planes {
            for z in 0..2 * d {
                for y in 0..2 * h {
                    let row = &mut dx[p * d * h * w + ((z / 2) * h + y / 2) * w..][..w];
                    for v in row.iter_mut() {
                        *v += grad_out[o] + grad_out[o + 1];
                        o += 2;
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}
