use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::{sgemm, Layout};
use super::{mix_seed, BackwardOp, Graph, Mode, Var};
use crate::error::{config_err, shape_err, Result};

struct Unary {
    name: &'static str,
    input: Var,
    /// d out / d in, evaluated at forward time.
    deriv: Vec<f32>,
}

impl BackwardOp for Unary {
    fn name(&self) -> &'static str {
        self.name
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }
    fn backward(&self, _g: &Graph, _out: Var, grad_out: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![Some(grad_out.iter().zip(&self.deriv).map(|(g, d)| g * d).collect())]
    }
}

struct AddOp(Var, Var);

impl BackwardOp for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.0, self.1]
    }
    fn backward(&self, _g: &Graph, _out: Var, grad_out: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![Some(grad_out.to_vec()), Some(grad_out.to_vec())]
    }
}

struct SumOp {
    input: Var,
    weights: Option<Vec<f32>>,
}

impl BackwardOp for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }
    fn backward(&self, g: &Graph, _out: Var, grad_out: &[f32]) -> Vec<Option<Vec<f32>>> {
        let go = grad_out[0];
        let n = g.value(self.input).len();
        let grad = match &self.weights {
            Some(w) => w.iter().map(|w| w * go).collect(),
            None => vec![go; n],
        };
        vec![Some(grad)]
    }
}

struct SoftmaxOp {
    input: Var,
    outer: usize,
    axis_len: usize,
    inner: usize,
}

impl BackwardOp for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }
    fn backward(&self, g: &Graph, out: Var, grad_out: &[f32]) -> Vec<Option<Vec<f32>>> {
        let y = g.value(out);
        let mut dx = vec![0.0f32; y.len()];
        for o in 0..self.outer {
            for i in 0..self.inner {
                let base = o * self.axis_len * self.inner + i;
                let mut dot = 0.0f64;
                for a in 0..self.axis_len {
                    let k = base + a * self.inner;
                    dot += (y[k] * grad_out[k]) as f64;
                }
                for a in 0..self.axis_len {
                    let k = base + a * self.inner;
                    dx[k] = y[k] * (grad_out[k] - dot as f32);
                }
            }
        }
        vec![Some(dx)]
    }
}

struct ConcatOp {
    inputs: Vec<Var>,
    outer: usize,
    /// axis extent times inner size, per input
    chunks: Vec<usize>,
}

impl BackwardOp for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn inputs(&self) -> Vec<Var> {
        self.inputs.clone()
    }
    fn backward(&self, _g: &Graph, _out: Var, grad_out: &[f32]) -> Vec<Option<Vec<f32>>> {
        let total: usize = self.chunks.iter().sum();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(self.inputs.len());
        for &chunk in &self.chunks {
            let mut gi = Vec::with_capacity(self.outer * chunk);
            for o in 0..self.outer {
                let start = o * total + offset;
                gi.extend_from_slice(&grad_out[start..start + chunk]);
            }
            grads.push(Some(gi));
            offset += chunk;
        }
        grads
    }
}

struct ReshapeOp(Var);

impl BackwardOp for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.0]
    }
    fn backward(&self, _g: &Graph, _out: Var, grad_out: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![Some(grad_out.to_vec())]
    }
}

struct PermuteOp {
    input: Var,
    /// for each output flat index, the source flat index
    gather: Vec<usize>,
}

impl BackwardOp for PermuteOp {
    fn name(&self) -> &'static str {
        "permute"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }
    fn backward(&self, _g: &Graph, _out: Var, grad_out: &[f32]) -> Vec<Option<Vec<f32>>> {
        let mut dx = vec![0.0f32; grad_out.len()];
        for (o, &src) in self.gather.iter().enumerate() {
            dx[src] = grad_out[o];
        }
        vec![Some(dx)]
    }
}

struct LinearOp {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    rows: usize,
    in_f: usize,
    out_f: usize,
}

impl BackwardOp for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.input, self.weight];
        v.extend(self.bias);
        v
    }
    fn backward(&self, g: &Graph, _out: Var, grad_out: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (m, k, n) = (self.rows, self.in_f, self.out_f);
        let x = g.value(self.input);
        let w = g.value(self.weight);
        let dx = g.requires_grad(self.input).then(|| {
            let mut dx = vec![0.0f32; m * k];
            // dX(m×k) = dY(m×n) · W(n×k)
            sgemm(m, n, k, 1.0, grad_out, Layout::row_major(n), w, Layout::row_major(k), 0.0, &mut dx, Layout::row_major(k));
            dx
        });
        let dw = g.requires_grad(self.weight).then(|| {
            let mut dw = vec![0.0f32; n * k];
            // dW(n×k) = dYᵀ(n×m) · X(m×k)
            sgemm(n, m, k, 1.0, grad_out, Layout::transposed(n), x, Layout::row_major(k), 0.0, &mut dw, Layout::row_major(k));
            dw
        });
        let mut grads = vec![dx, dw];
        if self.bias.is_some() {
            let mut db = vec![0.0f64; n];
            for r in 0..m {
                for j in 0..n {
                    db[j] += grad_out[r * n + j] as f64;
                }
            }
            grads.push(Some(db.into_iter().map(|v| v as f32).collect()));
        }
        grads
    }
}

struct DropoutOp {
    input: Var,
    mask: Vec<f32>,
}

impl BackwardOp for DropoutOp {
    fn name(&self) -> &'static str {
        "dropout"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }
    fn backward(&self, _g: &Graph, _out: Var, grad_out: &[f32]) -> Vec<Option<Vec<f32>>> {
        vec![Some(grad_out.iter().zip(&self.mask).map(|(g, m)| g * m).collect())]
    }
}

/// Scaled keep-mask used by dropout: each entry is `0` with probability `p`
/// and `1/(1-p)` otherwise, drawn from the stream for `(seed, node, step)`.
pub fn dropout_mask(seed: u64, node: usize, step: u64, len: usize, p: f32) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, node as u64, step]));
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep })
        .collect()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn relu(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let values: Vec<f32> = xs.iter().map(|&v| v.max(0.0)).collect();
        let deriv = xs.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(values, shape, Box::new(Unary { name: "relu", input: x, deriv }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let values: Vec<f32> = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let deriv = values.iter().map(|&s| s * (1.0 - s)).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(values, shape, Box::new(Unary { name: "sigmoid", input: x, deriv }))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let values = self.value(x).iter().map(|&v| v * factor).collect();
        let deriv = vec![factor; self.value(x).len()];
        let shape = self.shape(x).to_vec();
        self.push_op(values, shape, Box::new(Unary { name: "scale", input: x, deriv }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("add: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let values = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(values, shape, Box::new(AddOp(a, b))))
    }

    /// Sum of all elements, as a one-element node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        self.push_op(vec![s as f32], vec![1], Box::new(SumOp { input: x, weights: None }))
    }

    /// `sum(w * x)` for a constant weight buffer.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f32>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(shape_err!(
                "weighted_sum: {} weights for {} values",
                weights.len(),
                self.value(x).len()
            ));
        }
        let s: f64 = self.value(x).iter().zip(&weights).map(|(&v, &w)| v as f64 * w as f64).sum();
        Ok(self.push_op(vec![s as f32], vec![1], Box::new(SumOp { input: x, weights: Some(weights) })))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("softmax: axis {axis} out of range for {shape:?}"));
        }
        let (outer, axis_len, inner) = split_axis(&shape, axis);
        let xs = self.value(x);
        let mut out = vec![0.0f32; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let max = (0..axis_len).map(|a| xs[base + a * inner]).fold(f32::NEG_INFINITY, f32::max);
                let mut denom = 0.0f64;
                for a in 0..axis_len {
                    let e = ((xs[base + a * inner] - max) as f64).exp();
                    out[base + a * inner] = e as f32;
                    denom += e;
                }
                for a in 0..axis_len {
                    out[base + a * inner] = (out[base + a * inner] as f64 / denom) as f32;
                }
            }
        }
        Ok(self.push_op(out, shape, Box::new(SoftmaxOp { input: x, outer, axis_len, inner })))
    }

    /// Inverted dropout. Identity in eval mode.
    pub fn dropout(&mut self, x: Var, p: f32, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(config_err!("dropout probability {p} outside [0, 1)"));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let node = self.len();
        let mask = dropout_mask(self.seed, node, self.step, self.value(x).len(), p);
        let values = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(values, shape, Box::new(DropoutOp { input: x, mask })))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| shape_err!("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat: axis {axis} out of range for {first:?}"));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!("concat: {s:?} incompatible with {first:?} on axis {axis}"));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let chunks: Vec<usize> = xs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let mut values = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for (&v, &chunk) in xs.iter().zip(&chunks) {
                values.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.push_op(values, out_shape, Box::new(ConcatOp { inputs: xs.to_vec(), outer, chunks })))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.contains(&0) {
            return Err(shape_err!("reshape: {:?} -> {shape:?}", self.shape(x)));
        }
        let values = self.value(x).to_vec();
        Ok(self.push_op(values, shape.to_vec(), Box::new(ReshapeOp(x))))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err!("permute: {axes:?} is not a permutation of rank {rank}"));
        }
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.value(x).len();
        let mut gather = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            gather.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let xs = self.value(x);
        let values = gather.iter().map(|&s| xs[s]).collect();
        Ok(self.push_op(values, out_shape, Box::new(PermuteOp { input: x, gather })))
    }

    /// `y = x·Wᵀ + b` over the last axis; `weight` is `[out, in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.expect_shape(weight, 2, "linear weight")?.to_vec();
        let in_f = *xs.last().unwrap();
        let out_f = ws[0];
        if ws[1] != in_f {
            return Err(shape_err!("linear: input features {in_f} but weight is {ws:?}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [out_f] {
                return Err(shape_err!("linear: bias {:?} for {out_f} outputs", self.shape(b)));
            }
        }
        let rows = self.value(x).len() / in_f;
        let mut out = vec![0.0f32; rows * out_f];
        if let Some(b) = bias {
            let bv = self.value(b);
            for r in 0..rows {
                out[r * out_f..(r + 1) * out_f].copy_from_slice(bv);
            }
        }
        sgemm(
            rows,
            in_f,
            out_f,
            1.0,
            self.value(x),
            Layout::row_major(in_f),
            self.value(weight),
            Layout::transposed(in_f),
            1.0,
            &mut out,
            Layout::row_major(out_f),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_f;
        Ok(self.push_op(out, shape, Box::new(LinearOp { input: x, weight, bias, rows, in_f, out_f })))
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
