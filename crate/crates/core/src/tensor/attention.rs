//! Fused multi-head self-attention.

use super::gemm::{sgemm, Layout};
use super::{BackwardOp, Graph, Var};
use crate::error::{config_err, shape_err, Result};

/// Projection weights `[E, E]` and biases `[E]` of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionWeights {
    fn all(&self) -> [Var; 8] {
        [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]
    }
}

struct AttentionOp {
    input: Var,
    w: AttentionWeights,
    n: usize,
    t: usize,
    e: usize,
    heads: usize,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    /// softmax weights `[N, heads, T, T]`
    p: Vec<f32>,
    /// concatenated head outputs before the output projection
    o: Vec<f32>,
}

/// `x·Wᵀ + b` for row-major `x` of `rows × e`.
fn project(x: &[f32], w: &[f32], b: &[f32], rows: usize, e: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * e);
    for _ in 0..rows {
        out.extend_from_slice(b);
    }
    sgemm(rows, e, e, 1.0, x, Layout::row_major(e), w, Layout::transposed(e), 1.0, &mut out, Layout::row_major(e));
    out
}

/// Weight and bias gradients of a projection plus its input gradient added
/// into `dx`.
fn project_backward(dy: &[f32], x: &[f32], w: &[f32], rows: usize, e: usize, dx: Option<&mut [f32]>) -> (Vec<f32>, Vec<f32>) {
    let mut dw = vec![0.0f32; e * e];
    sgemm(e, rows, e, 1.0, dy, Layout::transposed(e), x, Layout::row_major(e), 0.0, &mut dw, Layout::row_major(e));
    let mut db = vec![0.0f64; e];
    for r in 0..rows {
        for j in 0..e {
            db[j] += dy[r * e + j] as f64;
        }
    }
    if let Some(dx) = dx {
        sgemm(rows, e, e, 1.0, dy, Layout::row_major(e), w, Layout::row_major(e), 1.0, dx, Layout::row_major(e));
    }
    (dw, db.into_iter().map(|v| v as f32).collect())
}

impl BackwardOp for AttentionOp {
    fn name(&self) -> &'static str {
        "multi_head_attention"
    }
    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.input];
        v.extend(self.w.all());
        v
    }
    fn backward(&self, g: &Graph, _out: Var, grad_out: &[f32]) -> Vec<Option<Vec<f32>>> {
        let (n, t, e, heads) = (self.n, self.t, self.e, self.heads);
        let dh = e / heads;
        let rows = n * t;
        let scale = 1.0 / (dh as f32).sqrt();
        let x = g.value(self.input);

        let mut d_o = vec![0.0f32; rows * e];
        let (dwo, dbo) = project_backward(grad_out, &self.o, g.value(self.w.wo), rows, e, Some(&mut d_o));

        let mut dq = vec![0.0f32; rows * e];
        let mut dk = vec![0.0f32; rows * e];
        let mut dv = vec![0.0f32; rows * e];
        let mut dp = vec![0.0f32; t * t];
        let head = Layout::strided(e, 1);
        for b in 0..n {
            for h in 0..heads {
                let off = b * t * e + h * dh;
                let p = &self.p[(b * heads + h) * t * t..][..t * t];
                // dP = dO_h · V_hᵀ
                sgemm(t, dh, t, 1.0, &d_o[off..], head, &self.v[off..], Layout::strided(1, e), 0.0, &mut dp, Layout::row_major(t));
                // dV_h = Pᵀ · dO_h
                sgemm(t, t, dh, 1.0, p, Layout::transposed(t), &d_o[off..], head, 0.0, &mut dv[off..], head);
                // dS = P ⊙ (dP - rowsum(dP ⊙ P)), folded with the score scale
                for i in 0..t {
                    let row = i * t;
                    let dot: f64 = (0..t).map(|j| (dp[row + j] * p[row + j]) as f64).sum();
                    for j in 0..t {
                        dp[row + j] = p[row + j] * (dp[row + j] - dot as f32) * scale;
                    }
                }
                sgemm(t, t, dh, 1.0, &dp, Layout::row_major(t), &self.k[off..], head, 0.0, &mut dq[off..], head);
                sgemm(t, t, dh, 1.0, &dp, Layout::transposed(t), &self.q[off..], head, 0.0, &mut dk[off..], head);
            }
        }

        let want_x = g.requires_grad(self.input);
        let mut dx = want_x.then(|| vec![0.0f32; rows * e]);
        let (dwq, dbq) = project_backward(&dq, x, g.value(self.w.wq), rows, e, dx.as_deref_mut());
        let (dwk, dbk) = project_backward(&dk, x, g.value(self.w.wk), rows, e, dx.as_deref_mut());
        let (dwv, dbv) = project_backward(&dv, x, g.value(self.w.wv), rows, e, dx.as_deref_mut());
        vec![
            dx,
            Some(dwq),
            Some(dbq),
            Some(dwk),
            Some(dbk),
            Some(dwv),
            Some(dbv),
            Some(dwo),
            Some(dbo),
        ]
    }
}

impl Graph {
    /// Scaled dot-product self-attention over `[N, T, E]` with `heads` heads
    /// of width `E/heads`, scores scaled by `1/sqrt(E/heads)`, heads
    /// concatenated and passed through the output projection.
    pub fn multi_head_attention(&mut self, x: Var, heads: usize, w: AttentionWeights) -> Result<Var> {
        let s = self.expect_shape(x, 3, "attention input")?.to_vec();
        let (n, t, e) = (s[0], s[1], s[2]);
        if heads == 0 || e % heads != 0 {
            return Err(config_err!("embedding {e} is not divisible by {heads} heads"));
        }
        for (wt, bs) in [(w.wq, w.bq), (w.wk, w.bk), (w.wv, w.bv), (w.wo, w.bo)] {
            if self.shape(wt) != [e, e] || self.shape(bs) != [e] {
                return Err(shape_err!(
                    "attention: projection {:?}/{:?} for embedding {e}",
                    self.shape(wt),
                    self.shape(bs)
                ));
            }
        }
        let dh = e / heads;
        let rows = n * t;
        let scale = 1.0 / (dh as f32).sqrt();
        let xs = self.value(x);
        let q = project(xs, self.value(w.wq), self.value(w.bq), rows, e);
        let k = project(xs, self.value(w.wk), self.value(w.bk), rows, e);
        let v = project(xs, self.value(w.wv), self.value(w.bv), rows, e);
        let mut p = vec![0.0f32; n * heads * t * t];
        let mut o = vec![0.0f32; rows * e];
        let head = Layout::strided(e, 1);
        for b in 0..n {
            for h in 0..heads {
                let off = b * t * e + h * dh;
                let ph = &mut p[(b * heads + h) * t * t..][..t * t];
                sgemm(t, dh, t, scale, &q[off..], head, &k[off..], Layout::strided(1, e), 0.0, ph, Layout::row_major(t));
                for row in ph.chunks_mut(t) {
                    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut denom = 0.0f64;
                    for val in row.iter_mut() {
                        let ex = ((*val - max) as f64).exp();
                        *val = ex as f32;
                        denom += ex;
                    }
                    row.iter_mut().for_each(|val| *val = (*val as f64 / denom) as f32);
                }
                sgemm(t, t, dh, 1.0, ph, Layout::row_major(t), &v[off..], head, 0.0, &mut o[off..], head);
            }
        }
        let out = project(&o, self.value(w.wo), self.value(w.bo), rows, e);
        let op = AttentionOp { input: x, w, n, t, e, heads, q, k, v, p, o };
        Ok(self.push_op(out, s, Box::new(op)))
    }
}
