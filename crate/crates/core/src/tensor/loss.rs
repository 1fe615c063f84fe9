//! Scalar losses. Each returns a one-element node.

use super::elementwise::sigmoid;
use super::{BackwardOp, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::window::ssim_sum;

/// Guards logarithms of probabilities.
const LOG_EPS: f64 = 1e-12;

/// Loss with precomputed gradients for its two inputs.
struct PrecomputedLoss {
    name: &'static str,
    inputs: Vec<Var>,
    grads: Vec<Option<Vec<f32>>>,
}

impl BackwardOp for PrecomputedLoss {
    fn name(&self) -> &'static str {
        self.name
    }
    fn inputs(&self) -> Vec<Var> {
        self.inputs.clone()
    }
    fn backward(&self, _g: &Graph, _out: Var, grad_out: &[f32]) -> Vec<Option<Vec<f32>>> {
        let go = grad_out[0];
        self.grads
            .iter()
            .map(|g| g.as_ref().map(|g| g.iter().map(|v| v * go).collect()))
            .collect()
    }
}

impl Graph {
    fn check_pair(&self, a: Var, b: Var, weights: Option<&[f32]>, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        if let Some(w) = weights {
            if w.len() != self.value(a).len() {
                return Err(shape_err!("{what}: {} weights for {} elements", w.len(), self.value(a).len()));
            }
        }
        Ok(())
    }

    /// Weighted mean of a per-element loss; `weights` of `None` is a plain
    /// mean. The weight total must be positive.
    fn elementwise_loss(
        &mut self,
        name: &'static str,
        pred: Var,
        target: Var,
        weights: Option<&[f32]>,
        f: impl Fn(f64, f64) -> (f64, f64),
    ) -> Result<Var> {
        self.check_pair(pred, target, weights, name)?;
        let p = self.value(pred);
        let t = self.value(target);
        let total: f64 = match weights {
            Some(w) => w.iter().map(|&v| v as f64).sum(),
            None => p.len() as f64,
        };
        if total <= 0.0 {
            return Err(Error::Invalid(format!("{name}: weights sum to zero")));
        }
        let mut acc = 0.0f64;
        let mut grad = vec![0.0f32; p.len()];
        for i in 0..p.len() {
            let w = weights.map_or(1.0, |w| w[i] as f64);
            if w == 0.0 {
                continue;
            }
            let (l, dl) = f(p[i] as f64, t[i] as f64);
            acc += w * l;
            grad[i] = (w * dl / total) as f32;
        }
        let want_t = self.requires_grad(target);
        let grads = vec![Some(grad.clone()), want_t.then(|| grad.iter().map(|g| -g).collect())];
        let op = PrecomputedLoss { name, inputs: vec![pred, target], grads };
        Ok(self.push_op(vec![(acc / total) as f32], vec![1], Box::new(op)))
    }

    /// Mean absolute error, optionally weighted (e.g. by a mask).
    pub fn l1_loss(&mut self, pred: Var, target: Var, weights: Option<&[f32]>) -> Result<Var> {
        self.elementwise_loss("l1_loss", pred, target, weights, |p, t| {
            let d = p - t;
            (d.abs(), if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 })
        })
    }

    /// Mean squared error, optionally weighted.
    pub fn mse_loss(&mut self, pred: Var, target: Var, weights: Option<&[f32]>) -> Result<Var> {
        self.elementwise_loss("mse_loss", pred, target, weights, |p, t| {
            let d = p - t;
            (d * d, 2.0 * d)
        })
    }

    /// Binary cross-entropy on logits, mean over elements. Targets are
    /// probabilities in `[0, 1]`.
    pub fn bce_with_logits_loss(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.elementwise_loss("bce_with_logits_loss", logits, targets, None, |x, t| {
            // max(x,0) - x·t + log(1 + e^{-|x|})
            let l = x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln();
            (l, sigmoid(x as f32) as f64 - t)
        })
    }

    /// Softmax cross-entropy of `[N, K]` logits against class indices,
    /// mean over the batch.
    pub fn cross_entropy_loss(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.expect_shape(logits, 2, "cross_entropy_loss")?.to_vec();
        let (n, k) = (s[0], s[1]);
        if targets.len() != n {
            return Err(shape_err!("cross_entropy_loss: {} targets for batch {n}", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Invalid(format!("cross_entropy_loss: class {bad} out of range for {k} classes")));
        }
        let x = self.value(logits);
        let mut loss = 0.0f64;
        let mut grad = vec![0.0f32; n * k];
        for (r, &target) in targets.iter().enumerate() {
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            loss -= (exps[target] / denom).max(LOG_EPS).ln();
            for j in 0..k {
                let p = exps[j] / denom;
                grad[r * k + j] = ((p - if j == target { 1.0 } else { 0.0 }) / n as f64) as f32;
            }
        }
        let op = PrecomputedLoss { name: "cross_entropy_loss", inputs: vec![logits], grads: vec![Some(grad)] };
        Ok(self.push_op(vec![(loss / n as f64) as f32], vec![1], Box::new(op)))
    }

    /// `1 - mean local SSIM` between `[N, C, D, H, W]` volumes, using
    /// uniform `window³` windows centred on voxels with positive `mask`
    /// whose window fits inside the volume. The target receives no
    /// gradient. With no valid centre the loss is 0.
    pub fn ssim_loss(&mut self, pred: Var, target: Var, mask: Option<&[f32]>, window: usize, c1: f64, c2: f64) -> Result<Var> {
        self.check_pair(pred, target, mask, "ssim_loss")?;
        let s = self.expect_shape(pred, 5, "ssim_loss")?.to_vec();
        if window % 2 == 0 {
            return Err(Error::Config(format!("ssim window must be odd, got {window}")));
        }
        let dims = [s[2], s[3], s[4]];
        let vol: usize = dims.iter().product();
        let p = self.value(pred);
        let t = self.value(target);
        let mut sum = 0.0f64;
        let mut count = 0usize;
        let mut grads: Vec<Vec<f64>> = Vec::new();
        for blk in 0..s[0] * s[1] {
            let range = blk * vol..(blk + 1) * vol;
            let m = mask.map(|m| &m[range.clone()]);
            let r = ssim_sum(&p[range.clone()], &t[range], dims, window, c1, c2, |i| m.map_or(true, |m| m[i] > 0.0), true);
            sum += r.sum;
            count += r.count;
            grads.push(r.grad_x.unwrap());
        }
        let (value, grad) = if count == 0 {
            (0.0, vec![0.0f32; p.len()])
        } else {
            let c = count as f64;
            let g = grads.into_iter().flatten().map(|v| (-v / c) as f32).collect();
            (1.0 - sum / c, g)
        };
        let op = PrecomputedLoss { name: "ssim_loss", inputs: vec![pred], grads: vec![Some(grad)] };
        Ok(self.push_op(vec![value as f32], vec![1], Box::new(op)))
    }
}
