//! Reverse-mode automatic differentiation over dense `f32` arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! values and a record of how to push gradients back to its inputs. Nodes are
//! addressed by [`Var`] handles. Calling [`Graph::backward`] on a scalar node
//! walks the tape once in reverse and leaves gradients on every node that
//! requires them.
//!
//! A graph is single-use: `backward` may be called once. A second call
//! returns [`Error::Graph`] instead of accumulating.
//!
//! Storage is `f32`; reductions accumulate in `f64`.

mod attention;
mod conv;
mod elementwise;
pub(crate) mod gemm;
mod loss;
mod norm;
mod pool;

pub use attention::AttentionWeights;
pub use conv::ConvSpec;
pub use elementwise::{dropout_mask, sigmoid};
pub use norm::RunningStats;

use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Train or eval behaviour for batch-norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One node of the graph: values, optional gradient, and the record of the
/// operation that produced it.
pub struct DiffTensor {
    id: usize,
    shape: Vec<usize>,
    values: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Option<Box<dyn BackwardOp>>,
}

impl DiffTensor {
    pub fn id(&self) -> usize {
        self.id
    }
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }
    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
    pub fn op_name(&self) -> Option<&'static str> {
        self.op.as_ref().map(|op| op.name())
    }
}

/// Backward rule of one recorded operation.
pub(crate) trait BackwardOp {
    fn name(&self) -> &'static str;
    fn inputs(&self) -> Vec<Var>;
    /// Gradients with respect to each input, in `inputs()` order. Entries
    /// for inputs that do not require grad may be `None`.
    fn backward(&self, g: &Graph, out: Var, grad_out: &[f32]) -> Vec<Option<Vec<f32>>>;
}

/// Computation tape.
pub struct Graph {
    nodes: Vec<DiffTensor>,
    seed: u64,
    step: u64,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::with_seed(0, 0)
    }

    /// Graph whose stochastic ops (dropout) draw from streams derived from
    /// `(seed, node id, step)`.
    pub fn with_seed(seed: u64, step: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            seed,
            step,
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Trainable leaf.
    pub fn param(&mut self, values: Vec<f32>, shape: &[usize]) -> Result<Var> {
        self.leaf(values, shape, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, values: Vec<f32>, shape: &[usize]) -> Result<Var> {
        self.leaf(values, shape, false)
    }

    pub fn leaf(&mut self, values: Vec<f32>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        check_shape(shape, values.len())?;
        Ok(self.push(values, shape.to_vec(), requires_grad, None))
    }

    pub fn tensor(&self, v: Var) -> &DiffTensor {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].values
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.nodes[v.0].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f32 {
        let vals = self.value(v);
        debug_assert_eq!(vals.len(), 1);
        vals[0]
    }

    pub(crate) fn push(
        &mut self,
        values: Vec<f32>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Option<Box<dyn BackwardOp>>,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let id = self.nodes.len();
        // Ops whose inputs need no gradient become plain leaves.
        let op = if requires_grad { op } else { None };
        self.nodes.push(DiffTensor {
            id,
            shape,
            values,
            grad: None,
            requires_grad,
            op,
        });
        Var(id)
    }

    /// Appends the output of an op; it requires grad iff any input does.
    pub(crate) fn push_op(&mut self, values: Vec<f32>, shape: Vec<usize>, op: Box<dyn BackwardOp>) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.requires_grad(i));
        self.push(values, shape, requires_grad, Some(op))
    }

    /// Backpropagates from a one-element node, seeding its gradient with 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; build a new graph per step".into(),
            ));
        }
        if self.value(root).len() != 1 {
            return Err(Error::Graph(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        if !self.requires_grad(root) {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            if self.nodes[idx].op.is_none() {
                continue;
            }
            let Some(grad_out) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = self.nodes[idx].op.take().expect("checked above");
            let inputs = op.inputs();
            let grads = op.backward(self, Var(idx), &grad_out);
            debug_assert_eq!(grads.len(), inputs.len());
            self.nodes[idx].grad = Some(grad_out);
            self.nodes[idx].op = Some(op);
            for (input, grad) in inputs.into_iter().zip(grads) {
                let Some(grad) = grad else { continue };
                let node = &mut self.nodes[input.0];
                if !node.requires_grad {
                    continue;
                }
                debug_assert_eq!(grad.len(), node.values.len());
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                    None => node.grad = Some(grad),
                }
            }
        }
        Ok(())
    }

    pub(crate) fn expect_shape(&self, v: Var, rank: usize, what: &str) -> Result<&[usize]> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(Error::Shape(format!(
                "{what}: expected rank {rank}, got shape {s:?}"
            )));
        }
        Ok(s)
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Shape(format!("extents must be positive, got {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Shape(format!(
            "shape {shape:?} holds {n} values but buffer has {len}"
        )));
    }
    Ok(())
}

/// 64-bit mixing used to derive independent per-op RNG streams.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_leaf() {
        let mut g = Graph::new();
        assert!(g.param(vec![1.0; 5], &[2, 3]).is_err());
        assert!(g.param(vec![], &[0]).is_err());
    }

    #[test]
    fn backward_twice_errors() {
        let mut g = Graph::new();
        let x = g.param(vec![1.0, 2.0], &[2]).unwrap();
        let y = g.sum(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
        let err = g.backward(y).unwrap_err();
        assert!(matches!(err, Error::Graph(_)));
        // Gradients were not accumulated a second time.
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn no_grad_leaves_never_allocate() {
        let mut g = Graph::new();
        let c = g.constant(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let p = g.param(vec![0.5, 0.5, 0.5], &[3]).unwrap();
        let r = g.relu(c);
        let s = g.add(r, p).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(r).is_none());
        assert!(!g.requires_grad(r));
        assert!(g.grad(p).is_some());
    }

    #[test]
    fn shared_input_accumulates_within_one_pass() {
        let mut g = Graph::new();
        let x = g.param(vec![3.0], &[1]).unwrap();
        let y = g.add(x, x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn node_ids_are_sequential_and_unique() {
        let mut g = Graph::new();
        let a = g.param(vec![1.0], &[1]).unwrap();
        let b = g.relu(a);
        let c = g.sigmoid(b);
        assert_eq!((a.id(), b.id(), c.id()), (0, 1, 2));
        assert_eq!(g.tensor(c).id(), 2);
        assert_eq!(g.tensor(c).op_name(), Some("sigmoid"));
    }
}
