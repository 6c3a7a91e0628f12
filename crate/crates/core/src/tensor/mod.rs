//! Dense tensors with reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] owns every node of one computation. [`Tensor`] is a copyable
//! handle (an index into the tape), so building a graph reads like ordinary
//! arithmetic while all storage stays in one arena:
//!
//! ```
//! use codevec_core::tensor::Tape;
//!
//! let mut tape = Tape::<f64>::new();
//! let a = tape.var(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
//! let b = tape.var(&[2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
//! let c = tape.matmul(a, b).unwrap();
//! let loss = tape.sum(c).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
//! ```
//!
//! Nodes are appended in evaluation order, so node ids are already a
//! topological order and `backward` is a single reverse sweep that visits
//! each node once. Summation everywhere is sequential row-major, which makes
//! forward and backward bitwise deterministic for a fixed platform.
//!
//! There is no broadcasting beyond scalar-with-tensor (`scale`); shape
//! mismatches are reported as errors naming both shapes.

mod ops;

pub mod gradcheck;

pub use ops::Op;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to one node on a [`Tape`]. Valid only for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    pub(crate) id: usize,
}

pub(crate) struct Node<S> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<S>,
    pub(crate) grad: Option<Vec<S>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op<S>>,
}

/// Arena of recorded operations for one forward/backward pass.
pub struct Tape<S: Scalar> {
    pub(crate) nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Leaf that participates in gradient accumulation.
    pub fn var(&mut self, shape: &[usize], data: Vec<S>) -> Result<Tensor> {
        self.leaf(shape, data, true)
    }

    /// Leaf excluded from gradient accumulation.
    pub fn constant(&mut self, shape: &[usize], data: Vec<S>) -> Result<Tensor> {
        self.leaf(shape, data, false)
    }

    fn leaf(&mut self, shape: &[usize], data: Vec<S>, requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "leaf",
                format!("shape {shape:?} implies {numel} values, got {}", data.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, None))
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<S>,
        requires_grad: bool,
        op: Option<Op<S>>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        Tensor { id }
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.id].shape
    }

    pub fn data(&self, t: Tensor) -> &[S] {
        &self.nodes[t.id].data
    }

    /// Accumulated gradient, populated by [`Tape::backward`]. `None` for
    /// nodes the loss does not reach or that do not require gradients.
    pub fn grad(&self, t: Tensor) -> Option<&[S]> {
        self.nodes[t.id].grad.as_deref()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.id].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, t: Tensor) -> Result<S> {
        let node = &self.nodes[t.id];
        if node.data.len() != 1 {
            return Err(Error::shape(
                "scalar_value",
                format!("expected one element, found shape {:?}", node.shape),
            ));
        }
        Ok(node.data[0])
    }

    /// Number of recorded nodes. Equal-shape passes record equal lengths,
    /// which the trainer asserts as a leak check.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep from `loss`, accumulating gradients into every
    /// reachable node with `requires_grad`.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.backward_done {
            return Err(Error::InvalidArgument(
                "backward already ran on this tape; build a new tape per step".into(),
            ));
        }
        let node = &self.nodes[loss.id];
        if node.data.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, found shape {:?}", node.shape),
            ));
        }
        if node.op.is_none() {
            return Err(Error::InvalidArgument(
                "backward on a detached tensor: the loss was not produced by recorded operations"
                    .into(),
            ));
        }
        self.backward_done = true;
        self.nodes[loss.id].grad = Some(vec![S::one()]);
        for id in (0..=loss.id).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            let Some(op) = self.nodes[id].op.take() else {
                continue;
            };
            let gout = self.nodes[id].grad.clone().expect("checked above");
            let out_data = std::mem::take(&mut self.nodes[id].data);
            let res = op.backward(&gout, &out_data, &mut self.nodes);
            self.nodes[id].data = out_data;
            res?;
        }
        Ok(())
    }
}

/// Add `contrib` into the gradient buffer of node `id`, allocating zeros on
/// first touch. No-op when the node does not require gradients.
pub(crate) fn accumulate<S: Scalar>(nodes: &mut [Node<S>], id: usize, contrib: &[S]) {
    if !nodes[id].requires_grad {
        return;
    }
    let len = nodes[id].data.len();
    debug_assert_eq!(len, contrib.len());
    let grad = nodes[id].grad.get_or_insert_with(|| vec![S::zero(); len]);
    for (g, &c) in grad.iter_mut().zip(contrib) {
        *g += c;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_shape_must_match_data() {
        let mut tape = Tape::<f32>::new();
        assert!(tape.var(&[2, 2], vec![0.0; 3]).is_err());
        assert!(tape.var(&[2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let a = tape.var(&[2], vec![1.0, 2.0]).unwrap();
        let b = tape.var(&[2], vec![3.0, 4.0]).unwrap();
        let c = tape.add(a, b).unwrap();
        let err = tape.backward(c).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn backward_rejects_detached_tensor() {
        let mut tape = Tape::<f64>::new();
        let a = tape.var(&[1], vec![1.0]).unwrap();
        let err = tape.backward(a).unwrap_err();
        assert!(err.to_string().contains("detached"));
    }

    #[test]
    fn backward_rejects_second_call() {
        let mut tape = Tape::<f64>::new();
        let a = tape.var(&[2], vec![1.0, 2.0]).unwrap();
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn grads_accumulate_across_multiple_uses() {
        // y = a*a summed, dy/da = 2a through the two mul inputs.
        let mut tape = Tape::<f64>::new();
        let a = tape.var(&[2], vec![3.0, -2.0]).unwrap();
        let sq = tape.mul(a, a).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[6.0, -4.0]);
    }

    #[test]
    fn constants_get_no_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.var(&[2], vec![1.0, 2.0]).unwrap();
        let c = tape.constant(&[2], vec![5.0, 5.0]).unwrap();
        let p = tape.mul(a, c).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[5.0, 5.0]);
        assert!(tape.grad(c).is_none());
    }
}
