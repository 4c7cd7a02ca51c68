use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Single-threaded by construction (`RefCell`); run one tape per chain or
/// sample when parallelism is wanted.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    params: RefCell<HashMap<u64, usize>>,
    backward_done: Cell<bool>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        nodes.len() - 1
    }

    pub(crate) fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Copies `t` onto the tape. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        let id = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        );
        self.var(id)
    }

    /// Moves `t` onto the tape as a non-differentiable input.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        let id = self.push(shape, t.into_data(), Op::Leaf, false);
        self.var(id)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf for a named parameter; repeated calls with the same `key` reuse
    /// one node so that gradients from every use accumulate in one place.
    pub fn param_leaf(&self, key: u64, t: &Tensor) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(&key) {
            return self.var(id);
        }
        let v = self.leaf(t);
        self.params.borrow_mut().insert(key, v.id);
        v
    }

    /// Makes later `param_leaf(key, ..)` calls resolve to `v`.
    pub fn bind_param(&self, key: u64, v: Var<'_>) {
        self.params.borrow_mut().insert(key, v.id);
    }

    pub fn param_grad(&self, key: u64) -> Option<Vec<f64>> {
        let id = *self.params.borrow().get(&key)?;
        self.grads.borrow().get(id).and_then(|g| g.clone())
    }

    pub fn grad(&self, v: Var<'_>) -> Option<Vec<f64>> {
        self.grads.borrow().get(v.id).and_then(|g| g.clone())
    }

    /// Clears all stored gradients so `backward` may run again.
    pub fn reset_grads(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate additively
    /// over every use of the leaf; intermediate gradients are discarded.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if self.backward_done.get() {
            return Err(Error::DoubleBackward);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            node.op.backward(&nodes, node, &g, &mut grads);
        }
        // leaves the loss does not depend on get an explicit zero gradient
        for (node, g) in nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && g.is_none() {
                *g = Some(vec![0.0; node.value.len()]);
            }
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Ref<'t, [f64]> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].value.as_slice())
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.grad(*self)
    }
}
