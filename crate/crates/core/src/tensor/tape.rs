//! The recording tape and the reverse sweep.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<usize>,
    pub(crate) requires_grad: bool,
}

/// Records every differentiable op applied to its [`Var`]s.
///
/// Node ids are assigned in construction order, so the node list is already
/// a topological order and the backward sweep is a single reverse pass.
/// Gradients of leaves accumulate across `backward` calls until
/// [`Tape::zero_grad`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<HashMap<usize, Vec<f64>>>,
}

/// A tensor value living on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    value: Rc<Tensor>,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

/// Whether stochastic layers are active.
pub enum Mode<'r> {
    Train(&'r mut Rng),
    Eval,
}

impl Mode<'_> {
    pub fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Train(rng) => Mode::Train(rng),
            Mode::Eval => Mode::Eval,
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers `t` as a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let requires_grad = t.requires_grad();
        self.push(Op::Leaf, Vec::new(), requires_grad, Rc::new(t))
    }

    /// Registers a copy of `t` as a differentiable leaf.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        let mut t = t.clone().with_requires_grad(true);
        t.grad = None;
        self.leaf(t)
    }

    /// Registers `t` as a non-differentiable input.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t.with_requires_grad(false))
    }

    pub(crate) fn record(&self, op: Op, inputs: &[&Var<'_>], value: Tensor) -> Var<'_> {
        self.record_with(inputs, value, |_| op)
    }

    /// Like [`Tape::record`] for ops that keep a handle on their own output.
    pub(crate) fn record_with(
        &self,
        inputs: &[&Var<'_>],
        value: Tensor,
        make_op: impl FnOnce(&Rc<Tensor>) -> Op,
    ) -> Var<'_> {
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        let ids = inputs
            .iter()
            .map(|v| {
                debug_assert!(std::ptr::eq(v.tape, self), "mixing tapes");
                v.id
            })
            .collect();
        let value = Rc::new(value.with_requires_grad(requires_grad));
        // nothing upstream needs a gradient: drop the saved intermediates
        let op = if requires_grad { make_op(&value) } else { Op::Leaf };
        self.push(op, ids, requires_grad, value)
    }

    fn push(&self, op: Op, inputs: Vec<usize>, requires_grad: bool, value: Rc<Tensor>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            inputs,
            requires_grad,
        });
        Var {
            tape: self,
            id,
            value,
        }
    }

    /// Propagates d`loss`/dT into every differentiable leaf reachable from `loss`.
    pub fn backward(&self, loss: &Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to another tape".into()));
        }
        if loss.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match leaf_grads.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        leaf_grads.insert(id, g);
                    }
                }
                continue;
            }
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].requires_grad)
                .collect();
            let input_grads = node.op.backward(&g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if any has reached it.
    pub fn grad(&self, v: &Var<'_>) -> Option<Tensor> {
        let grads = self.leaf_grads.borrow();
        let g = grads.get(&v.id)?;
        Tensor::new(v.value.shape().to_vec(), g.clone()).ok()
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Bytes held by saved intermediates across all recorded nodes.
    pub fn saved_bytes(&self) -> usize {
        self.nodes.borrow().iter().map(|n| n.op.saved_bytes()).sum()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn requires_grad(&self) -> bool {
        self.value.requires_grad()
    }

    pub fn item(&self) -> Result<f64> {
        self.value.item()
    }

    /// Shorthand for `self.tape().backward(self)`.
    pub fn backward(&self) -> Result<()> {
        self.tape.backward(self)
    }
}
