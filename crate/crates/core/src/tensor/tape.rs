//! Reverse-mode automatic differentiation tape.
//!
//! The tape is an ordered list of nodes. Leaves are registered explicitly
//! with [`Tape::leaf`]; every operation whose inputs include a taped tensor
//! appends one node holding the operation's saved context (a boxed
//! [`Vjp`]). [`Tape::backward`] walks the nodes in reverse, accumulating
//! vector-Jacobian products. Gradients are retained for leaves only.
//!
//! A tape is meant to be used from a single thread; the internal mutex only
//! makes sharing the `Arc` sound, it is never contended in practice.

use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type TapeRef<S> = Arc<Tape<S>>;

/// Saved context of one recorded operation. `backward` receives the output
/// gradient and returns one optional gradient buffer per declared input, in
/// declaration order.
pub(crate) trait Vjp<S: Scalar>: Send {
    fn name(&self) -> &'static str;
    fn backward(&self, grad: &[S]) -> Result<Vec<Option<Vec<S>>>>;
}

struct Node<S: Scalar> {
    /// Node ids of taped inputs, one slot per Vjp input; `None` marks a
    /// constant (untaped) input whose gradient is discarded.
    parents: Vec<Option<usize>>,
    /// `None` for leaves.
    op: Option<Box<dyn Vjp<S>>>,
    shape: Vec<usize>,
    name: &'static str,
    trainable: bool,
    /// Output contained a non-finite value at record time.
    nonfinite: bool,
}

struct Inner<S: Scalar> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

pub struct Tape<S: Scalar> {
    inner: Mutex<Inner<S>>,
}

/// A tensor's link back to its tape.
pub(crate) struct NodeRef<S: Scalar> {
    pub tape: TapeRef<S>,
    pub id: usize,
}

impl<S: Scalar> Clone for NodeRef<S> {
    fn clone(&self) -> Self {
        NodeRef {
            tape: Arc::clone(&self.tape),
            id: self.id,
        }
    }
}

impl<S: Scalar> Tape<S> {
    #[allow(clippy::new_ret_no_self)]
    pub fn new() -> TapeRef<S> {
        Arc::new(Tape {
            inner: Mutex::new(Inner {
                nodes: Vec::new(),
                consumed: false,
            }),
        })
    }

    pub fn node_count(&self) -> usize {
        self.inner.lock().unwrap().nodes.len()
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.lock().unwrap().consumed
    }

    /// Register `t`'s value as a leaf and return the taped tensor.
    pub fn leaf(tape: &TapeRef<S>, t: &Tensor<S>, trainable: bool) -> Result<Tensor<S>> {
        if t.node.is_some() {
            return Err(Error::Tape("leaf source is already on a tape".into()));
        }
        let mut inner = tape.inner.lock().unwrap();
        if inner.consumed {
            return Err(Error::Tape("tape already consumed by backward".into()));
        }
        let nonfinite = t.data().iter().any(|v| !v.is_finite());
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            parents: Vec::new(),
            op: None,
            shape: t.shape().to_vec(),
            name: "leaf",
            trainable,
            nonfinite,
        });
        let mut out = t.detach();
        out.node = Some(NodeRef {
            tape: Arc::clone(tape),
            id,
        });
        Ok(out)
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape: a second call,
    /// or recording further nodes, is an error.
    pub fn backward(loss: &Tensor<S>) -> Result<Gradients<S>> {
        let node_ref = loss
            .node
            .as_ref()
            .ok_or_else(|| Error::Tape("backward: loss is not on a tape".into()))?;
        let tape = Arc::clone(&node_ref.tape);
        let loss_id = node_ref.id;
        if loss.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward: loss must be a scalar, got shape {:?}",
                loss.shape()
            )));
        }

        let mut inner = tape.inner.lock().unwrap();
        if inner.consumed {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        inner.consumed = true;

        if !loss.data()[0].is_finite() {
            let first = inner
                .nodes
                .iter()
                .position(|n| n.nonfinite)
                .unwrap_or(loss_id);
            return Err(Error::Numeric(format!(
                "backward: loss is non-finite; first non-finite output at node {} ({})",
                first, inner.nodes[first].name
            )));
        }

        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss_id] = Some(vec![S::one()]);

        for id in (0..=loss_id).rev() {
            if inner.nodes[id].op.is_none() {
                continue; // leaf gradients stay in place
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            let op = node.op.as_ref().unwrap();
            let parts = op.backward(&g).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{} backward: {m}", op.name())),
                other => other,
            })?;
            debug_assert_eq!(parts.len(), node.parents.len());
            for (slot, part) in parts.into_iter().enumerate() {
                let (Some(pid), Some(pg)) = (node.parents[slot], part) else {
                    continue;
                };
                match &mut grads[pid] {
                    Some(acc) => {
                        debug_assert_eq!(acc.len(), pg.len());
                        for (a, b) in acc.iter_mut().zip(&pg) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        let mut leaf_grads: Vec<Option<Vec<S>>> = Vec::with_capacity(n);
        leaf_grads.resize_with(n, || None);
        let mut leaf_shapes: Vec<Option<Vec<usize>>> = vec![None; n];
        for id in 0..n {
            // Gradients are retained for trainable leaves; non-trainable
            // leaves (e.g. running statistics) read back as zeros.
            if inner.nodes[id].op.is_none() && inner.nodes[id].trainable {
                leaf_grads[id] = grads[id].take();
            }
            if inner.nodes[id].op.is_none() {
                leaf_shapes[id] = Some(inner.nodes[id].shape.clone());
            }
        }
        drop(inner);

        Ok(Gradients {
            tape,
            leaf_grads,
            leaf_shapes,
        })
    }

    /// Append an op node and attach it to `out`. Internal; used by ops.
    pub(crate) fn record(
        tape: &TapeRef<S>,
        name: &'static str,
        parents: Vec<Option<usize>>,
        op: Box<dyn Vjp<S>>,
        mut out: Tensor<S>,
    ) -> Result<Tensor<S>> {
        let mut inner = tape.inner.lock().unwrap();
        if inner.consumed {
            return Err(Error::Tape(format!(
                "cannot record {name}: tape already consumed by backward"
            )));
        }
        let nonfinite = out.data().iter().any(|v| !v.is_finite());
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            parents,
            op: Some(op),
            shape: out.shape().to_vec(),
            name,
            trainable: false,
            nonfinite,
        });
        drop(inner);
        out.node = Some(NodeRef {
            tape: Arc::clone(tape),
            id,
        });
        Ok(out)
    }
}

/// The single tape shared by `inputs`, if any. Mixing tapes is an error.
pub(crate) fn common_tape<S: Scalar>(inputs: &[&Tensor<S>]) -> Result<Option<TapeRef<S>>> {
    let mut found: Option<TapeRef<S>> = None;
    for t in inputs {
        if let Some(node) = &t.node {
            match &found {
                None => found = Some(Arc::clone(&node.tape)),
                Some(prev) => {
                    if !Arc::ptr_eq(prev, &node.tape) {
                        return Err(Error::Tape(
                            "operation mixes tensors from different tapes".into(),
                        ));
                    }
                }
            }
        }
    }
    Ok(found)
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients<S: Scalar> {
    tape: TapeRef<S>,
    leaf_grads: Vec<Option<Vec<S>>>,
    leaf_shapes: Vec<Option<Vec<usize>>>,
}

impl<S: Scalar> std::fmt::Debug for Gradients<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gradients")
            .field("leaves", &self.leaf_shapes.iter().filter(|s| s.is_some()).count())
            .finish()
    }
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to leaf `t`. Leaves the loss never reached get
    /// an explicit zero gradient of the leaf's shape.
    pub fn wrt(&self, t: &Tensor<S>) -> Result<Tensor<S>> {
        let node = t
            .node
            .as_ref()
            .ok_or_else(|| Error::Tape("wrt: tensor is not on a tape".into()))?;
        if !Arc::ptr_eq(&node.tape, &self.tape) {
            return Err(Error::Tape("wrt: tensor belongs to a different tape".into()));
        }
        let shape = self.leaf_shapes[node.id]
            .as_ref()
            .ok_or_else(|| Error::Tape("wrt: gradients are retained for leaves only".into()))?;
        match &self.leaf_grads[node.id] {
            Some(g) => Tensor::from_vec(shape, g.clone()),
            None => Ok(Tensor::zeros(shape)),
        }
    }
}
