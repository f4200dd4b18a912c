//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! Every operation appends a node holding its output value, its parent ids,
//! and a closure that maps the upstream gradient to per-parent gradients.
//! `backward` walks the tape once in reverse and accumulates gradients
//! additively, so fan-out (one value consumed by several ops) needs no
//! special casing.

use crate::tensor::Tensor;

/// Index of a node on its tape. Ids from different tapes must not be mixed;
/// shape asserts usually catch it but nothing else does.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient closure: given the tape and the gradient of the loss with
/// respect to this node's output, produce one gradient per parent, in
/// parent order, each matching that parent's value shape.
pub(crate) type Vjp = Box<dyn Fn(&Tape, &Tensor) -> Vec<Tensor>>;

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<TensorId>,
    requires_grad: bool,
    vjp: Option<Vjp>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push_node("constant", value, Vec::new(), false, None)
    }

    /// Differentiable input (a parameter or anything under test).
    pub fn input(&mut self, value: Tensor) -> TensorId {
        self.push_node("input", value, Vec::new(), true, None)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op_name(&self, id: TensorId) -> &'static str {
        self.nodes[id.0].op
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub(crate) fn push_op(
        &mut self,
        op: &'static str,
        value: Tensor,
        parents: Vec<TensorId>,
        vjp: impl Fn(&Tape, &Tensor) -> Vec<Tensor> + 'static,
    ) -> TensorId {
        let requires = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let vjp: Option<Vjp> = if requires { Some(Box::new(vjp)) } else { None };
        self.push_node(op, value, parents, requires, vjp)
    }

    fn push_node(
        &mut self,
        op: &'static str,
        value: Tensor,
        parents: Vec<TensorId>,
        requires_grad: bool,
        vjp: Option<Vjp>,
    ) -> TensorId {
        for p in &parents {
            assert!(p.0 < self.nodes.len(), "parent id from another tape");
        }
        self.nodes.push(Node {
            op,
            value,
            parents,
            requires_grad,
            vjp,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// First node (in creation order) whose value contains a NaN or
    /// infinity, reported with its operation name for diagnostics.
    pub fn first_non_finite(&self) -> Option<(TensorId, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (TensorId(i), n.op))
    }

    /// Reverse pass from a scalar loss. Returns one gradient slot per node;
    /// slots stay `None` for nodes the loss does not depend on or that do
    /// not require gradients.
    pub fn backward(&self, loss: TensorId) -> Gradients {
        let loss_node = &self.nodes[loss.0];
        assert!(
            loss_node.value.is_scalar(),
            "backward needs a scalar loss, got shape {:?} from op '{}'",
            loss_node.value.shape(),
            loss_node.op
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(
            loss_node.value.shape().to_vec(),
            vec![1.0],
        ));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(vjp) = &node.vjp else { continue };
            // Taking the slot avoids aliasing the grads vec while the
            // closure reads the tape.
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let parent_grads = vjp(self, &upstream);
            assert_eq!(
                parent_grads.len(),
                node.parents.len(),
                "op '{}' returned {} gradients for {} parents",
                node.op,
                parent_grads.len(),
                node.parents.len()
            );
            for (pid, g) in node.parents.iter().zip(parent_grads) {
                let parent = &self.nodes[pid.0];
                if !parent.requires_grad {
                    continue;
                }
                assert_eq!(
                    g.shape(),
                    parent.value.shape(),
                    "op '{}' produced gradient shape {:?} for parent '{}' of shape {:?}",
                    node.op,
                    g.shape(),
                    parent.op,
                    parent.value.shape()
                );
                match &mut grads[pid.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(upstream);
        }
        Gradients { grads }
    }
}

/// Result of a backward pass, indexed by the ids of the originating tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node the loss is known to depend on.
    pub fn expect(&self, id: TensorId) -> &Tensor {
        self.get(id).expect("no gradient recorded for this node")
    }

    pub fn take(&mut self, id: TensorId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}
