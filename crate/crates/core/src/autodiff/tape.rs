use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::array::Array;
use super::gemm::{default_precision, Precision};
use crate::error::{Error, Result};

/// Inputs handed to a node's backward rule.
pub struct BackwardArgs<'a> {
    pub inputs: &'a [&'a Array],
    pub output: &'a Array,
    pub grad: &'a Array,
    /// Whether each input wants a gradient; rules may skip the rest.
    pub needs: &'a [bool],
}

pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Array>>>;

struct Node {
    op: &'static str,
    value: Array,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Linear record of a forward computation, replayed in reverse by
/// [`Tape::backward`]. Nodes are appended in evaluation order, so operands
/// always precede their consumers.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    precision: Precision,
    kinks: Cell<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("precision", &self.precision)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(default_precision())
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            precision,
            kinks: Cell::new(0xcbf2_9ce4_8422_2325),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A constant input: never receives a gradient.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push_leaf(value, false)
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Array) -> Var<'_> {
        self.push_leaf(value, true)
    }

    fn push_leaf(&self, value: Array, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: "leaf",
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push_op<'t>(
        &'t self,
        op: &'static str,
        value: Array,
        parents: &[Var<'t>],
        backward: BackwardFn,
    ) -> Var<'t> {
        for p in parents {
            assert!(std::ptr::eq(p.tape, self), "operand from another tape");
        }
        let mut nodes = self.nodes.borrow_mut();
        if cfg!(debug_assertions) && !value.is_finite() {
            let finite_inputs = parents.iter().all(|p| nodes[p.id].value.is_finite());
            assert!(!finite_inputs, "`{op}` produced non-finite output from finite inputs");
        }
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            op,
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Folds a piecewise-branch decision (ReLU mask, max-pool winner) into
    /// the running signature.
    pub(crate) fn record_branch(&self, words: &[u64]) {
        // four independent FNV lanes, folded at the end
        const P: u64 = 0x0100_0000_01b3;
        let mut lanes = [self.kinks.get(), 1, 2, 3];
        let mut chunks = words.chunks_exact(4);
        for c in &mut chunks {
            for (l, &w) in lanes.iter_mut().zip(c) {
                *l = (*l ^ w).wrapping_mul(P);
            }
        }
        for &w in chunks.remainder() {
            lanes[0] = (lanes[0] ^ w).wrapping_mul(P);
        }
        let h = lanes.iter().fold(0u64, |h, &l| (h ^ l).wrapping_mul(P));
        self.kinks.set(h);
    }

    /// Hash of every branch taken by piecewise-linear ops so far. Two
    /// evaluations with the same signature lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.kinks.get()
    }

    pub(crate) fn value(&self, id: usize) -> Ref<'_, Array> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "loss from another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?} from `{}`",
                root.value.shape(),
                root.op
            )));
        }
        let mut grads: Vec<Option<Array>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Array::ones(root.value.shape()));
        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            let Some(rule) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Array> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let pgrads = rule(&BackwardArgs {
                inputs: &inputs,
                output: &node.value,
                grad: &g,
                needs: &needs,
            });
            debug_assert_eq!(pgrads.len(), node.parents.len(), "`{}` backward arity", node.op);
            for ((&p, pg), need) in node.parents.iter().zip(pgrads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "`{}` grad shape", node.op);
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn get(&self, v: Var<'_>) -> Array {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Array::zeros(&v.shape()),
        }
    }

    pub fn take(&mut self, v: Var<'_>) -> Array {
        match self.grads[v.id].take() {
            Some(g) => g,
            None => Array::zeros(&v.shape()),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Array> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }
}
