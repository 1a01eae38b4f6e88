//! Reverse-mode differentiation.
//!
//! Every operation on a [`Var`] that depends on a gradient-tracked input records a node
//! holding its parents and a backward closure. Node ids increase monotonically with
//! creation, so sorting the reachable nodes by descending id replays the recorded
//! operations in reverse topological order. The graph lives only as long as the
//! output `Var`s that reference it; it is rebuilt on every forward pass.
//!
//! A [`Tape`] owns the named leaves (parameters) of one forward pass and returns their
//! gradients by name.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Inputs handed to a backward closure.
pub struct BackwardArgs<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    /// Which inputs need a gradient; the closure may return `None` for the others.
    pub needs: Vec<bool>,
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

enum Kind<T> {
    Constant,
    Leaf,
    Op {
        parents: Vec<Var<T>>,
        backward: BackwardFn<T>,
    },
}

struct Node<T> {
    id: usize,
    value: Tensor<T>,
    kind: Kind<T>,
}

/// A value in the computation graph.
#[derive(Clone)]
pub struct Var<T = f32>(Rc<Node<T>>);

impl<T: Scalar> Var<T> {
    /// A value that never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            kind: Kind::Constant,
        }))
    }

    /// A gradient-tracked leaf not registered on any tape; use [`Tape::gradients_wrt`].
    pub fn leaf(value: Tensor<T>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            kind: Kind::Leaf,
        }))
    }

    /// Records an operation. If no parent tracks gradients the closure is dropped and
    /// the result is a constant.
    pub fn from_op(value: Tensor<T>, parents: &[&Var<T>], backward: BackwardFn<T>) -> Self {
        if parents.iter().any(|p| p.requires_grad()) {
            Var(Rc::new(Node {
                id: next_id(),
                value,
                kind: Kind::Op {
                    parents: parents.iter().map(|&p| p.clone()).collect(),
                    backward,
                },
            }))
        } else {
            Var::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        !matches!(self.0.kind, Kind::Constant)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Var::constant(self.0.value.clone())
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.0.id, self.0.value)
    }
}

/// Named gradient-tracked leaves of one forward pass.
pub struct Tape<T = f32> {
    leaves: RefCell<Vec<(String, Var<T>)>>,
    index: RefCell<HashMap<String, usize>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            leaves: RefCell::new(Vec::new()),
            index: RefCell::new(HashMap::new()),
        }
    }

    /// Registers (or returns the already registered) leaf named `name`.
    pub fn param(&self, name: &str, value: impl FnOnce() -> Tensor<T>) -> Var<T> {
        if let Some(&i) = self.index.borrow().get(name) {
            return self.leaves.borrow()[i].1.clone();
        }
        let var = Var::leaf(value());
        let mut leaves = self.leaves.borrow_mut();
        self.index.borrow_mut().insert(name.to_string(), leaves.len());
        leaves.push((name.to_string(), var.clone()));
        var
    }

    pub fn names(&self) -> Vec<String> {
        self.leaves.borrow().iter().map(|(n, _)| n.clone()).collect()
    }

    /// Gradients of a scalar `loss` for every leaf on this tape.
    /// Leaves the loss does not depend on get zero gradients.
    pub fn gradients(&self, loss: &Var<T>) -> Result<HashMap<String, Tensor<T>>> {
        let leaves = self.leaves.borrow();
        let vars: Vec<&Var<T>> = leaves.iter().map(|(_, v)| v).collect();
        let grads = backward(loss, &vars)?;
        Ok(leaves
            .iter()
            .zip(grads)
            .map(|((name, _), g)| (name.clone(), g))
            .collect())
    }

    /// Gradients of a scalar `loss` with respect to arbitrary graph values.
    pub fn gradients_wrt(loss: &Var<T>, targets: &[&Var<T>]) -> Result<Vec<Tensor<T>>> {
        backward(loss, targets)
    }
}

fn backward<T: Scalar>(loss: &Var<T>, targets: &[&Var<T>]) -> Result<Vec<Tensor<T>>> {
    if loss.value().numel() != 1 {
        return Err(TensorError::Usage(format!(
            "gradients need a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }

    // Collect every tracked node reachable from the loss.
    let mut nodes: Vec<&Var<T>> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![loss];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        nodes.push(v);
        if let Kind::Op { parents, .. } = &v.0.kind {
            stack.extend(parents.iter());
        }
    }
    nodes.sort_unstable_by_key(|v| std::cmp::Reverse(v.id()));

    let wanted: std::collections::HashSet<usize> = targets.iter().map(|v| v.id()).collect();
    let mut grads: HashMap<usize, Tensor<T>> = HashMap::new();
    let mut kept: HashMap<usize, Tensor<T>> = HashMap::new();
    if loss.requires_grad() {
        grads.insert(loss.id(), Tensor::full(loss.shape().to_vec(), T::one()));
    }

    for node in nodes {
        let Some(grad) = grads.remove(&node.id()) else {
            continue;
        };
        if let Kind::Op { parents, backward } = &node.0.kind {
            let args = BackwardArgs {
                grad: &grad,
                inputs: parents.iter().map(|p| p.value()).collect(),
                output: node.value(),
                needs: parents.iter().map(|p| p.requires_grad()).collect(),
            };
            let parent_grads = backward(&args);
            debug_assert_eq!(parent_grads.len(), parents.len());
            for (p, g) in parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.shape(), p.shape(), "gradient shape for parent");
                match grads.get_mut(&p.id()) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        grads.insert(p.id(), g);
                    }
                }
            }
        }
        if wanted.contains(&node.id()) {
            kept.insert(node.id(), grad);
        }
    }

    Ok(targets
        .iter()
        .map(|t| {
            kept.get(&t.id())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect())
}
