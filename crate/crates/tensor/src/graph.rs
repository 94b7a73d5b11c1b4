//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every value produced during a forward pass together
//! with a closure that maps the gradient of that value back onto its
//! parents. Node ids grow monotonically, so reverse id order is a valid
//! topological order for the backward sweep.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

/// Dense, row-major, dynamically shaped `f64` array.
pub type Array = ArrayD<f64>;

/// Backward rule: receives the gradient of the node output and one flag per
/// parent telling whether that parent needs a gradient.
pub type BackwardFn = Box<dyn Fn(&Array, &[bool]) -> Vec<Option<Array>>>;

struct Node {
    value: Rc<Array>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Recording tape for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Array) -> Var<'_> {
        let id = self.push(Node {
            value: Rc::new(standard(value)),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var { graph: self, id }
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn leaf(&self, value: Array) -> Var<'_> {
        let id = self.push(Node {
            value: Rc::new(standard(value)),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        Var { graph: self, id }
    }

    /// Records a node computed outside the built-in op set.
    ///
    /// The closure must return one entry per parent; entries for parents
    /// whose flag is `false` may be `None`.
    pub fn custom<'g, F>(&'g self, parents: &[Var<'g>], value: Array, backward: F) -> Var<'g>
    where
        F: Fn(&Array, &[bool]) -> Vec<Option<Array>> + 'static,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| {
                assert!(std::ptr::eq(p.graph, self), "mixing vars from different graphs");
                nodes[p.id].requires_grad
            })
        };
        let id = self.push(Node {
            value: Rc::new(standard(value)),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            requires_grad,
        });
        Var { graph: self, id }
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(root.graph, self), "root belongs to another graph");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array>> = vec![None; root.id + 1];
        let root_value = &nodes[root.id].value;
        assert_eq!(root_value.len(), 1, "backward needs a scalar root");
        grads[root.id] = Some(Array::ones(root_value.raw_dim()));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape mismatch");
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by one backward sweep, indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the leaf did not influence the root.
    pub fn get(&self, var: Var<'_>) -> Option<&Array> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Array> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Array> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }
}

pub(crate) fn standard(value: Array) -> Array {
    if value.is_standard_layout() {
        value
    } else {
        value.as_standard_layout().into_owned()
    }
}

pub(crate) fn zeros(shape: &[usize]) -> Array {
    Array::zeros(IxDyn(shape))
}
