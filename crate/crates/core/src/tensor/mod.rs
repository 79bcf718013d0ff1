//! Minimal reverse-mode autodiff over dense f64 arrays.
//!
//! Design goals, in order: correct gradients (finite-difference checked),
//! bitwise-deterministic execution regardless of thread scheduling, and
//! enough speed for desk-scale training. Graphs are built per step and
//! dropped after backward; parameters are leaf tensors whose storage is
//! swapped between steps.
//!
//! Backward functions receive the upstream gradient as a `Tensor` and are
//! written in terms of other ops wherever second-order gradients can flow
//! (everything on the discriminator path, see `backward_with`), so
//! grad-of-grad works for the R1 penalty. Ops whose second derivative is
//! never needed use raw-kernel backwards that emit detached tensors.

mod conv;
mod custom;
mod ops;

pub use custom::PlanePoints;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// While a guard is alive, newly created tensors record no graph edges.
pub struct NoGradGuard;

impl NoGradGuard {
    pub fn new() -> Self {
        NO_GRAD_DEPTH.with(|c| c.set(c.get() + 1));
        NoGradGuard
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|c| c.set(c.get() - 1));
    }
}

pub fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|c| c.get() == 0)
}

/// Runs `f` with gradient recording disabled.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _g = NoGradGuard::new();
    f()
}

type BackwardFn = Box<dyn Fn(&Tensor, &[Tensor]) -> Vec<Option<Tensor>>>;

struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Rc<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Dense f64 tensor; cheap to clone (shared storage + graph node).
#[derive(Clone)]
pub struct Tensor(Rc<TensorInner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor(Rc::new(TensorInner {
            id: next_id(),
            shape: shape.to_vec(),
            data: RefCell::new(Rc::new(data)),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_vec(shape, vec![v; shape.iter().product()])
    }

    /// Leaf parameter: participates in gradient computation.
    pub fn leaf(shape: &[usize], data: Vec<f64>) -> Tensor {
        let t = Tensor::from_vec(shape, data);
        t.requires_grad()
    }

    pub fn requires_grad(self) -> Tensor {
        if self.0.requires_grad {
            return self;
        }
        Tensor(Rc::new(TensorInner {
            id: self.0.id,
            shape: self.0.shape.clone(),
            data: RefCell::new(self.0.data.borrow().clone()),
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub(crate) fn make(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let track = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        Tensor(Rc::new(TensorInner {
            id: next_id(),
            shape,
            data: RefCell::new(Rc::new(data)),
            requires_grad: track,
            parents: if track { parents } else { Vec::new() },
            backward: if track { Some(backward) } else { None },
        }))
    }

    /// New tensor sharing storage with a different shape (element count equal).
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.len(),
            "reshape {:?} -> {:?}",
            self.shape(),
            shape
        );
        let data = self.0.data.borrow().clone();
        let track = grad_enabled() && self.0.requires_grad;
        let src_shape = self.shape().to_vec();
        Tensor(Rc::new(TensorInner {
            id: next_id(),
            shape: shape.to_vec(),
            data: RefCell::new(data),
            requires_grad: track,
            parents: if track { vec![self.clone()] } else { Vec::new() },
            backward: if track {
                Some(Box::new(move |g: &Tensor, _p: &[Tensor]| {
                    vec![Some(g.reshape(&src_shape))]
                }))
            } else {
                None
            },
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.0.shape.len(), 2, "expected 2-d tensor");
        self.0.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.0.shape.len(), 2, "expected 2-d tensor");
        self.0.shape[1]
    }

    pub fn needs_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Shared handle to the storage (cheap; no copy).
    pub fn data(&self) -> Rc<Vec<f64>> {
        self.0.data.borrow().clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().as_ref().clone()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data.borrow()[0]
    }

    /// Same values, no graph history.
    pub fn detach(&self) -> Tensor {
        Tensor(Rc::new(TensorInner {
            id: next_id(),
            shape: self.0.shape.clone(),
            data: RefCell::new(self.0.data.borrow().clone()),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Replaces the storage of a leaf in place (copy-on-write against any
    /// graph or EMA snapshot still holding the old buffer).
    pub fn set_data(&self, f: impl FnOnce(&mut [f64])) {
        let mut slot = self.0.data.borrow_mut();
        let v = Rc::make_mut(&mut slot);
        f(v.as_mut_slice());
    }

    pub fn assign(&self, values: &[f64]) {
        assert_eq!(values.len(), self.len());
        self.set_data(|d| d.copy_from_slice(values));
    }
}

/// Gradients of one backward pass, keyed by tensor identity.
pub struct Gradients {
    map: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.map.get(&t.id())
    }

    /// Gradient w.r.t. `t`, zeros when nothing flowed.
    pub fn wrt(&self, t: &Tensor) -> Tensor {
        match self.map.get(&t.id()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.shape()),
        }
    }
}

/// Reverse-mode sweep from a scalar `root`.
///
/// With `create_graph` the produced gradients are themselves recorded, so a
/// second backward through them yields exact second-order gradients.
pub fn backward_with(root: &Tensor, create_graph: bool) -> Gradients {
    assert_eq!(root.len(), 1, "backward needs a scalar root");
    backward_seeded(root, &Tensor::scalar(1.0), create_graph)
}

pub fn backward(root: &Tensor) -> Gradients {
    backward_with(root, false)
}

pub fn backward_seeded(root: &Tensor, seed: &Tensor, create_graph: bool) -> Gradients {
    assert_eq!(seed.shape(), root.shape(), "seed shape mismatch");
    // Post-order DFS: parents appear before their consumers, so the reversed
    // list visits each node after all paths from the root reached it.
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: HashMap<u64, ()> = HashMap::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    while let Some((node, child_idx)) = stack.pop() {
        if child_idx == 0 {
            if visited.contains_key(&node.id()) {
                continue;
            }
            visited.insert(node.id(), ());
        }
        let parents = &node.0.parents;
        if child_idx < parents.len() {
            let next = parents[child_idx].clone();
            stack.push((node.clone(), child_idx + 1));
            if next.0.requires_grad && !visited.contains_key(&next.id()) {
                stack.push((next, 0));
            }
        } else {
            order.push(node);
        }
    }

    let guard = if create_graph { None } else { Some(NoGradGuard::new()) };
    let mut map: HashMap<u64, Tensor> = HashMap::new();
    map.insert(root.id(), seed.clone());
    for node in order.iter().rev() {
        let Some(out_grad) = map.get(&node.id()).cloned() else {
            continue;
        };
        let Some(back) = node.0.backward.as_ref() else {
            continue;
        };
        let parent_grads = back(&out_grad, &node.0.parents);
        debug_assert_eq!(parent_grads.len(), node.0.parents.len());
        for (parent, grad) in node.0.parents.iter().zip(parent_grads) {
            let Some(grad) = grad else { continue };
            if !parent.0.requires_grad {
                continue;
            }
            debug_assert_eq!(
                grad.shape(),
                parent.shape(),
                "gradient shape mismatch for node {:?}",
                parent
            );
            match map.remove(&parent.id()) {
                Some(existing) => {
                    map.insert(parent.id(), existing.add(&grad));
                }
                None => {
                    map.insert(parent.id(), grad);
                }
            }
        }
    }
    drop(guard);
    Gradients { map }
}
