//! Dense 64-bit tensors with tape-based reverse-mode automatic differentiation.
//!
//! Tensors are reference-counted handles; the tape is the implicit DAG of
//! [`Node`]s hanging off each op result, ordered by creation id. Calling
//! [`Tensor::backward`] on a scalar walks reachable nodes once, newest first,
//! and accumulates gradients into every `requires_grad` leaf.
//!
//! The tape is single-threaded by design. Eval-style code paths should run
//! inside [`no_grad`] so no graph is retained.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};

pub mod ops;
pub mod serial;

pub(crate) use ops::Op;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// RAII guard disabling tape recording on the current thread.
pub struct NoGradGuard {
    prev: bool,
}

/// Disables gradient tracking until the returned guard is dropped.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Tensor>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    /// Row-major values. Shared between reshape views; mutated only through
    /// the designated in-place update used by optimizers.
    data: Rc<RefCell<Vec<f64>>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// Dense n-dimensional array of `f64` in row-major order.
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("tracked", &self.is_tracked())
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor rank must be at least 1"));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    fn from_parts(
        shape: Vec<usize>,
        data: Rc<RefCell<Vec<f64>>>,
        requires_grad: bool,
        node: Option<Node>,
    ) -> Tensor {
        debug_assert_eq!(
            shape.iter().product::<usize>(),
            data.borrow().len(),
            "shape/data length mismatch"
        );
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                node,
            }),
        }
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, node: Option<Node>) -> Tensor {
        #[cfg(debug_assertions)]
        if let Some(n) = &node {
            assert!(
                data.iter().all(|v| v.is_finite()),
                "non-finite value in output of op {}",
                n.op.name()
            );
        }
        Tensor::from_parts(shape, Rc::new(RefCell::new(data)), false, node)
    }

    /// Metadata-only view over an existing buffer (reshape).
    pub(crate) fn from_shared(
        shape: Vec<usize>,
        data: Rc<RefCell<Vec<f64>>>,
        node: Option<Node>,
    ) -> Tensor {
        Tensor::from_parts(shape, data, false, node)
    }

    /// Untracked leaf from raw data.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel = check_shape(shape)?;
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor::from_parts(
            shape.to_vec(),
            Rc::new(RefCell::new(data)),
            false,
            None,
        ))
    }

    /// Trainable leaf: gradients accumulate here during backward passes.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape: t.inner.shape.clone(),
                data: Rc::clone(&t.inner.data),
                requires_grad: true,
                grad: RefCell::new(None),
                node: None,
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_vec(vec![0.0; numel], shape).expect("zeros: valid shape required")
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_vec(vec![value; numel], shape).expect("full: valid shape required")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(vec![value], &[1]).expect("scalar")
    }

    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_vec(data, shape).expect("rand_uniform: valid shape required")
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when both handles refer to the same tensor instance.
    pub fn is_same(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// True when this tensor participates in the tape (leaf param or op result).
    pub fn is_tracked(&self) -> bool {
        self.inner.requires_grad || self.inner.node.is_some()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Designated in-place mutation hook for optimizer updates.
    ///
    /// Must not be called while the tensor participates in a live graph that
    /// has not been backpropagated yet.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Accumulated gradient as an untracked tensor of identical shape.
    pub fn grad(&self) -> Option<Tensor> {
        self.inner
            .grad
            .borrow()
            .as_ref()
            .map(|g| Tensor::from_vec(g.clone(), &self.inner.shape).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn data_rc(&self) -> Rc<RefCell<Vec<f64>>> {
        Rc::clone(&self.inner.data)
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.inner.node.as_ref()
    }

    /// Reverse-mode sweep from a scalar. Repeated calls without `zero_grad`
    /// accumulate into leaf gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if self.inner.node.is_none() {
            return Err(Error::invalid(
                "backward on a tensor with an empty tape (no recorded ops)",
            ));
        }

        // Collect reachable tracked tensors; ids increase monotonically with
        // creation order, so sorting by id descending is a reverse
        // topological order.
        let mut seen: HashSet<u64> = HashSet::new();
        let mut order: Vec<Tensor> = Vec::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(node) = t.node() {
                for input in &node.inputs {
                    if input.is_tracked() && !seen.contains(&input.id()) {
                        stack.push(input.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_by(|a, b| b.id().cmp(&a.id()));

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);

        for t in &order {
            let Some(gout) = grads.remove(&t.id()) else {
                continue;
            };
            if t.inner.requires_grad {
                let mut slot = t.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&gout) {
                            *a += g;
                        }
                    }
                    None => *slot = Some(gout.clone()),
                }
            }
            if let Some(node) = t.node() {
                let wants: Vec<bool> = node.inputs.iter().map(Tensor::is_tracked).collect();
                let input_grads = node.op.backward(&node.inputs, t, &gout, &wants)?;
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for (input, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    debug_assert_eq!(ig.len(), input.numel());
                    match grads.entry(input.id()) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (a, g) in e.get_mut().iter_mut().zip(&ig) {
                                *a += g;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(ig);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
