//! Dense row-major tensors with a reverse-mode tape.
//!
//! Every tensor is an immutable value behind an `Rc`. Operations on tensors
//! that require gradients record a node holding their parents and a backward
//! closure; [`Tensor::backward`] walks the recorded graph in reverse creation
//! order and accumulates gradients into the leaves.

mod conv;
mod elementwise;
pub mod io;
mod linalg;
mod norm;
mod shape_ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use conv::Conv2dSpec;
pub use norm::BatchNormStats;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        Self { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Inputs handed to a backward closure.
pub(crate) struct BackwardCtx<'a> {
    pub out: &'a [f64],
    pub grad: &'a [f64],
    /// Which parents actually need a gradient.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx) -> Vec<Option<Vec<f64>>>>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.0.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("data", &preview)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::raw(shape.to_vec(), data, false))
    }

    /// Leaf tensor that collects gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::raw(t.0.shape.clone(), t.into_data(), true))
    }

    fn raw(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            node: None,
        }))
    }

    /// Builds the output of an operation, recording a node when any parent
    /// participates in differentiation and recording is enabled.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&BackwardCtx) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let record = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let node = record.then(|| Node {
            parents,
            backward: Box::new(backward),
        });
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data,
            requires_grad: record,
            grad: RefCell::new(None),
            node,
        }))
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(vec![], vec![v], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::raw(shape.to_vec(), vec![0.0; numel(shape)], false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::raw(shape.to_vec(), vec![1.0; numel(shape)], false)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::raw(shape.to_vec(), vec![v; numel(shape)], false)
    }

    pub fn ones_like(&self) -> Self {
        Self::ones(self.shape())
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::raw(vec![n], data, false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    /// Consumes the handle, cloning only if the storage is shared.
    pub fn into_data(self) -> Vec<f64> {
        match Rc::try_unwrap(self.0) {
            Ok(inner) => inner.data,
            Err(rc) => rc.data.clone(),
        }
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Copy with gradient tracking cut.
    pub fn detach(&self) -> Self {
        Self::raw(self.0.shape.clone(), self.0.data.clone(), false)
    }

    pub fn grad(&self) -> Option<Ref<'_, Option<Vec<f64>>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(g)
        } else {
            None
        }
    }

    /// Gradient as an owned tensor, or zeros when none accumulated yet.
    pub fn grad_tensor(&self) -> Tensor {
        match self.0.grad.borrow().as_ref() {
            Some(g) => Tensor::raw(self.0.shape.clone(), g.clone(), false),
            None => Tensor::zeros(self.shape()),
        }
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Runs reverse-mode differentiation from a scalar.
    ///
    /// Leaves accumulate into their gradient slot, so repeated calls add up
    /// until [`Tensor::zero_grad`] is called.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let mut seen = HashSet::new();
        let mut order = Vec::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(node) = &t.0.node {
                stack.extend(node.parents.iter().cloned());
            }
            order.push(t);
        }
        // Parents are always created before their consumers.
        order.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for t in order {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.0.node {
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(node) => {
                    let needs: Vec<bool> = node.parents.iter().map(|p| p.requires_grad()).collect();
                    let ctx = BackwardCtx {
                        out: &t.0.data,
                        grad: &g,
                        needs: &needs,
                    };
                    let grads = (node.backward)(&ctx);
                    debug_assert_eq!(grads.len(), node.parents.len());
                    for (p, pg) in node.parents.iter().zip(grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match pending.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::Shape(format!("axis {axis} out of range for rank {rank}")))
    } else {
        Ok(())
    }
}
