//! Dense tensors with a recorded computation graph for reverse-mode
//! differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted value. Operations on
//! tensors that require gradients record their parents and a backward rule;
//! [`Tensor::backward`] walks that graph once in reverse topological order
//! and returns the total derivative for every leaf that asked for one.

mod element;
pub mod io;
mod ops;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

pub use element::{DType, Element};
pub(crate) use element::gemm;
pub use ops::{
    add, bilinear_resize, conv2d, elementwise_mean, mse_loss, relu, reshape, scale, sum,
    Padding,
};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Backward rule of a recorded operation.
///
/// Returns one entry per parent: the gradient of the loss with respect to
/// that parent, or `None` when the parent does not require one.
pub(crate) trait Backward<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(&self, upstream: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>>;
}

struct Origin<T: Element> {
    op: Box<dyn Backward<T>>,
    parents: Vec<Tensor<T>>,
}

struct Node<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    origin: Option<Origin<T>>,
    consumed: AtomicBool,
}

#[derive(Clone)]
pub struct Tensor<T: Element = f64> {
    node: Arc<Node<T>>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.node.shape)
            .field("dtype", &T::DTYPE.name())
            .field("requires_grad", &self.node.requires_grad);
        if let Some(origin) = &self.node.origin {
            d.field("op", &origin.op.name());
        }
        if self.numel() <= 16 {
            d.field("data", &self.node.data);
        }
        d.finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::shape("rank-0 shapes are not supported; use [1]"));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(Error::shape(format!(
            "extent {pos} of shape {shape:?} is zero"
        )));
    }
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::shape(format!(
            "shape {shape:?} holds {expected} values but {len} were given"
        )));
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), Arc::new(data), false))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let len = shape.iter().product();
        Self::from_vec(shape, vec![value; len])
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![1], Arc::new(vec![value]), false)
    }

    fn leaf(shape: Vec<usize>, data: Arc<Vec<T>>, requires_grad: bool) -> Self {
        Tensor {
            node: Arc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                origin: None,
                consumed: AtomicBool::new(false),
            }),
        }
    }

    /// Records the result of an operation. The backward rule is kept only
    /// when at least one parent requires a gradient.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        op: impl Backward<T> + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let origin = requires_grad.then(|| Origin {
            op: Box::new(op),
            parents,
        });
        Tensor {
            node: Arc::new(Node {
                id: next_id(),
                shape,
                data: Arc::new(data),
                requires_grad,
                origin,
                consumed: AtomicBool::new(false),
            }),
        }
    }

    /// A new leaf sharing this tensor's values, with the given gradient flag.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::leaf(self.node.shape.clone(), self.node.data.clone(), requires_grad)
    }

    /// A new leaf sharing this tensor's values, cut from any recorded graph.
    pub fn detach(&self) -> Self {
        self.with_requires_grad(false)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.origin.is_none()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data() {
            [v] => Ok(*v),
            _ => Err(Error::shape(format!(
                "item() needs exactly one element, shape is {:?}",
                self.shape()
            ))),
        }
    }

    /// `(batch, channels, height, width)` of an order-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [n, c, h, w] => Ok((n, c, h, w)),
            ref s => Err(Error::shape(format!("expected an order-4 NCHW tensor, got {s:?}"))),
        }
    }

    pub fn sum_all(&self) -> T {
        self.data().iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "cannot compare {:?} with {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max))
    }

    /// Element-type conversion; the result is a leaf.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self
            .data()
            .iter()
            .map(|v| U::from_f64_lossy(v.as_f64()))
            .collect();
        Tensor::leaf(self.shape().to_vec(), Arc::new(data), false)
    }

    /// Reverse-mode pass from a one-element root.
    ///
    /// Each requires-grad leaf reachable from `self` receives the sum of the
    /// derivatives over every path. A recorded graph can be traversed once.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(Error::Backward(format!(
                "root must be a scalar, got shape {:?}",
                self.shape()
            )));
        }
        self.propagate(vec![T::one()])
    }

    /// Reverse-mode pass from a root of any shape, seeded with `upstream`
    /// (the vector-Jacobian product with `upstream`).
    pub fn backward_with(&self, upstream: &Tensor<T>) -> Result<Gradients<T>> {
        if upstream.shape() != self.shape() {
            return Err(Error::Backward(format!(
                "upstream shape {:?} does not match root shape {:?}",
                upstream.shape(),
                self.shape()
            )));
        }
        self.propagate(upstream.data().to_vec())
    }

    fn propagate(&self, seed: Vec<T>) -> Result<Gradients<T>> {
        if self.node.consumed.swap(true, Ordering::SeqCst) {
            return Err(Error::Backward(
                "graph already traversed; record a new forward pass".into(),
            ));
        }
        let mut grads = Gradients {
            by_id: HashMap::new(),
        };
        if !self.requires_grad() {
            return Ok(grads);
        }

        let order = topological_order(self);
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), seed);

        for tensor in order.iter().rev() {
            let Some(upstream) = pending.remove(&tensor.id()) else {
                continue;
            };
            match &tensor.node.origin {
                None => {
                    grads.by_id.insert(tensor.id(), upstream);
                }
                Some(origin) => {
                    let parent_grads = origin.op.backward(&upstream, &origin.parents);
                    debug_assert_eq!(parent_grads.len(), origin.parents.len());
                    for (parent, grad) in origin.parents.iter().zip(parent_grads) {
                        let Some(grad) = grad else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(grad.len(), parent.numel(), "{}", origin.op.name());
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a = *a + *g),
                            None => {
                                pending.insert(parent.id(), grad);
                            }
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Post-order of the requires-grad subgraph rooted at `root`; every node
/// appears once and after all of its parents.
fn topological_order<T: Element>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
    while let Some((tensor, expanded)) = stack.pop() {
        if expanded {
            order.push(tensor);
            continue;
        }
        if !visited.insert(tensor.id()) {
            continue;
        }
        stack.push((tensor.clone(), true));
        if let Some(origin) = &tensor.node.origin {
            for parent in origin.parents.iter().rev() {
                if parent.requires_grad() && !visited.contains(&parent.id()) {
                    stack.push((parent.clone(), false));
                }
            }
        }
    }
    order
}

/// Leaf gradients produced by [`Tensor::backward`].
#[derive(Debug, Default)]
pub struct Gradients<T: Element = f64> {
    by_id: HashMap<u64, Vec<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, leaf: &Tensor<T>) -> Option<&[T]> {
        self.by_id.get(&leaf.id()).map(Vec::as_slice)
    }

    pub fn take(&mut self, leaf: &Tensor<T>) -> Option<Vec<T>> {
        self.by_id.remove(&leaf.id())
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}
