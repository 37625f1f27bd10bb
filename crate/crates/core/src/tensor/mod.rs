//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value: every operation allocates a new node
//! that remembers its inputs and a closure mapping the output gradient to
//! input gradients. [`Tensor::backward`] walks the graph in reverse
//! topological order from a scalar root and accumulates gradients into every
//! node that requires them.
//!
//! Tensors are generic over the scalar type so the same graph can be
//! evaluated in `f32` for model math and `f64` for finite-difference checks.

mod kernels;
mod nn;
mod ops;
mod rng;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

pub use nn::{Conv2dGeometry, ResizeMode};
pub use rng::Rng;

/// Real scalar usable as tensor element.
pub trait Scalar:
    num_traits::Float
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Inputs handed to a backward closure.
pub struct BackwardCtx<'a, T: Scalar> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [T],
    /// This node's forward output.
    pub output: &'a [T],
    pub inputs: &'a [Tensor<T>],
}

/// Maps an output gradient to one optional gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    inputs: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

#[derive(Clone)]
pub struct Tensor<T: Scalar = f32>(Arc<Node<T>>);

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward closures on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn build(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        inputs: Vec<Tensor<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            inputs,
            backward,
        }))
    }

    /// Constant tensor that never receives a gradient.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("new", format!("zero extent in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::dim(
                "new",
                format!(
                    "shape {shape:?} needs {} elements, got {}",
                    numel(shape),
                    data.len()
                ),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, false, Vec::new(), None))
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(t.into_leaf(true))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Self::build(Vec::new(), vec![v], false, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::build(shape.to_vec(), vec![v; numel(shape)], false, Vec::new(), None)
    }

    /// A detached copy that is a leaf with the requested gradient flag.
    pub fn into_leaf(self, requires_grad: bool) -> Self {
        let data = match Arc::try_unwrap(self.0) {
            Ok(node) => (node.shape, node.data),
            Err(shared) => (shared.shape.clone(), shared.data.clone()),
        };
        Self::build(data.0, data.1, requires_grad, Vec::new(), None)
    }

    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, Vec::new(), None)
    }

    /// Records a new node produced by a custom operation.
    ///
    /// The closure is dropped when no input requires a gradient or when
    /// recording is disabled with [`no_grad`].
    pub fn from_op<F>(shape: Vec<usize>, data: Vec<T>, inputs: Vec<Tensor<T>>, backward: F) -> Self
    where
        F: Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    {
        let requires = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if requires {
            Self::build(shape, data, true, inputs, Some(Box::new(backward)))
        } else {
            Self::build(shape, data, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
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

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn item(&self) -> T {
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Re-interpret the data in a different precision as a fresh leaf.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.0.data.iter().map(|v| U::of(v.as_f64())).collect();
        Tensor::<U>::build(self.0.shape.clone(), data, self.0.requires_grad && self.0.inputs.is_empty(), Vec::new(), None)
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // iterative post-order DFS over the requires_grad subgraph
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id(), ());
        while let Some((node, next)) = stack.pop() {
            if next < node.0.inputs.len() {
                let child = node.0.inputs[next].clone();
                stack.push((node, next + 1));
                if child.requires_grad() && visited.insert(child.id(), ()).is_none() {
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            if let Some(f) = &node.0.backward {
                let ctx = BackwardCtx {
                    grad: &g,
                    output: &node.0.data,
                    inputs: &node.0.inputs,
                };
                let grads = f(&ctx);
                debug_assert_eq!(grads.len(), node.0.inputs.len());
                for (input, ig) in node.0.inputs.iter().zip(grads) {
                    let Some(ig) = ig else { continue };
                    if !input.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(ig.len(), input.numel());
                    match pending.get_mut(&input.id()) {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += *b),
                        None => {
                            pending.insert(input.id(), ig);
                        }
                    }
                }
            }
            let mut slot = node.0.grad.lock().expect("grad lock poisoned");
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data().iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}
