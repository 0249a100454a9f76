//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every operation builds a node in an acyclic graph; `backward` on a scalar
//! walks the graph once in reverse topological order and accumulates
//! gradients additively into `requires_grad` leaves (plus explicitly
//! retained nodes). Tensor data is immutable after creation — parameter
//! updates produce fresh leaves.

pub mod conv;
mod elementwise;
pub mod gradcheck;
mod matmul;
mod norm;
mod reduce;
mod resize;
mod shape_ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// RAII guard that disables graph construction on the current thread.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        NoGradGuard { prev }
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

/// Run `f` without recording the computation graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = NoGradGuard::new();
    f()
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Context handed to a backward rule: the op's inputs, its forward output,
/// and the incoming gradient.
pub struct GradCtx<'a, T: Scalar> {
    pub inputs: &'a [Tensor<T>],
    pub output: &'a [T],
    pub output_shape: &'a [usize],
    pub grad: &'a [T],
}

/// Backward rule for one operation. Returns one gradient per input, in
/// input order; `None` for inputs that do not need a gradient.
pub trait GradFn<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &GradCtx<'_, T>) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Scalar> {
    inputs: Vec<Tensor<T>>,
    grad_fn: Arc<dyn GradFn<T>>,
}

struct TensorInner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    node: Option<Node<T>>,
    requires_grad: bool,
    retains_grad: AtomicBool,
    grad: RwLock<Option<Vec<T>>>,
}

/// A dense n-dimensional array, cheaply clonable (shared storage).
pub struct Tensor<T: Scalar> {
    inner: Arc<TensorInner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor<{}>(id={}, shape={:?}, op={})",
            T::DTYPE,
            self.inner.id,
            self.inner.shape,
            self.op_name()
        )
    }
}

pub(crate) fn check_shape_len<T: Scalar>(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::Dimension("tensor shape requires >= 1 dims".into()));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::Dimension(format!(
            "shape {:?} implies {} elements, data has {}",
            shape, numel, len
        )));
    }
    let _ = std::marker::PhantomData::<T>;
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<T>,
        node: Option<Node<T>>,
        requires_grad: bool,
    ) -> Self {
        Tensor {
            inner: Arc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                node,
                requires_grad,
                retains_grad: AtomicBool::new(false),
                grad: RwLock::new(None),
            }),
        }
    }

    /// Leaf tensor from raw row-major data.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape_len::<T>(shape, data.len())?;
        Ok(Self::new_inner(shape.to_vec(), data, None, false))
    }

    pub fn scalar(v: T) -> Self {
        Self::new_inner(vec![1], vec![v], None, false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![T::zero(); numel], None, false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![v; numel], None, false)
    }

    /// Standard-normal leaf; samples in f64 so f32/f64 share RNG streams.
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let x: f64 = StandardNormal.sample(rng);
                T::from_f64_c(x)
            })
            .collect();
        Self::new_inner(shape.to_vec(), data, None, false)
    }

    /// Uniform leaf on [lo, hi), sampled in f64.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64_c(rng.gen_range(lo..hi)))
            .collect();
        Self::new_inner(shape.to_vec(), data, None, false)
    }

    /// Mark this leaf as a differentiable parameter (builder style).
    pub fn requires_grad(self, flag: bool) -> Self {
        assert!(
            self.inner.node.is_none(),
            "requires_grad can only be toggled on leaves"
        );
        // Sole owner at this point in builder usage; rebuild otherwise.
        match Arc::try_unwrap(self.inner) {
            Ok(mut inner) => {
                inner.requires_grad = flag;
                Tensor {
                    inner: Arc::new(inner),
                }
            }
            Err(arc) => {
                let t = Tensor { inner: arc };
                Self::new_inner(t.shape().to_vec(), t.data().to_vec(), None, flag)
            }
        }
    }

    /// Build an op node. `requires_grad` of the output follows the inputs
    /// unless graph recording is disabled on this thread.
    pub fn from_op(
        data: Vec<T>,
        shape: &[usize],
        inputs: &[Tensor<T>],
        grad_fn: Arc<dyn GradFn<T>>,
    ) -> Self {
        let track = grad_enabled() && inputs.iter().any(|t| t.inner.requires_grad);
        let node = track.then(|| Node {
            inputs: inputs.to_vec(),
            grad_fn,
        });
        Self::new_inner(shape.to_vec(), data, node, track)
    }

    /// Public custom-op entry point: forward data computed by the caller,
    /// backward supplied as a [`GradFn`].
    pub fn custom_op(
        data: Vec<T>,
        shape: &[usize],
        inputs: &[Tensor<T>],
        grad_fn: Arc<dyn GradFn<T>>,
    ) -> Result<Self> {
        check_shape_len::<T>(shape, data.len())?;
        Ok(Self::from_op(data, shape, inputs, grad_fn))
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn op_name(&self) -> &'static str {
        match &self.inner.node {
            Some(n) => n.grad_fn.name(),
            None => "leaf",
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() requires a single-element tensor");
        self.inner.data[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.read().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.write().unwrap() = None;
    }

    /// Request that backward store this (non-leaf) node's gradient.
    pub fn retain_grad(&self) {
        self.inner.retains_grad.store(true, Ordering::Relaxed);
    }

    /// Same data, cut loose from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Self::new_inner(self.shape().to_vec(), self.data().to_vec(), None, false)
    }

    /// Cast elementwise through f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|&v| U::from_f64_c(v.to_f64_c())).collect();
        Tensor::new_inner(self.shape().to_vec(), data, None, false)
    }

    fn accumulate_slot(&self, g: &[T]) {
        let mut slot = self.inner.grad.write().unwrap();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode pass from a scalar. Visits each reachable node exactly
    /// once in reverse topological order; leaf gradients accumulate
    /// additively across calls until `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Argument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.requires_grad {
            return Err(Error::Argument(
                "backward on a tensor with no grad-tracked ancestors".into(),
            ));
        }

        let order = topo_order(self);
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            if t.inner.retains_grad.load(Ordering::Relaxed)
                || (t.is_leaf() && t.inner.requires_grad)
            {
                t.accumulate_slot(&g);
            }
            let Some(node) = &t.inner.node else { continue };
            let ctx = GradCtx {
                inputs: &node.inputs,
                output: t.data(),
                output_shape: t.shape(),
                grad: &g,
            };
            let input_grads = node.grad_fn.backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !inp.inner.requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.len(), inp.numel(), "grad size for {}", node.grad_fn.name());
                match grads.get_mut(&inp.id()) {
                    Some(acc) => {
                        for (a, &b) in acc.iter_mut().zip(&ig) {
                            *a += b;
                        }
                    }
                    None => {
                        grads.insert(inp.id(), ig);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Iterative post-order DFS: parents precede children in the result, so the
/// reversed list is a reverse topological order of the graph.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // (tensor, next-child index)
    let mut stack: Vec<(Tensor<T>, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((t, idx)) = stack.pop() {
        let n_children = t.inner.node.as_ref().map_or(0, |n| n.inputs.len());
        if idx < n_children {
            let child = t.inner.node.as_ref().unwrap().inputs[idx].clone();
            stack.push((t, idx + 1));
            if child.inner.requires_grad && visited.insert(child.id()) {
                stack.push((child, 0));
            }
        } else {
            order.push(t);
        }
    }
    order
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_invariants() {
        let t = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.numel(), 4);
        assert!(Tensor::<f64>::from_vec(vec![1.0], &[2]).is_err());
        assert!(Tensor::<f64>::from_vec(vec![1.0], &[]).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::<f64>::ones(&[2]).requires_grad(true);
        assert!(x.backward().is_err());
    }

    #[test]
    fn grad_accumulates_additively_across_passes() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2])
            .unwrap()
            .requires_grad(true);
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        let g1 = x.grad().unwrap();
        assert_eq!(g1, vec![2.0, 4.0]);
        loss.backward().unwrap();
        let g2 = x.grad().unwrap();
        assert_eq!(g2, vec![4.0, 8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = Tensor::<f64>::ones(&[3]).requires_grad(true);
        let y = no_grad(|| x.mul(&x).unwrap());
        assert!(y.is_leaf());
        assert!(!y.requires_grad_flag());
    }

    #[test]
    fn retain_grad_on_interior_node() {
        let x = Tensor::<f64>::from_vec(vec![3.0], &[1])
            .unwrap()
            .requires_grad(true);
        let y = x.mul(&x).unwrap();
        y.retain_grad();
        let loss = y.mul(&y).unwrap().sum_all();
        loss.backward().unwrap();
        // d(y^2)/dy = 2y = 18
        assert_eq!(y.grad().unwrap(), vec![18.0]);
        // gradients otherwise live only on leaves
        let z = x.mul(&x).unwrap();
        let l2 = z.sum_all();
        l2.backward().unwrap();
        assert!(z.grad().is_none());
    }
}
