//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable n-dimensional array plus an optional autograd
//! edge recording how it was produced. Calling [`Tensor::backward`] on a
//! scalar result walks the recorded graph once, multiplies vector-Jacobian
//! closures along the way, and accumulates gradients into the leaves that
//! were created with `requires_grad` set.

mod conv;
mod ops;
mod resize;

pub use conv::{conv1d_pointwise, conv1d_same, conv2d, conv2d_strided};
pub use ops::concat;
pub use resize::bilinear_resize;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::alloc;
use crate::error::{Error, Result};
use crate::scalar::Real;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD: Cell<bool> = Cell::new(false);
}

/// Run `f` with tape recording disabled on this thread.
///
/// Ops called inside produce plain value tensors with no parents, so
/// inference and finite-difference probing pay no graph overhead.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let r = f();
    NO_GRAD.with(|c| c.set(prev));
    r
}

pub(crate) fn tape_enabled() -> bool {
    NO_GRAD.with(|c| !c.get())
}

/// Vector-Jacobian product: given the gradient of the loss w.r.t. this op's
/// output and the op's parents, return the gradient w.r.t. each parent
/// (`None` for parents that do not require gradients).
type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Edge<T: Real> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    edge: Option<Edge<T>>,
}

impl<T: Real> Drop for Inner<T> {
    fn drop(&mut self) {
        alloc::on_free(self.data.len() * std::mem::size_of::<T>());
    }
}

/// Immutable n-dimensional array, cheaply cloneable (shared buffer).
pub struct Tensor<T: Real> {
    inner: Arc<Inner<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Real> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::BadShape {
            op,
            shape: shape.to_vec(),
            reason: "dimensions must be positive".into(),
        });
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::BadShape {
            op,
            shape: shape.to_vec(),
            reason: format!("shape wants {numel} elements, data has {len}"),
        });
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    fn build(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        edge: Option<Edge<T>>,
    ) -> Tensor<T> {
        alloc::on_alloc(data.len() * std::mem::size_of::<T>());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                edge,
            }),
        }
    }

    /// Constant leaf tensor. Fails if the shape has zero dims or does not
    /// match the data length.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Tensor<T>> {
        check_shape("tensor", &shape, data.len())?;
        Ok(Self::build(shape, data, false, None))
    }

    /// Leaf tensor that participates in gradient accumulation.
    pub fn variable(shape: Vec<usize>, data: Vec<T>) -> Result<Tensor<T>> {
        check_shape("tensor", &shape, data.len())?;
        Ok(Self::build(shape, data, true, None))
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor<T> {
        let n = shape.iter().product();
        Self::build(shape, vec![T::zero(); n], false, None)
    }

    pub fn full(shape: Vec<usize>, v: T) -> Tensor<T> {
        let n = shape.iter().product();
        Self::build(shape, vec![v; n], false, None)
    }

    pub fn scalar(v: T) -> Tensor<T> {
        Self::build(vec![1], vec![v], false, None)
    }

    /// Result of an op. Records an autograd edge when the tape is enabled and
    /// any parent requires gradients; otherwise produces a plain value.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Tensor<T> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let track = tape_enabled() && parents.iter().any(|p| p.inner.requires_grad);
        if track {
            Self::build(
                shape,
                data,
                true,
                Some(Edge {
                    parents,
                    backward: Box::new(backward),
                }),
            )
        } else {
            Self::build(shape, data, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::BadShape {
                op: "item",
                shape: self.shape().to_vec(),
                reason: "expected exactly one element".into(),
            });
        }
        Ok(self.inner.data[0])
    }

    /// Element at a full multi-index (row-major). Panics on out-of-range
    /// indices; intended for tests and small readers.
    pub fn at(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.rank(), "index rank mismatch");
        let mut off = 0;
        for (d, (&i, &s)) in idx.iter().zip(self.shape()).enumerate() {
            assert!(i < s, "index {i} out of range for dim {d} of size {s}");
            off = off * s + i;
        }
        self.inner.data[off]
    }

    /// Accumulated gradient of a leaf, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    /// Multiply the stored gradient in place (no-op when none is stored).
    pub fn scale_grad(&self, factor: T) {
        if let Some(g) = self.inner.grad.lock().unwrap().as_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.lock().unwrap();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every
    /// reachable `requires_grad` leaf (adding to anything already stored, so
    /// call [`Tensor::zero_grad`] between steps).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::BadShape {
                op: "backward",
                shape: self.shape().to_vec(),
                reason: "backward starts from a scalar".into(),
            });
        }
        if !self.inner.requires_grad {
            return Err(Error::InvalidArgument(
                "backward on a tensor with no gradient path".into(),
            ));
        }

        // Iterative post-order over the requires-grad subgraph.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(e) = &t.inner.edge {
                for p in &e.parents {
                    if p.inner.requires_grad && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.inner.edge {
                Some(e) => {
                    let pgrads = (e.backward)(&g, &e.parents);
                    debug_assert_eq!(pgrads.len(), e.parents.len());
                    for (p, pg) in e.parents.iter().zip(pgrads) {
                        let Some(pg) = pg else { continue };
                        if !p.inner.requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        grads
                            .entry(p.id())
                            .and_modify(|acc| {
                                for (a, &v) in acc.iter_mut().zip(&pg) {
                                    *a += v;
                                }
                            })
                            .or_insert(pg);
                    }
                }
                None => t.accumulate_grad(&g),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn backward_through_shared_node() {
        // y = (x*x) + (x*x) -> dy/dx = 4x
        let x = Tensor::variable(vec![1], vec![3.0f64]).unwrap();
        let sq = x.mul(&x).unwrap();
        let y = sq.add(&sq).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
    }

    #[test]
    fn grads_accumulate_until_cleared() {
        let x = Tensor::variable(vec![1], vec![2.0f64]).unwrap();
        x.mul(&x).unwrap().backward().unwrap();
        x.mul(&x).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn no_grad_suppresses_tape() {
        let x = Tensor::variable(vec![1], vec![2.0f64]).unwrap();
        let y = no_grad(|| x.mul(&x).unwrap());
        assert!(!y.requires_grad());
        assert!(y.backward().is_err());
    }

    #[test]
    fn backward_needs_scalar() {
        let x = Tensor::variable(vec![2], vec![1.0f64, 2.0]).unwrap();
        let y = x.add(&x).unwrap();
        assert!(y.backward().is_err());
    }
}
