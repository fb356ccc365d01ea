//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every differentiable operation builds a node in an implicit DAG; calling
//! [`Tensor::backward`] on a scalar output walks the graph in reverse
//! topological order and accumulates gradients into every reachable tensor
//! that requires them. Fan-out is additive: reusing a tensor in two branches
//! sums the branch gradients.
//!
//! Graph construction and the backward pass are single-threaded; a `Tensor`
//! is not `Send` and must not be shared mutably across threads.

mod gradcheck;
mod ops;

pub(crate) mod kernel;

pub use gradcheck::grad_check;

use std::cell::{Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;
use thiserror::Error;

/// Float type the tensor machinery is generic over. Training runs in `f32`;
/// gradient verification runs in `f64` for headroom.
pub trait Scalar: Float + fmt::Debug + fmt::Display + 'static {
    fn erf(self) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: shapes {lhs:?} and {rhs:?} are not broadcast-compatible")]
    Broadcast {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of bounds for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: expected rank-{expected} tensor, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of bounds for axis {axis} with size {size}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        axis: usize,
        size: usize,
    },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarBackward { shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type TensorResult<T> = Result<Tensor<T>, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) struct BackwardArgs<'a, T: Scalar> {
    pub out_data: &'a [T],
    pub out_grad: &'a [T],
    pub parents: &'a [Tensor<T>],
}

struct BackwardStep<T: Scalar> {
    parents: Vec<Tensor<T>>,
    run: Box<dyn Fn(&BackwardArgs<'_, T>)>,
}

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    needs_grad: bool,
    is_param: bool,
    grad: RefCell<Option<Vec<T>>>,
    step: Option<BackwardStep<T>>,
}

/// Shared handle to a tensor value (and, when it requires gradients, its
/// position in the autodiff graph). Cloning is cheap and aliases storage.
pub struct Tensor<T: Scalar> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.is_param)
            .finish()
    }
}

pub(crate) fn check_data_len<T>(shape: &[usize], data: &[T]) -> Result<(), TensorError> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(TensorError::DataLength {
            len: data.len(),
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn build(
        shape: Vec<usize>,
        data: Vec<T>,
        is_param: bool,
        step: Option<BackwardStep<T>>,
    ) -> Self {
        let needs_grad = is_param
            || step
                .as_ref()
                .map(|s| s.parents.iter().any(|p| p.node.needs_grad))
                .unwrap_or(false);
        // Ops whose inputs carry no gradient don't need a graph record at all.
        let step = if needs_grad { step } else { None };
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                needs_grad,
                is_param,
                grad: RefCell::new(None),
                step,
            }),
        }
    }

    /// Constant (non-trainable) tensor from raw data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> TensorResult<T> {
        check_data_len(&shape, &data)?;
        Ok(Self::build(shape, data, false, None))
    }

    /// Trainable leaf tensor; participates in backward().
    pub fn param(shape: Vec<usize>, data: Vec<T>) -> TensorResult<T> {
        check_data_len(&shape, &data)?;
        Ok(Self::build(shape, data, true, None))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::build(shape, vec![T::zero(); n], false, None)
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self::build(shape, vec![value; n], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![1], vec![value], false, None)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        run: impl Fn(&BackwardArgs<'_, T>) + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self::build(
            shape,
            data,
            false,
            Some(BackwardStep {
                parents,
                run: Box::new(run),
            }),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_param
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.node.needs_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    /// Mutable access to a leaf tensor's storage (parameter updates).
    /// Interior graph nodes must never be mutated.
    pub fn leaf_data_mut(&self) -> RefMut<'_, Vec<T>> {
        assert!(
            self.node.step.is_none(),
            "leaf_data_mut called on a non-leaf tensor"
        );
        self.node.data.borrow_mut()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let data = self.node.data.borrow();
        assert_eq!(
            data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.node.shape
        );
        data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Detached copy: same values, no graph history, not trainable.
    pub fn detach(&self) -> Tensor<T> {
        Self::build(self.node.shape.clone(), self.to_vec(), false, None)
    }

    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        if !self.node.needs_grad {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta.iter()) {
                    *gi = *gi + *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Like [`accumulate_grad`] but lets the op write into the buffer directly.
    pub(crate) fn with_grad_buffer(&self, f: impl FnOnce(&mut [T])) {
        if !self.node.needs_grad {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.numel()]);
        f(buf);
    }

    /// Reverse-mode gradient pass from a scalar output.
    pub fn backward(&self) -> Result<(), TensorError> {
        self.backward_with_seed(T::one())
    }

    /// Backward with a custom seed gradient (e.g. 1/k for micro-batch averaging).
    pub fn backward_with_seed(&self, seed: T) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward {
                shape: self.node.shape.to_vec(),
            });
        }
        if !self.node.needs_grad {
            return Ok(());
        }
        self.accumulate_grad(&[seed]);
        let order = topo_order(self);
        for tensor in order.iter().rev() {
            let node = &*tensor.node;
            let Some(step) = node.step.as_ref() else {
                continue;
            };
            // A visited needs-grad node always has a populated grad buffer by
            // the time we reach it (reverse topological order).
            let grad_ref = node.grad.borrow();
            let Some(out_grad) = grad_ref.as_ref() else {
                continue;
            };
            let data_ref = node.data.borrow();
            (step.run)(&BackwardArgs {
                out_data: &data_ref,
                out_grad,
                parents: &step.parents,
            });
        }
        // Interior grads are dead after the pass; keeping them would only
        // grow memory across training steps.
        for tensor in order.iter() {
            if !tensor.node.is_param && tensor.node.id != self.node.id {
                tensor.zero_grad();
            }
        }
        Ok(())
    }
}

/// Iterative post-order DFS over parent edges; returns topological order
/// (parents before children). Restricted to nodes that need gradients.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order: Vec<Tensor<T>> = Vec::new();
    let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
    // (tensor, next-parent index) emulates recursion.
    let mut stack: Vec<(Tensor<T>, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.node.id);
    while let Some((tensor, idx)) = stack.pop() {
        let parents: Option<&Vec<Tensor<T>>> = tensor.node.step.as_ref().map(|s| &s.parents);
        let n_parents = parents.map_or(0, |p| p.len());
        if idx < n_parents {
            let parent = parents.unwrap()[idx].clone();
            stack.push((tensor, idx + 1));
            if parent.node.needs_grad && visited.insert(parent.node.id) {
                stack.push((parent, 0));
            }
        } else {
            order.push(tensor);
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        let err = Tensor::<f64>::from_vec(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { .. }));
    }

    #[test]
    fn fan_out_grads_sum() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let x = Tensor::param(vec![2], vec![3.0_f64, -1.5]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum_all().unwrap();
        y.backward().unwrap();
        let g = x.grad().unwrap();
        assert!((g[0] - 7.0).abs() < 1e-12);
        assert!((g[1] - (-2.0)).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::param(vec![2], vec![1.0_f64, 2.0]).unwrap();
        let y = x.mul(&x).unwrap();
        assert!(matches!(
            y.backward(),
            Err(TensorError::NonScalarBackward { .. })
        ));
    }

    #[test]
    fn grads_populated_for_all_reachable_params() {
        let a = Tensor::param(vec![2], vec![1.0_f64, 2.0]).unwrap();
        let b = Tensor::param(vec![2], vec![3.0_f64, 4.0]).unwrap();
        let loss = a.mul(&b).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert!(a.grad().is_some());
        assert!(b.grad().is_some());
    }

    #[test]
    fn constant_branch_is_pruned_from_graph() {
        let c = Tensor::from_vec(vec![2], vec![1.0_f64, 2.0]).unwrap();
        let d = c.mul(&c).unwrap();
        assert!(!d.needs_grad());
    }

    #[test]
    fn detach_cuts_history() {
        let x = Tensor::param(vec![2], vec![1.0_f64, 2.0]).unwrap();
        let y = x.mul(&x).unwrap().detach();
        let loss = y.sum_all().unwrap();
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }
}
