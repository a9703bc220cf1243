//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! Every op producing a tensor from inputs that require gradients records a
//! backward closure on the output node. Node ids grow monotonically, so the
//! reachable nodes sorted by descending id form a valid reverse topological
//! order: that sorted list is the [`Tape`] replayed by [`Tensor::backward`].

mod adam;
mod checkpoint;
mod conv;
mod norm;
mod ops;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::{conv_out_len, Conv2dSpec};
pub use norm::{RunningStats, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM, LAYER_NORM_EPS};

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::iter::Sum;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;

use crate::error::{shape_err, Error, Result};

/// Scalar type a tensor can hold. Training runs in `f32`; `f64` exists so
/// finite-difference checks can resolve gradients far below `f32` noise.
pub trait Element:
    Float + Default + fmt::Debug + fmt::Display + Sum + Send + Sync + 'static
{
    fn cast(v: f64) -> Self;
    fn wide(self) -> f64;

    /// `c = op(a)·op(b) + beta·c` on raw strided storage.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    fn cast(v: f64) -> Self {
        v as f32
    }
    fn wide(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    fn cast(v: f64) -> Self {
        v
    }
    fn wide(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// `c[m×n] (+)= op(a)[m×k] · op(b)[k×n]`, all row-major. With `a_t` the
/// slice `a` holds a `k×m` matrix, with `b_t` the slice `b` holds `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(T::zero());
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths checked above; strides describe in-bounds views.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any ops on the tape.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Gradients for each op input, `None` where the input needs none.
pub(crate) type InputGrads<T> = Vec<Option<Vec<T>>>;
type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> InputGrads<T>>;

struct GradFn<T: Element> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// Reference-counted handle to a tensor node. Cloning is cheap and shares
/// storage.
pub struct Tensor<T: Element = f32>(Rc<Node<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let head: Vec<_> = data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.op))
            .field("data", &head)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn make(
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        grad_fn: Option<GradFn<T>>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            grad_fn,
        }))
    }

    /// Leaf tensor that does not require gradients.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    pub fn leaf(data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err!("extents must be positive, got {shape:?}"));
        }
        if numel(shape) != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {} elements, buffer has {}",
                numel(shape),
                data.len()
            ));
        }
        Ok(Self::make(data, shape.to_vec(), requires_grad, None))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::make(vec![value; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::make(vec![value], vec![1], false, None)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::cast(v)).collect(), shape)
    }

    /// Builds the output of a differentiable op. The backward closure gets the
    /// output gradient and a per-input flag telling which gradients are wanted.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        op: &'static str,
        inputs: &[&Tensor<T>],
        backward: impl Fn(&[T], &[bool]) -> InputGrads<T> + 'static,
    ) -> Self {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "{op} produced a non-finite value"
        );
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if !track {
            return Self::make(data, shape, false, None);
        }
        let grad_fn = GradFn {
            op,
            inputs: inputs.iter().map(|&t| t.clone()).collect(),
            backward: Box::new(backward),
        };
        Self::make(data, shape, true, Some(grad_fn))
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
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Name of the op that produced this tensor, if it is on the tape.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.op)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    /// Mutable access for optimizers and running statistics. The shape is
    /// fixed; callers must not change the buffer length.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.borrow().iter().map(|v| v.wide()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let data = self.0.data.borrow();
        assert_eq!(data.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        data[0]
    }

    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(shape_err!(
                "cannot assign {} values to tensor of shape {:?}",
                data.len(),
                self.shape()
            ));
        }
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Copy of the data as a fresh leaf without gradient tracking.
    pub fn detach(&self) -> Self {
        Self::make(self.to_vec(), self.0.shape.clone(), false, None)
    }

    /// Nodes reachable from `self` that take part in differentiation, in
    /// reverse insertion order.
    pub fn tape(&self) -> Tape<T> {
        let mut nodes = Vec::new();
        if !self.requires_grad() {
            return Tape { nodes };
        }
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(t) = stack.pop() {
            if let Some(gf) = &t.0.grad_fn {
                for input in &gf.inputs {
                    if input.requires_grad() && seen.insert(input.id()) {
                        stack.push(input.clone());
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|n| std::cmp::Reverse(n.id()));
        Tape { nodes }
    }

    /// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate, so
    /// a second call without zeroing doubles them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "loss does not depend on any tensor that requires grad".into(),
            ));
        }
        let tape = self.tape();
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for node in &tape.nodes {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                        None => *slot = Some(g),
                    }
                }
                Some(gf) => {
                    let needs: Vec<bool> = gf.inputs.iter().map(|t| t.requires_grad()).collect();
                    let grads = (gf.backward)(&g, &needs);
                    debug_assert_eq!(grads.len(), gf.inputs.len(), "{}", gf.op);
                    for (input, grad) in gf.inputs.iter().zip(grads) {
                        let Some(grad) = grad else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(grad.len(), input.numel(), "{} grad length", gf.op);
                        match pending.get_mut(&input.id()) {
                            Some(acc) => {
                                acc.iter_mut().zip(&grad).for_each(|(a, &b)| *a = *a + b)
                            }
                            None => {
                                pending.insert(input.id(), grad);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Differentiable nodes reachable from a loss, ordered for the backward
/// sweep (descending creation id).
pub struct Tape<T: Element> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Element> Tape<T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.nodes.iter().map(|t| t.id()).collect()
    }

    /// Op names in traversal order; leaves report `"leaf"`.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .map(|t| t.op_name().unwrap_or("leaf"))
            .collect()
    }
}

/// `(outer, n, inner)` decomposition around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
