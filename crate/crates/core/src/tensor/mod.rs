//! Dense row-major tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer. Operations
//! allocate fresh outputs and, when any input requires a gradient (and
//! recording is enabled on the current thread), attach a backward node that
//! holds the parents and a closure with the saved context. Node ids grow
//! monotonically, so parents always carry smaller ids than their children;
//! [`Tensor::backward`] relies on that to process the graph in reverse
//! creation order without an explicit topological sort.
//!
//! Precision is a type parameter: `f32` for training and inference, `f64`
//! for finite-difference gradient checks.

mod gemm;
pub mod gradcheck;
pub mod nn;
mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::iter::Sum;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use gemm::gemm;

/// Floating-point element type.
pub trait Scalar:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + 'static
{
    /// Checkpoint dtype code.
    const DTYPE: u8;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a·b + beta·c` on raw strided buffers.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing buffers of
    /// the stated sizes.
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

impl Scalar for f32 {
    const DTYPE: u8 = 0;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
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

impl Scalar for f64 {
    const DTYPE: u8 = 1;

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
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

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on this thread.
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

pub(crate) struct BackwardCtx<'a, T: Scalar> {
    pub grad: &'a [T],
    pub out: &'a [T],
    pub parents: &'a [Tensor<T>],
}

pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Scalar> {
    op: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    node: Option<Node<T>>,
    grad: Mutex<Option<Vec<T>>>,
}

/// Shared handle to an immutable tensor and its place in the backward graph.
pub struct Tensor<T: Scalar = f32>(Arc<Inner<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.0.node.as_ref().map(|n| n.op).unwrap_or("leaf");
        write!(
            f,
            "Tensor(id={}, shape={:?}, op={}, requires_grad={})",
            self.0.id, self.0.shape, op, self.0.requires_grad
        )
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            node,
            grad: Mutex::new(None),
        }))
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {shape:?} needs {} elements, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Ok(Self::new(data, shape)?.into_param())
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::of(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![T::zero(); numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::build(shape.to_vec(), vec![T::of(value); numel(shape)], false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![], vec![T::of(value)], false, None)
    }

    /// Normal draws scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let data = (0..numel(shape)).map(|_| T::of(rng.normal() * std)).collect();
        Self::build(shape.to_vec(), data, false, None)
    }

    /// New leaf sharing no graph with `self`, flagged trainable.
    pub fn into_param(self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), true, None)
    }

    /// New constant leaf with the same contents.
    pub fn detach(&self) -> Self {
        if !self.requires_grad() && self.0.node.is_none() {
            return self.clone();
        }
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Same values, trainable flag set as requested.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), requires_grad, None)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.0.data.iter().map(|v| U::of(v.as_f64())).collect();
        Tensor::build(self.0.shape.clone(), data, self.0.requires_grad, None)
    }

    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let requires = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let node = requires.then(|| Node {
            op,
            parents,
            backward,
        });
        Self::build(shape, data, requires, node)
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

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor with shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn op_name(&self) -> &'static str {
        self.0.node.as_ref().map(|n| n.op).unwrap_or("leaf")
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode pass from a scalar.
    ///
    /// Gradients are accumulated additively into every reachable trainable
    /// leaf; the returned map holds this call's contribution only.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let mut out = Gradients::default();
        if !self.requires_grad() {
            return Ok(out);
        }

        let mut reachable: HashMap<u64, Tensor<T>> = HashMap::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(node) = &t.0.node {
                for p in &node.parents {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            reachable.insert(t.id(), t);
        }
        let mut order: Vec<u64> = reachable.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for id in order {
            let Some(grad) = pending.remove(&id) else {
                continue;
            };
            let t = &reachable[&id];
            match &t.0.node {
                Some(node) => {
                    let ctx = BackwardCtx {
                        grad: &grad,
                        out: &t.0.data,
                        parents: &node.parents,
                    };
                    let parent_grads = (node.backward)(&ctx);
                    debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
                    for (p, g) in node.parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), p.numel(), "grad size in {}", node.op);
                        match pending.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                            None => {
                                pending.insert(p.id(), g);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.0.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a = *a + *b),
                        None => *slot = Some(grad.clone()),
                    }
                    out.map.insert(id, grad);
                }
            }
        }
        Ok(out)
    }
}

/// Gradients of one backward pass, keyed by leaf id.
#[derive(Debug, Default, Clone)]
pub struct Gradients<T: Scalar> {
    map: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.map.get(&t.id()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
