//! Reverse-mode tensors.
//!
//! Ops evaluate eagerly and record a backward closure. Nodes form a DAG
//! through `Rc` parent handles; creation ids give a topological order, so
//! `backward` visits nodes in descending id and each closure adds its
//! contribution into the parents' gradient cells. Nodes none of whose
//! ancestors require gradients are pruned to plain constants, which is also
//! how `detach` works.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt::Debug;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Element scalar: f32 for training, f64 for gradient verification.
pub trait Elem:
    Copy
    + PartialOrd
    + Debug
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    /// Fused multiply-add. The single rounding differs from `self * a + b`
    /// by at most one ulp; hot kernels use it for throughput.
    fn mul_add(self, a: Self, b: Self) -> Self;
    fn maximum(self, o: Self) -> Self {
        if self > o {
            self
        } else {
            o
        }
    }
}

// The `inline(always)` hints matter: without them, incremental builds put
// these one-line wrappers in their own codegen units and the hot kernels
// pay a function call per element.
macro_rules! impl_elem {
    ($t:ty) => {
        impl Elem for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline(always)]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline(always)]
            fn tanh(self) -> Self {
                // exp-based identity; roughly 3x the throughput of the libm
                // call here, agrees with it to a couple of ulps, and the
                // exp saturation gives the right +-1 limits.
                let e = (self + self).exp();
                Self::ONE - (Self::ONE + Self::ONE) / (e + Self::ONE)
            }
            #[inline(always)]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline(always)]
            fn mul_add(self, a: Self, b: Self) -> Self {
                self.mul_add(a, b)
            }
        }
    };
}

impl_elem!(f32);
impl_elem!(f64);

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

type BackwardFn<E> = Box<dyn Fn(&[E])>;

pub(crate) struct Inner<E: Elem> {
    id: usize,
    shape: Vec<usize>,
    values: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    parents: Vec<Tensor<E>>,
    backward: Option<BackwardFn<E>>,
}

/// Handle to a graph node; clones share the node.
pub struct Tensor<E: Elem>(pub(crate) Rc<Inner<E>>);

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<E: Elem> Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .finish()
    }
}

impl<E: Elem> Tensor<E> {
    fn construct(
        shape: Vec<usize>,
        values: Vec<E>,
        requires_grad: bool,
        parents: Vec<Tensor<E>>,
        backward: Option<BackwardFn<E>>,
    ) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape {shape:?} does not match {} values",
            values.len()
        );
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            values: RefCell::new(values),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward,
        }))
    }

    /// Leaf that never takes gradients.
    pub fn constant(shape: Vec<usize>, values: Vec<E>) -> Self {
        Tensor::construct(shape, values, false, vec![], None)
    }

    /// Trainable leaf.
    pub fn param(shape: Vec<usize>, values: Vec<E>) -> Self {
        Tensor::construct(shape, values, true, vec![], None)
    }

    pub fn scalar(v: E) -> Self {
        Tensor::constant(vec![1], vec![v])
    }

    /// Op node. Prunes to a constant when no ancestor requires gradients.
    pub(crate) fn op(
        shape: Vec<usize>,
        values: Vec<E>,
        parents: Vec<Tensor<E>>,
        backward: impl Fn(&[E]) + 'static,
    ) -> Self {
        if parents.iter().any(|p| p.0.requires_grad) {
            Tensor::construct(shape, values, true, parents, Some(Box::new(backward)))
        } else {
            Tensor::constant(shape, values)
        }
    }

    pub fn id(&self) -> usize {
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

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn values(&self) -> Ref<'_, Vec<E>> {
        self.0.values.borrow()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.0.values.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn value(&self) -> E {
        let v = self.0.values.borrow();
        assert_eq!(v.len(), 1, "value() on tensor of shape {:?}", self.0.shape);
        v[0]
    }

    /// In-place value mutation; only sensible on leaves (the optimizer and
    /// finite-difference probes use it).
    pub fn update_values(&self, f: impl FnOnce(&mut [E])) {
        f(&mut self.0.values.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Copy of this node's values with no graph history.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::constant(self.0.shape.clone(), self.to_vec())
    }

    pub(crate) fn accum_grad(&self, delta: &[E]) {
        if !self.0.requires_grad {
            return;
        }
        debug_assert_eq!(delta.len(), self.len());
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += *b;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Reverse pass from a scalar root: seeds d(root)/d(root) = 1 and adds
    /// each node's contribution into its parents, visiting in descending
    /// creation id (a topological order, since ops outlive their inputs).
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() needs a scalar root, got {:?}", self.0.shape);
        if !self.0.requires_grad {
            return;
        }
        let mut nodes: Vec<Tensor<E>> = Vec::new();
        let mut seen: HashSet<usize> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.0.id) {
                continue;
            }
            for p in &t.0.parents {
                if p.0.requires_grad {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.0.id.cmp(&a.0.id));
        self.accum_grad(&[E::ONE]);
        for node in &nodes {
            if let Some(bw) = &node.0.backward {
                let g = node.0.grad.borrow();
                if let Some(g) = g.as_ref() {
                    bw(g);
                }
            }
        }
    }
}

/// Panic with both shapes when an op's operands disagree.
pub(crate) fn shape_check(cond: bool, op: &str, a: &[usize], b: &[usize]) {
    assert!(cond, "{op}: incompatible shapes {a:?} and {b:?}");
}
