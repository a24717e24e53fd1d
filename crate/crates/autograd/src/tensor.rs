//! Tape nodes and the backward pass.

use ndarray::{ArrayD, IxDyn};
use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Given the gradient flowing into a node, accumulate gradients into its
/// parents. Receives `(grad_out, parents)`.
pub type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &[Tensor])>;

pub(crate) struct Inner {
    id: u64,
    data: RefCell<ArrayD<f64>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    trainable: Cell<bool>,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

/// A node in the autodiff graph. Cheap to clone (reference-counted).
///
/// Leaves are either trainable parameters ([`Tensor::param`]) or constants
/// ([`Tensor::constant`]). Interior nodes are produced by ops and carry a
/// backward closure. A node participates in gradient flow iff it is
/// trainable or has a backward closure; ops skip tape construction entirely
/// when no input needs gradients, so frozen-model inference pays no tape
/// overhead.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Tensor {
    /// Trainable leaf.
    pub fn param(data: ArrayD<f64>) -> Self {
        Self::new(data, true, Vec::new(), None)
    }

    /// Non-trainable leaf.
    pub fn constant(data: ArrayD<f64>) -> Self {
        Self::new(data, false, Vec::new(), None)
    }

    /// 0-dimensional constant.
    pub fn scalar(v: f64) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Interior node. Degenerates to a constant when no parent needs
    /// gradients.
    pub fn from_op(data: ArrayD<f64>, parents: Vec<Tensor>, backward_fn: BackwardFn) -> Self {
        if parents.iter().any(Tensor::needs_grad) {
            Self::new(data, false, parents, Some(backward_fn))
        } else {
            Self::constant(data)
        }
    }

    fn new(
        data: ArrayD<f64>,
        trainable: bool,
        parents: Vec<Tensor>,
        backward_fn: Option<BackwardFn>,
    ) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                trainable: Cell::new(trainable),
                parents,
                backward_fn,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn is_trainable(&self) -> bool {
        self.inner.trainable.get()
    }

    /// Demote a trainable leaf to a constant. Frozen leaves accumulate no
    /// gradients and ops over them build no tape.
    pub fn freeze(&self) {
        self.inner.trainable.set(false);
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.trainable.get() || self.inner.backward_fn.is_some()
    }

    pub fn data(&self) -> Ref<'_, ArrayD<f64>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw values. Used by optimizers, EMA updates and
    /// finite-difference probes; never call while a borrow from `data()` is
    /// live.
    pub fn data_mut(&self) -> RefMut<'_, ArrayD<f64>> {
        self.inner.data.borrow_mut()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.data.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of a 0-d or single-element tensor.
    pub fn value(&self) -> f64 {
        let d = self.data();
        debug_assert_eq!(d.len(), 1, "value() on non-scalar tensor");
        *d.iter().next().expect("empty tensor")
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Cut the tape: a constant sharing this node's current values.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.data().clone())
    }

    /// Add `g` into this node's gradient slot (no-op unless the node takes
    /// part in gradient flow). Public so custom ops outside this crate can
    /// implement backward closures.
    pub fn accumulate_grad(&self, g: ArrayD<f64>) {
        if !self.needs_grad() {
            return;
        }
        debug_assert_eq!(
            g.shape(),
            self.inner.data.borrow().shape(),
            "gradient shape mismatch"
        );
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Reverse pass from a scalar node. Accumulates into every trainable
    /// leaf's `grad`; interior-node gradients are freed as soon as they have
    /// been consumed.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar loss");
        let order = self.topo_order();
        self.accumulate_grad(ArrayD::from_elem(self.data().raw_dim(), 1.0));
        for node in order.iter().rev() {
            let grad = node.inner.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            if let Some(f) = &node.inner.backward_fn {
                f(&grad, &node.inner.parents);
            }
            if !node.inner.trainable.get() {
                *node.inner.grad.borrow_mut() = None;
            }
        }
    }

    /// Post-order DFS over the subgraph that needs gradients.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // (node, children_expanded)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.inner.parents {
                if p.needs_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id())
            .field("shape", &self.shape())
            .field("trainable", &self.inner.trainable.get())
            .finish()
    }
}

/// Ordered, named registry of trainable tensors. Checkpoints and optimizer
/// state are keyed by these names, so they must be unique and stable across
/// process runs.
#[derive(Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(
            !self.entries.iter().any(|(n, _)| n == &name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, t));
    }

    pub fn extend(&mut self, other: ParamSet) {
        for (n, t) in other.entries {
            self.push(n, t);
        }
    }

    /// Same parameters with every name prefixed by `prefix.`.
    pub fn prefixed(self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, t) in self.entries {
            out.push(format!("{prefix}.{n}"), t);
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// Freeze every parameter (constants from here on).
    pub fn freeze_all(&self) {
        for (_, t) in &self.entries {
            t.freeze();
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}
