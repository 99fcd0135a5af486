use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Float, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording a backward graph.
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

/// Everything a backward rule may look at.
pub struct BackCtx<'a, T: Float> {
    pub grad: &'a Tensor<T>,
    pub out: &'a Tensor<T>,
    pub inputs: &'a [Var<T>],
}

impl<T: Float> BackCtx<'_, T> {
    pub fn input(&self, i: usize) -> &Tensor<T> {
        self.inputs[i].value()
    }
}

type BackwardFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Float> {
    id: u64,
    value: Tensor<T>,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param_id: Option<u64>,
}

impl<T: Float> Drop for Node<T> {
    // Unlinks long parent chains iteratively so deep graphs do not blow the stack.
    fn drop(&mut self) {
        let mut stack: Vec<Var<T>> = std::mem::take(&mut self.parents);
        while let Some(v) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(v.0) {
                stack.append(&mut node.parents);
            }
        }
    }
}

/// Node handle in the dynamic computation graph.
#[derive(Clone)]
pub struct Var<T: Float>(Rc<Node<T>>);

impl<T: Float> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.0.id).field("shape", &self.0.value.shape()).finish()
    }
}

impl<T: Float> Var<T> {
    /// Graph input that does not take gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false, None)
    }

    /// Graph input whose gradient is reported by [`Var::backward`].
    pub fn input(value: Tensor<T>) -> Self {
        Self::leaf(value, grad_enabled(), None)
    }

    pub(crate) fn param_leaf(value: Tensor<T>, param_id: u64) -> Self {
        Self::leaf(value, grad_enabled(), Some(param_id))
    }

    fn leaf(value: Tensor<T>, requires_grad: bool, param_id: Option<u64>) -> Self {
        Var(Rc::new(Node { id: fresh_id(), value, parents: Vec::new(), backward: None, requires_grad, param_id }))
    }

    /// Records an op. Parents and the closure are dropped when no input needs a gradient.
    pub fn from_op(
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: impl Fn(&BackCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Self {
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Self::constant(value);
        }
        Var(Rc::new(Node {
            id: fresh_id(),
            value,
            parents,
            backward: Some(Box::new(backward)),
            requires_grad: true,
            param_id: None,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Detached copy of the value.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// Reverse-mode sweep from this scalar.
    pub fn backward(&self) -> Gradients<T> {
        assert_eq!(self.value().len(), 1, "backward() needs a scalar, got shape {:?}", self.shape());
        let mut grads = Gradients::default();
        if !self.requires_grad() {
            return grads;
        }
        // Node ids increase in creation order, which is a topological order.
        let mut order: Vec<Var<T>> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !v.requires_grad() || !seen.insert(v.id()) {
                continue;
            }
            stack.extend(v.0.parents.iter().cloned());
            order.push(v);
        }
        order.sort_by_key(|v| std::cmp::Reverse(v.id()));

        let mut pending: HashMap<u64, Tensor<T>> = HashMap::new();
        pending.insert(self.id(), Tensor::full(self.shape(), T::one()));
        for v in &order {
            let Some(g) = pending.remove(&v.id()) else { continue };
            match &v.0.backward {
                Some(back) => {
                    let ctx = BackCtx { grad: &g, out: &v.0.value, inputs: &v.0.parents };
                    let parent_grads = back(&ctx);
                    debug_assert_eq!(parent_grads.len(), v.0.parents.len());
                    for (p, pg) in v.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        assert_eq!(pg.shape(), p.shape(), "backward produced wrong gradient shape");
                        match pending.get_mut(&p.id()) {
                            Some(acc) => acc.add_assign(&pg),
                            None => {
                                pending.insert(p.id(), pg);
                            }
                        }
                    }
                }
                None => grads.insert_leaf(v.id(), v.0.param_id, g),
            }
        }
        grads
    }
}

/// Leaf gradients produced by [`Var::backward`].
pub struct Gradients<T: Float> {
    by_var: HashMap<u64, Tensor<T>>,
    by_param: HashMap<u64, Tensor<T>>,
}

impl<T: Float> Default for Gradients<T> {
    fn default() -> Self {
        Self { by_var: HashMap::new(), by_param: HashMap::new() }
    }
}

impl<T: Float> Gradients<T> {
    fn insert_leaf(&mut self, var_id: u64, param_id: Option<u64>, g: Tensor<T>) {
        if let Some(pid) = param_id {
            match self.by_param.get_mut(&pid) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.by_param.insert(pid, g.clone());
                }
            }
        }
        self.by_var.insert(var_id, g);
    }

    /// Gradient of an input leaf, `None` if it did not influence the output.
    pub fn wrt(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        self.by_var.get(&v.id())
    }

    /// Gradient accumulated over every use of a parameter in the graph.
    pub fn param(&self, param_id: u64) -> Option<&Tensor<T>> {
        self.by_param.get(&param_id)
    }
}
