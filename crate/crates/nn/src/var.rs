//! Define-by-run reverse-mode autodiff.
//!
//! A [`Var`] owns its value and, when it participates in a gradient
//! computation, a link to its parents plus a closure mapping the output
//! gradient to parent gradients. Graphs are built only while gradient mode is
//! enabled (see [`no_grad`]) and at least one input requires a gradient.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Array, Float};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph construction disabled.
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

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Identity of a trainable parameter across forward passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    pub fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        ParamId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Array<T>>>>;

struct Node<T: Float> {
    value: Array<T>,
    requires_grad: bool,
    param: Option<ParamId>,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// What a backward closure sees.
pub struct BackwardCtx<'a, T: Float> {
    pub grad: &'a Array<T>,
    pub output: &'a Array<T>,
    inputs: &'a [Var<T>],
}

impl<T: Float> BackwardCtx<'_, T> {
    pub fn input(&self, i: usize) -> &Array<T> {
        &self.inputs[i].0.value
    }

    pub fn needs(&self, i: usize) -> bool {
        self.inputs[i].0.requires_grad
    }

    pub fn inputs_len(&self) -> usize {
        self.inputs.len()
    }
}

pub struct Var<T: Float>(Rc<Node<T>>);

impl<T: Float> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Float> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Float> Var<T> {
    /// A value that never receives a gradient.
    pub fn constant(value: Array<T>) -> Self {
        Self::leaf(value, false)
    }

    /// A leaf input; with `requires_grad` its gradient can be read back via
    /// [`Gradients::wrt`].
    pub fn leaf(value: Array<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            value,
            requires_grad: requires_grad && is_grad_enabled(),
            param: None,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub(crate) fn param_leaf(value: Array<T>, id: ParamId, requires_grad: bool) -> Self {
        let requires_grad = requires_grad && is_grad_enabled();
        Var(Rc::new(Node {
            value,
            requires_grad,
            param: requires_grad.then_some(id),
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Builds an interior node. `backward` returns one optional gradient per
    /// parent, in order; entries for parents that do not need a gradient may
    /// be `None`.
    pub fn from_op(
        value: Array<T>,
        parents: Vec<Var<T>>,
        backward: impl Fn(&BackwardCtx<'_, T>) -> Vec<Option<Array<T>>> + 'static,
    ) -> Self {
        let requires_grad = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Self::constant(value);
        }
        Var(Rc::new(Node {
            value,
            requires_grad,
            param: None,
            parents,
            backward: Some(Box::new(backward)),
        }))
    }

    pub fn value(&self) -> &Array<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        self.0.value.dims4()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// The single element of a one-element value.
    pub fn item(&self) -> T {
        assert_eq!(self.0.value.len(), 1, "item() on shape {:?}", self.shape());
        self.0.value.data()[0]
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Backpropagates from a one-element output.
    pub fn backward(&self) -> Gradients<T> {
        assert_eq!(
            self.0.value.len(),
            1,
            "backward() needs a scalar, got {:?}",
            self.shape()
        );
        self.backward_with(Array::ones(self.shape().to_vec()))
    }

    /// Backpropagates an explicit output gradient.
    pub fn backward_with(&self, seed: Array<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(), "seed gradient shape");
        let mut out = Gradients {
            params: HashMap::new(),
            leaves: HashMap::new(),
        };
        if !self.requires_grad() {
            return out;
        }

        // Post-order DFS gives parents before children.
        let mut order: Vec<Var<T>> = Vec::new();
        let mut seen: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !seen.insert(v.key()) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in &v.0.parents {
                if p.requires_grad() && !seen.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }

        let mut pending: HashMap<usize, Array<T>> = HashMap::new();
        pending.insert(self.key(), seed);
        for v in order.iter().rev() {
            let Some(grad) = pending.remove(&v.key()) else {
                continue;
            };
            let node = &v.0;
            match &node.backward {
                None => {
                    if let Some(id) = node.param {
                        accumulate(&mut out.params, id, grad);
                    } else {
                        accumulate(&mut out.leaves, v.key(), grad);
                    }
                }
                Some(f) => {
                    let ctx = BackwardCtx {
                        grad: &grad,
                        output: &node.value,
                        inputs: &node.parents,
                    };
                    let grads = f(&ctx);
                    debug_assert_eq!(grads.len(), node.parents.len());
                    for (p, g) in node.parents.iter().zip(grads) {
                        if let Some(g) = g {
                            if p.requires_grad() {
                                debug_assert_eq!(g.shape(), p.shape(), "gradient shape for parent");
                                accumulate(&mut pending, p.key(), g);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn accumulate<K: std::hash::Hash + Eq, T: Float>(
    map: &mut HashMap<K, Array<T>>,
    k: K,
    g: Array<T>,
) {
    match map.get_mut(&k) {
        Some(acc) => acc.add_assign(&g),
        None => {
            map.insert(k, g);
        }
    }
}

/// Result of a backward pass.
pub struct Gradients<T: Float> {
    params: HashMap<ParamId, Array<T>>,
    leaves: HashMap<usize, Array<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Array<T>> {
        self.params.get(&id)
    }

    /// Gradient of a non-parameter leaf created with `requires_grad = true`.
    pub fn wrt(&self, v: &Var<T>) -> Option<&Array<T>> {
        self.leaves.get(&v.key())
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Merges another gradient set (sums overlapping entries).
    pub fn merge(&mut self, other: Gradients<T>) {
        for (k, g) in other.params {
            accumulate(&mut self.params, k, g);
        }
        for (k, g) in other.leaves {
            accumulate(&mut self.leaves, k, g);
        }
    }
}
