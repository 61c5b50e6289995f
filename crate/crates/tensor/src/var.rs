use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};

use crate::param::{Param, ParamId};
use crate::Elem;

static NEXT_NODE: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_NODE.fetch_add(1, Ordering::Relaxed)
}

/// Maps the output gradient to one gradient per parent.
///
/// Arguments are `(grad_out, parents, output_value)`. A `None` entry means the
/// parent receives no gradient from this op.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&ArrayD<T>, &[Var<T>], &ArrayD<T>) -> Vec<Option<ArrayD<T>>>>;

struct Node<T: Elem> {
    id: u64,
    value: ArrayD<T>,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A node in a dynamically built computation graph.
///
/// Cloning is cheap (reference counted). Nodes that do not depend on any
/// gradient-requiring leaf drop their parents eagerly, so inference graphs
/// hold no history.
pub struct Var<T: Elem = f32>(Rc<Node<T>>);

impl<T: Elem> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Elem> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Elem> Var<T> {
    /// A leaf that never receives gradients.
    pub fn constant(value: ArrayD<T>) -> Self {
        Self::make_leaf(value, false, None)
    }

    /// A leaf whose gradient is tracked by [`Var::backward`].
    pub fn leaf(value: ArrayD<T>) -> Self {
        Self::make_leaf(value, true, None)
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        Self::constant(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data length mismatch"))
    }

    pub(crate) fn from_param(value: ArrayD<T>, id: ParamId, trainable: bool) -> Self {
        Self::make_leaf(value, trainable, Some(id))
    }

    fn make_leaf(value: ArrayD<T>, requires_grad: bool, param: Option<ParamId>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param,
        }))
    }

    pub(crate) fn from_op(value: ArrayD<T>, parents: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Self::constant(value);
        }
        Var(Rc::new(Node {
            id: next_id(),
            value,
            parents,
            backward: Some(backward),
            requires_grad: true,
            param: None,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &ArrayD<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.value.iter().copied().collect()
    }

    /// Reverse-mode differentiation seeded with ones.
    pub fn backward(&self) -> Grads<T> {
        self.backward_with(ArrayD::from_elem(self.0.value.raw_dim(), T::one()))
    }

    pub fn backward_with(&self, seed: ArrayD<T>) -> Grads<T> {
        assert_eq!(seed.shape(), self.shape(), "seed shape mismatch");
        let mut grads = Grads::default();
        if !self.requires_grad() {
            return grads;
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, ArrayD<T>> = HashMap::new();
        pending.insert(self.id(), seed);
        for var in order.iter().rev() {
            let Some(g) = pending.remove(&var.id()) else {
                continue;
            };
            let node = &var.0;
            match &node.backward {
                Some(bw) => {
                    let parent_grads = bw(&g, &node.parents, &node.value);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), p.shape(), "gradient shape mismatch");
                        accumulate(&mut pending, p.id(), pg);
                    }
                }
                None => {
                    if let Some(pid) = node.param {
                        grads.add_param(pid, &g);
                    }
                    grads.leaves.insert(node.id, g);
                }
            }
        }
        grads
    }

    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !seen.insert(v.id()) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in &v.0.parents {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

fn accumulate<T: Elem>(map: &mut HashMap<u64, ArrayD<T>>, id: u64, g: ArrayD<T>) {
    match map.get_mut(&id) {
        Some(acc) => *acc += &g,
        None => {
            map.insert(id, g);
        }
    }
}

/// Gradients produced by one backward pass.
///
/// Parameter gradients are summed over every leaf created from the same
/// [`Param`], so a module applied several times in one graph gets one total.
pub struct Grads<T: Elem = f32> {
    leaves: HashMap<u64, ArrayD<T>>,
    params: HashMap<ParamId, ArrayD<T>>,
}

impl<T: Elem> Default for Grads<T> {
    fn default() -> Self {
        Self {
            leaves: HashMap::new(),
            params: HashMap::new(),
        }
    }
}

impl<T: Elem> Grads<T> {
    fn add_param(&mut self, id: ParamId, g: &ArrayD<T>) {
        match self.params.get_mut(&id) {
            Some(acc) => *acc += g,
            None => {
                self.params.insert(id, g.clone());
            }
        }
    }

    /// Gradient of a leaf variable, if it took part in the graph.
    pub fn get(&self, v: &Var<T>) -> Option<&ArrayD<T>> {
        self.leaves.get(&v.id())
    }

    pub fn param(&self, p: &Param<T>) -> Option<&ArrayD<T>> {
        self.params.get(&p.id())
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Euclidean norm over all parameter gradients.
    pub fn param_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|g| g.iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}
