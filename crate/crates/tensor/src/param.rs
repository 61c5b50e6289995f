use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use crate::{Elem, Var};

static NEXT_PARAM: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

struct ParamInner<T: Elem> {
    id: ParamId,
    name: String,
    value: RefCell<ArrayD<T>>,
    trainable: Cell<bool>,
}

/// A trainable tensor owned by a module.
///
/// Each call to [`Param::var`] snapshots the current value into a fresh graph
/// leaf. A non-trainable parameter produces a constant leaf, so no gradient is
/// ever computed for it.
pub struct Param<T: Elem = f32>(Rc<ParamInner<T>>);

impl<T: Elem> Clone for Param<T> {
    fn clone(&self) -> Self {
        Param(Rc::clone(&self.0))
    }
}

impl<T: Elem> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.0.name)
            .field("shape", &self.0.value.borrow().shape())
            .field("trainable", &self.0.trainable.get())
            .finish()
    }
}

impl<T: Elem> Param<T> {
    pub fn new(name: impl Into<String>, value: ArrayD<T>) -> Self {
        Param(Rc::new(ParamInner {
            id: ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value: RefCell::new(value),
            trainable: Cell::new(true),
        }))
    }

    pub fn id(&self) -> ParamId {
        self.0.id
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn var(&self) -> Var<T> {
        Var::from_param(self.0.value.borrow().clone(), self.0.id, self.0.trainable.get())
    }

    pub fn value(&self) -> Ref<'_, ArrayD<T>> {
        self.0.value.borrow()
    }

    pub fn set_value(&self, v: ArrayD<T>) {
        let mut cur = self.0.value.borrow_mut();
        assert_eq!(cur.shape(), v.shape(), "param {} shape change", self.0.name);
        *cur = v;
    }

    pub fn update(&self, f: impl FnOnce(&mut ArrayD<T>)) {
        f(&mut self.0.value.borrow_mut());
    }

    pub fn is_trainable(&self) -> bool {
        self.0.trainable.get()
    }

    pub fn set_trainable(&self, on: bool) {
        self.0.trainable.set(on);
    }

    pub fn numel(&self) -> usize {
        self.0.value.borrow().len()
    }
}

/// Non-trainable module state such as batch-norm running statistics.
pub struct Buffer<T: Elem = f32>(Rc<RefCell<ArrayD<T>>>);

impl<T: Elem> Clone for Buffer<T> {
    fn clone(&self) -> Self {
        Buffer(Rc::clone(&self.0))
    }
}

impl<T: Elem> Buffer<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        Buffer(Rc::new(RefCell::new(value)))
    }

    pub fn value(&self) -> Ref<'_, ArrayD<T>> {
        self.0.borrow()
    }

    pub fn set_value(&self, v: ArrayD<T>) {
        let mut cur = self.0.borrow_mut();
        assert_eq!(cur.shape(), v.shape(), "buffer shape change");
        *cur = v;
    }

    pub fn update(&self, f: impl FnOnce(&mut ArrayD<T>)) {
        f(&mut self.0.borrow_mut());
    }
}

/// SHA-256 over the little-endian bytes of every tensor, in order.
pub fn checksum<'a, T: Elem>(tensors: impl IntoIterator<Item = Ref<'a, ArrayD<T>>>) -> String {
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    for t in tensors {
        buf.clear();
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in t.iter() {
            x.extend_le_bytes(&mut buf);
        }
        hasher.update(&buf);
    }
    hex::encode(hasher.finalize())
}
