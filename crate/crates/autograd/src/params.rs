//! Named parameter storage and the gradients produced for it.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::{Scalar, Tensor};

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// An ordered collection of named parameter tensors.
///
/// Values are reference counted so a graph can borrow them without copying;
/// mutation goes through copy-on-write.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new((**v).clone())).collect(),
            by_name: self.by_name.clone(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    /// Registers a parameter. Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = self.values.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn get_by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "shape change for parameter {}",
            self.names[id.0]
        );
        self.values[id.0] = Arc::new(value);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.values.iter().enumerate().map(|(i, v)| (ParamId(i), self.names[i].as_str(), &**v))
    }

    /// True when both stores hold the same names, shapes and bit-identical values.
    pub fn bit_identical(&self, other: &Self) -> bool {
        self.names == other.names
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits_u64() == y.to_bits_u64())
            })
    }
}

trait Bits {
    fn to_bits_u64(&self) -> u64;
}

impl<T: Scalar> Bits for T {
    fn to_bits_u64(&self) -> u64 {
        // f32 and f64 both round-trip through f64 exactly, NaN payloads aside
        self.as_f64().to_bits()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    pub(crate) params: HashMap<(u64, usize), Tensor<T>>,
    pub(crate) leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&(store.uid(), id.0))
    }

    /// One entry per parameter of `store`, in registration order.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        store.ids().map(|id| self.param(store, id).cloned()).collect()
    }

    /// Gradient for an input leaf created with `Graph::input`.
    pub fn wrt(&self, var: crate::Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id())
    }

    /// Sum of squared gradient entries over the given parameters of a store.
    pub fn sq_norm_of(&self, store: &ParamStore<T>, ids: &[ParamId]) -> f64 {
        ids.iter().filter_map(|&id| self.param(store, id)).map(|g| g.sq_norm().as_f64()).sum()
    }
}
