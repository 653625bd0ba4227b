use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use indexmap::IndexMap;

use super::{Element, Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named, ordered collection of trainable tensors.
///
/// A frozen set binds into a [`Graph`] as constants, so backward passes never
/// produce gradient for it and [`ParamSet::sgd_momentum_step`] refuses to run.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<E: Element = f32> {
    entries: IndexMap<String, Tensor<E>>,
    frozen: bool,
    momentum: Option<IndexMap<String, Vec<E>>>,
}

/// Graph handles for every entry of a [`ParamSet`], in entry order.
pub struct BoundParams<'g, E: Element = f32> {
    vars: IndexMap<String, Var<'g, E>>,
}

impl<'g, E: Element> BoundParams<'g, E> {
    pub fn get(&self, name: &str) -> Result<Var<'g, E>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'g, E>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl<E: Element> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet {
            entries: IndexMap::new(),
            frozen: false,
            momentum: None,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut value: Tensor<E>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        value.set_requires_grad(true);
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<E>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Records every entry on `graph`; frozen sets bind as constants.
    pub fn bind<'g>(&self, graph: &'g Graph<E>) -> BoundParams<'g, E> {
        self.bind_with(graph, !self.frozen)
    }

    /// Records every entry as a constant regardless of the freeze flag.
    pub fn bind_untracked<'g>(&self, graph: &'g Graph<E>) -> BoundParams<'g, E> {
        self.bind_with(graph, false)
    }

    fn bind_with<'g>(&self, graph: &'g Graph<E>, tracked: bool) -> BoundParams<'g, E> {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let value = Tensor::from_parts(v.shape().to_vec(), v.data().to_vec());
                (k.clone(), graph.leaf(value, tracked))
            })
            .collect();
        BoundParams { vars }
    }

    /// Adds the gradients of `bound` into each entry's grad buffer.
    pub fn accumulate(&mut self, bound: &BoundParams<'_, E>, grads: &Gradients<E>) -> Result<()> {
        for (name, var) in bound.iter() {
            let Some(g) = grads.get_id(var.id()) else { continue };
            if self.frozen {
                return Err(Error::ContractViolation(format!(
                    "gradient reached frozen parameter `{name}`"
                )));
            }
            self.entries
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))?
                .accumulate_grad(g);
        }
        Ok(())
    }

    /// `v ← momentum·v + grad + weight_decay·θ;  θ ← θ − lr·v`.
    pub fn sgd_momentum_step(&mut self, lr: E, momentum: E, weight_decay: E) -> Result<()> {
        if self.frozen {
            return Err(Error::ContractViolation(
                "optimizer step on a frozen parameter set".into(),
            ));
        }
        let buffers = self.momentum.get_or_insert_with(IndexMap::new);
        for (name, t) in self.entries.iter_mut() {
            let v = buffers
                .entry(name.clone())
                .or_insert_with(|| vec![E::zero(); t.numel()]);
            let grad = t.grad().map(<[E]>::to_vec);
            let data = t.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(E::zero(), |g| g[i]);
                v[i] = momentum * v[i] + g + weight_decay * data[i];
                data[i] -= lr * v[i];
            }
        }
        Ok(())
    }

    pub fn momentum_buffers(&self) -> Option<&IndexMap<String, Vec<E>>> {
        self.momentum.as_ref()
    }

    pub fn set_momentum_buffers(&mut self, buffers: Option<IndexMap<String, Vec<E>>>) {
        self.momentum = buffers;
    }

    /// Order-sensitive hash of names, shapes and exact value bits.
    pub fn content_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in &self.entries {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_f64_lossy().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Largest absolute gradient entry (0 when no gradient is present).
    pub fn max_abs_grad(&self) -> E {
        self.entries
            .values()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter())
            .fold(E::zero(), |m, v| m.max(v.abs()))
    }

    /// L2 norm over every entry's values.
    pub fn l2_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data())
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<F: Element>(&self) -> ParamSet<F> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| {
                    let mut t = v.cast::<F>();
                    t.set_requires_grad(true);
                    (k.clone(), t)
                })
                .collect(),
            frozen: self.frozen,
            momentum: None,
        }
    }

    /// Overwrites values of matching entries; shapes must agree.
    pub fn load_from(&mut self, other: &ParamSet<E>) -> Result<()> {
        for (name, t) in self.entries.iter_mut() {
            let src = other
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
