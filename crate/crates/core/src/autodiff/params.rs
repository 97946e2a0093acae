use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub trainable: bool,
}

/// Named parameter storage shared by every network in a policy.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<S>) {
        self.params[id.0].value = value;
    }

    pub fn param(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.trainable = false);
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Copies of the given parameters, for checkpoint snapshots.
    pub fn snapshot(&self, ids: &[ParamId]) -> Snapshot<S> {
        Snapshot {
            entries: ids.iter().map(|&id| (id, self.get(id).clone())).collect(),
        }
    }

    pub fn restore(&mut self, snap: &Snapshot<S>) {
        for (id, t) in &snap.entries {
            self.set(*id, t.clone());
        }
    }

    pub fn checksum(&self, id: ParamId) -> u64 {
        self.get(id).checksum()
    }
}

#[derive(Clone, Debug)]
pub struct Snapshot<S> {
    pub entries: Vec<(ParamId, Tensor<S>)>,
}

/// Binds store parameters as leaves of one graph, each at most once.
pub struct Binding {
    vars: HashMap<ParamId, Var>,
}

impl Binding {
    pub fn new() -> Self {
        Binding { vars: HashMap::new() }
    }

    pub fn bind<S: Scalar>(&mut self, graph: &mut Graph<S>, store: &ParamStore<S>, id: ParamId) -> Var {
        *self
            .vars
            .entry(id)
            .or_insert_with(|| graph.leaf(store.get(id).clone(), store.is_trainable(id)))
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars.get(&id).copied()
    }

    /// Gradient for every trainable parameter; zero for those not reached.
    pub fn trainable_grads<S: Scalar>(&self, store: &ParamStore<S>, grads: &Gradients<S>) -> Vec<(ParamId, Tensor<S>)> {
        store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let shape = store.get(id).shape();
                let g = match self.var(id) {
                    Some(v) => grads.get_or_zeros(v, shape),
                    None => Tensor::zeros(shape.to_vec()),
                };
                (id, g)
            })
            .collect()
    }
}

impl Default for Binding {
    fn default() -> Self {
        Self::new()
    }
}
