//! Named parameter storage and the per-pass session that exposes parameters
//! as graph leaves.

use std::cell::RefCell;
use std::collections::BTreeMap;

use maprotonet_tensor::{Array, Gradients, Graph, Var};

/// Trainable parameters and non-trainable buffers, keyed by dotted names
/// such as `backbone.stem.conv.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Array>,
    buffers: BTreeMap<String, Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Array) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Array> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.buffers.get_mut(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.buffers.iter()
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Number of trainable scalars under a dotted prefix.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| in_group(k, prefix))
            .map(|(_, a)| a.len())
            .sum()
    }
}

/// `name` equals `prefix` or starts with `prefix.`.
pub fn in_group(name: &str, prefix: &str) -> bool {
    name == prefix || (name.len() > prefix.len() && name.starts_with(prefix) && name.as_bytes()[prefix.len()] == b'.')
}

/// Which parameters receive gradients during a pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Trainable {
    All,
    Nothing,
    Only(Vec<String>),
    Except(Vec<String>),
}

impl Trainable {
    pub fn allows(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Only(groups) => groups.iter().any(|g| in_group(name, g)),
            Trainable::Except(groups) => !groups.iter().any(|g| in_group(name, g)),
        }
    }
}

/// Running-statistics update produced by a normalisation layer in
/// training mode.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub prefix: String,
    pub mean: Array,
    pub var: Array,
    pub momentum: f64,
}

/// One forward pass: binds a [`Graph`] to a [`ParamStore`].
pub struct Session<'a> {
    pub graph: &'a Graph,
    store: &'a ParamStore,
    train: bool,
    trainable: Trainable,
    leaves: RefCell<BTreeMap<String, Var<'a>>>,
    updates: RefCell<Vec<StatUpdate>>,
}

impl<'a> Session<'a> {
    pub fn new(graph: &'a Graph, store: &'a ParamStore, train: bool, trainable: Trainable) -> Self {
        Self {
            graph,
            store,
            train,
            trainable,
            leaves: RefCell::new(BTreeMap::new()),
            updates: RefCell::new(Vec::new()),
        }
    }

    /// Evaluation-mode session in which nothing is trainable.
    pub fn eval(graph: &'a Graph, store: &'a ParamStore) -> Self {
        Self::new(graph, store, false, Trainable::Nothing)
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Graph leaf for a parameter, created once per session.
    ///
    /// Panics if the parameter does not exist; layer construction and
    /// initialisation guarantee presence.
    pub fn param(&self, name: &str) -> Var<'a> {
        if let Some(v) = self.leaves.borrow().get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .clone();
        let var = if self.trainable.allows(name) {
            self.graph.leaf(value)
        } else {
            self.graph.constant(value)
        };
        self.leaves.borrow_mut().insert(name.to_string(), var);
        var
    }

    pub fn buffer(&self, name: &str) -> &'a Array {
        self.store
            .buffer(name)
            .unwrap_or_else(|| panic!("missing buffer {name}"))
    }

    pub(crate) fn record_stats(&self, update: StatUpdate) {
        self.updates.borrow_mut().push(update);
    }

    pub fn take_stat_updates(&self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.updates.borrow_mut())
    }

    /// Gradients of every trainable parameter touched in this pass.
    pub fn param_grads(&self, grads: &mut Gradients) -> BTreeMap<String, Array> {
        self.leaves
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .filter_map(|(k, v)| grads.take(*v).map(|g| (k.clone(), g)))
            .collect()
    }
}

/// Applies running-statistics updates in recording order.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate]) {
    for u in updates {
        let m = u.momentum;
        if let Some(rm) = store.buffer_mut(&format!("{}.running_mean", u.prefix)) {
            rm.zip_mut_with(&u.mean, |r, &b| *r = (1.0 - m) * *r + m * b);
        }
        if let Some(rv) = store.buffer_mut(&format!("{}.running_var", u.prefix)) {
            rv.zip_mut_with(&u.var, |r, &b| *r = (1.0 - m) * *r + m * b);
        }
    }
}
