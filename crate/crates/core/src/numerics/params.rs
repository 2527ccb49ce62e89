use std::collections::HashMap;

use super::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Optimizer group a parameter belongs to. Each group has its own learning
/// rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Array,
    pub grad: Array,
    /// Frozen parameters receive no gradient and no update.
    pub trainable: bool,
    pub group: ParamGroup,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Owns every trainable tensor of a model, addressed by [`ParamId`] or by
/// unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on duplicate names, which would be a
    /// programming error in model construction.
    pub fn add(&mut self, name: impl Into<String>, value: Array, group: ParamGroup, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        let grad = Array::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable: true,
            group,
            decay,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds gradients collected by a backward pass into the stored grads.
    pub fn accumulate(&mut self, grads: &GradStore) {
        for (id, g) in grads.params() {
            self.params[id.0].grad.add_assign(g);
        }
    }

    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.trainable = trainable;
        }
    }

    pub fn count_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Gradients produced by backward passes, kept apart from the [`ParamStore`]
/// so several tapes can run concurrently against one shared store.
#[derive(Clone, Debug, Default)]
pub struct GradStore {
    params: Vec<Option<Array>>,
    pub(crate) leaves: HashMap<usize, Array>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn param_slot(&mut self, id: ParamId, shape: &[usize]) -> &mut Array {
        if self.params.len() <= id.0 {
            self.params.resize(id.0 + 1, None);
        }
        self.params[id.0].get_or_insert_with(|| Array::zeros(shape))
    }

    pub fn param(&self, id: ParamId) -> Option<&Array> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Array)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Gradient of a tracked leaf created with `Tape::leaf`.
    pub fn leaf(&self, var: super::Var) -> Option<&Array> {
        self.leaves.get(&var.index())
    }

    /// Element-wise sum of another store into this one.
    pub fn merge(&mut self, other: GradStore) {
        for (i, g) in other.params.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if self.params.len() <= i {
                self.params.resize(i + 1, None);
            }
            match &mut self.params[i] {
                Some(mine) => mine.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        for (k, g) in other.leaves {
            match self.leaves.get_mut(&k) {
                Some(mine) => mine.add_assign(&g),
                None => {
                    self.leaves.insert(k, g);
                }
            }
        }
    }
}
