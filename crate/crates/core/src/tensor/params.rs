use serde::{Deserialize, Serialize};

use super::{Tape, Tensor, Var};

/// Role of a parameter tensor; each role trains with its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    Update,
    Dynamics,
    Decoder,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Embedding,
        ParamGroup::Update,
        ParamGroup::Dynamics,
        ParamGroup::Decoder,
        ParamGroup::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Embedding => "embedding",
            ParamGroup::Update => "update",
            ParamGroup::Dynamics => "dynamics",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Named, grouped parameter tensors of one model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; the stored name is `"<group>.<name>"`.
    pub fn add(&mut self, group: ParamGroup, name: &str, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: format!("{}.{}", group.as_str(), name),
            group,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Puts every parameter on `tape` as a tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self.entries.iter().map(|e| tape.var(e.value.clone())).collect(),
        }
    }

    pub(crate) fn from_entries(entries: Vec<ParamEntry>) -> Self {
        Self { entries }
    }
}

/// Parameters placed on a tape for one forward/backward pass.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}
