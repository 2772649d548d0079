use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Attention projection that can carry a LoRA factor pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Wq,
    Wk,
    Wv,
    Wo,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] = [LoraTarget::Wq, LoraTarget::Wk, LoraTarget::Wv, LoraTarget::Wo];

    pub fn name(self) -> &'static str {
        match self {
            LoraTarget::Wq => "wq",
            LoraTarget::Wk => "wk",
            LoraTarget::Wv => "wv",
            LoraTarget::Wo => "wo",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name().eq_ignore_ascii_case(s))
    }
}

/// Structural location of a parameter. Block indices are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParameterTag {
    Embedding,
    Block(usize),
    AdapterIn(usize),
    LoraFactor(usize, LoraTarget),
    BiasTerm(usize),
    Head,
}

/// Coarse grouping of tags, used for ledger breakdowns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagClass {
    Embedding,
    Block,
    Adapter,
    Lora,
    Bias,
    Head,
}

impl TagClass {
    pub fn name(self) -> &'static str {
        match self {
            TagClass::Embedding => "embedding",
            TagClass::Block => "block",
            TagClass::Adapter => "adapter",
            TagClass::Lora => "lora",
            TagClass::Bias => "bias",
            TagClass::Head => "head",
        }
    }
}

impl ParameterTag {
    /// The transformer block this parameter belongs to, if any.
    pub fn block(&self) -> Option<usize> {
        match *self {
            ParameterTag::Block(i)
            | ParameterTag::AdapterIn(i)
            | ParameterTag::LoraFactor(i, _)
            | ParameterTag::BiasTerm(i) => Some(i),
            ParameterTag::Embedding | ParameterTag::Head => None,
        }
    }

    pub fn class(&self) -> TagClass {
        match self {
            ParameterTag::Embedding => TagClass::Embedding,
            ParameterTag::Block(_) => TagClass::Block,
            ParameterTag::AdapterIn(_) => TagClass::Adapter,
            ParameterTag::LoraFactor(..) => TagClass::Lora,
            ParameterTag::BiasTerm(_) => TagClass::Bias,
            ParameterTag::Head => TagClass::Head,
        }
    }
}

impl fmt::Display for ParameterTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParameterTag::Embedding => write!(f, "embedding"),
            ParameterTag::Block(i) => write!(f, "block({i})"),
            ParameterTag::AdapterIn(i) => write!(f, "adapter({i})"),
            ParameterTag::LoraFactor(i, t) => write!(f, "lora({i},{})", t.name()),
            ParameterTag::BiasTerm(i) => write!(f, "bias({i})"),
            ParameterTag::Head => write!(f, "head"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape-only description of a parameter. Produced both by an instantiated
/// registry and by the analytic counter, so accounting works on either.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub tag: ParameterTag,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tag: ParameterTag,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    /// Selected by the active fine-tuning regime.
    pub trainable: bool,
    /// Part of the backward graph right now (the epoch's trainable set).
    pub requires_grad: bool,
}

/// Every model parameter, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParameterRegistry {
    entries: Vec<ParamEntry>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tag: ParameterTag, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            tag,
            value,
            grad: None,
            trainable: true,
            requires_grad: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn total_count(&self) -> u64 {
        self.entries.iter().map(|e| e.value.numel() as u64).sum()
    }

    pub fn counts_by_tag(&self) -> BTreeMap<ParameterTag, u64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.tag).or_insert(0) += e.value.numel() as u64;
        }
        out
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.entries
            .iter()
            .map(|e| ParamSpec {
                name: e.name.clone(),
                tag: e.tag,
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
            })
            .collect()
    }

    pub fn trainable_ids(&self) -> BTreeSet<ParamId> {
        self.iter().filter(|(_, e)| e.trainable).map(|(id, _)| id).collect()
    }

    pub fn count_of(&self, ids: &BTreeSet<ParamId>) -> u64 {
        ids.iter().map(|id| self.get(*id).value.numel() as u64).sum()
    }

    /// Restricts the backward graph to `active`; everything else is frozen.
    pub fn set_active(&mut self, active: &BTreeSet<ParamId>) {
        for (i, e) in self.entries.iter_mut().enumerate() {
            e.requires_grad = active.contains(&ParamId(i));
        }
    }

    /// Activates exactly the regime-trainable parameters.
    pub fn activate_trainable(&mut self) {
        for e in &mut self.entries {
            e.requires_grad = e.trainable;
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Pushes every parameter onto `tape` as a leaf; index `i` of the result
    /// is the variable for `ParamId(i)`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), e.requires_grad))
            .collect()
    }

    /// Adds gradients from a backward pass into the `grad` buffers of active
    /// parameters.
    pub fn accumulate_grads(&mut self, vars: &[Var], grads: &Gradients) -> Result<()> {
        if vars.len() != self.entries.len() {
            return Err(Error::contract("binding does not match registry"));
        }
        for (e, &v) in self.entries.iter_mut().zip(vars) {
            if !e.requires_grad {
                continue;
            }
            let g = grads
                .get(v)
                .ok_or_else(|| Error::contract(format!("no gradient for `{}`", e.name)))?;
            match &mut e.grad {
                Some(acc) => acc.add_assign(g)?,
                slot => *slot = Some(g.clone()),
            }
        }
        Ok(())
    }
}
