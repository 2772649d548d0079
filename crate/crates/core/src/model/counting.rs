//! Analytic parameter counting for published encoder shapes.
//!
//! Nothing here allocates weights: the enumeration walks the architecture
//! and emits one [`ParamSpec`] per tensor, so BERT-large costs a few hundred
//! small structs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::registry::{LoraTarget, ParamSpec, ParameterTag};
use super::{HeadKind, ModelConfig};
use crate::error::{Error, Result};
use crate::peft::PeftConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchDims {
    pub num_blocks: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Segment embeddings; 0 for the toy encoder, which has none.
    pub type_vocab_size: usize,
    pub num_classes: usize,
    /// Dense `d×d` + tanh pooler in front of a classifier head.
    pub include_pooler: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    BertBase,
    BertLarge,
}

impl Arch {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "bert-base" | "bert_base" => Ok(Arch::BertBase),
            "bert-large" | "bert_large" => Ok(Arch::BertLarge),
            other => Err(Error::config(format!(
                "unknown architecture `{other}`; give explicit dimensions"
            ))),
        }
    }

    /// Shipped dimensions. The pooler is counted for classifier heads and
    /// left out for span heads, which read every position directly.
    pub fn dims(self, head: HeadKind) -> ArchDims {
        let (num_blocks, hidden, num_heads, ffn_dim) = match self {
            Arch::BertBase => (12, 768, 12, 3072),
            Arch::BertLarge => (24, 1024, 16, 4096),
        };
        ArchDims {
            num_blocks,
            hidden,
            num_heads,
            ffn_dim,
            vocab_size: 30522,
            max_positions: 512,
            type_vocab_size: 2,
            num_classes: 2,
            include_pooler: head == HeadKind::Classifier,
        }
    }
}

impl ArchDims {
    /// Dimensions of a trainable toy encoder (no segment embeddings, no pooler).
    pub fn from_model_config(cfg: &ModelConfig) -> Self {
        ArchDims {
            num_blocks: cfg.num_blocks,
            hidden: cfg.hidden,
            num_heads: cfg.num_heads,
            ffn_dim: cfg.ffn_dim,
            vocab_size: cfg.vocab_size,
            max_positions: cfg.max_positions,
            type_vocab_size: 0,
            num_classes: cfg.num_classes,
            include_pooler: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.hidden == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::config("architecture dimensions must be positive"));
        }
        if self.vocab_size == 0 || self.max_positions == 0 || self.num_classes == 0 {
            return Err(Error::config("vocabulary, positions and classes must be positive"));
        }
        if !self.hidden.is_multiple_of(self.num_heads) {
            return Err(Error::config("hidden size must be divisible by the head count"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StaticCount {
    pub specs: Vec<ParamSpec>,
}

impl StaticCount {
    pub fn total(&self) -> u64 {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn trainable_total(&self) -> u64 {
        self.specs.iter().filter(|s| s.trainable).map(ParamSpec::numel).sum()
    }

    pub fn by_tag(&self) -> BTreeMap<ParameterTag, u64> {
        let mut out = BTreeMap::new();
        for s in &self.specs {
            *out.entry(s.tag).or_insert(0) += s.numel();
        }
        out
    }
}

struct Emitter<'a> {
    specs: Vec<ParamSpec>,
    peft: &'a PeftConfig,
}

impl Emitter<'_> {
    fn push(&mut self, name: String, tag: ParameterTag, shape: &[usize], trainable: bool) {
        self.specs.push(ParamSpec {
            name,
            tag,
            shape: shape.to_vec(),
            trainable,
        });
    }

    fn backbone_trainable(&self) -> bool {
        matches!(self.peft, PeftConfig::Full)
    }

    /// A backbone weight matrix or layer-norm scale.
    fn weight(&mut self, name: String, tag: ParameterTag, shape: &[usize]) {
        let trainable = self.backbone_trainable();
        self.push(name, tag, shape, trainable);
    }

    /// A backbone bias vector (dense bias or layer-norm shift).
    fn bias(&mut self, name: String, block: Option<usize>, len: usize) {
        let bitfit = matches!(self.peft, PeftConfig::Bitfit);
        let tag = match block {
            Some(i) if bitfit => ParameterTag::BiasTerm(i),
            Some(i) => ParameterTag::Block(i),
            None => ParameterTag::Embedding,
        };
        let trainable = self.backbone_trainable() || bitfit;
        self.push(name, tag, &[len], trainable);
    }

    fn dense(&mut self, prefix: &str, block: usize, fan_in: usize, fan_out: usize) {
        self.weight(format!("{prefix}.weight"), ParameterTag::Block(block), &[fan_in, fan_out]);
        self.bias(format!("{prefix}.bias"), Some(block), fan_out);
    }
}

/// Enumerates every parameter of an architecture under a fine-tuning regime.
pub fn static_param_count(dims: &ArchDims, head: HeadKind, peft: &PeftConfig) -> Result<StaticCount> {
    dims.validate()?;
    peft.validate(dims.hidden)?;
    let d = dims.hidden;
    let mut em = Emitter {
        specs: Vec::new(),
        peft,
    };

    em.weight("embeddings.token".into(), ParameterTag::Embedding, &[dims.vocab_size, d]);
    em.weight("embeddings.position".into(), ParameterTag::Embedding, &[dims.max_positions, d]);
    if dims.type_vocab_size > 0 {
        em.weight("embeddings.token_type".into(), ParameterTag::Embedding, &[dims.type_vocab_size, d]);
    }
    em.weight("embeddings.norm.gamma".into(), ParameterTag::Embedding, &[d]);
    em.bias("embeddings.norm.beta".into(), None, d);

    for i in 1..=dims.num_blocks {
        let p = format!("blocks.{i}");
        for proj in ["q", "k", "v", "o"] {
            em.dense(&format!("{p}.attn.{proj}"), i, d, d);
        }
        em.weight(format!("{p}.attn_norm.gamma"), ParameterTag::Block(i), &[d]);
        em.bias(format!("{p}.attn_norm.beta"), Some(i), d);
        em.dense(&format!("{p}.ffn.in"), i, d, dims.ffn_dim);
        em.dense(&format!("{p}.ffn.out"), i, dims.ffn_dim, d);
        em.weight(format!("{p}.ffn_norm.gamma"), ParameterTag::Block(i), &[d]);
        em.bias(format!("{p}.ffn_norm.beta"), Some(i), d);

        match peft {
            PeftConfig::Adapter { bottleneck } => {
                for site in ["attn_adapter", "ffn_adapter"] {
                    let tag = ParameterTag::AdapterIn(i);
                    em.push(format!("{p}.{site}.down.weight"), tag, &[d, *bottleneck], true);
                    em.push(format!("{p}.{site}.down.bias"), tag, &[*bottleneck], true);
                    em.push(format!("{p}.{site}.up.weight"), tag, &[*bottleneck, d], true);
                    em.push(format!("{p}.{site}.up.bias"), tag, &[d], true);
                }
            }
            PeftConfig::Lora { rank, targets, .. } => {
                for t in LoraTarget::ALL.iter().filter(|t| targets.contains(t)) {
                    let tag = ParameterTag::LoraFactor(i, *t);
                    em.push(format!("{p}.lora.{}.a", t.name()), tag, &[d, *rank], true);
                    em.push(format!("{p}.lora.{}.b", t.name()), tag, &[*rank, d], true);
                }
            }
            PeftConfig::Full | PeftConfig::Bitfit => {}
        }
    }

    if head == HeadKind::Classifier && dims.include_pooler {
        em.push("pooler.weight".into(), ParameterTag::Head, &[d, d], true);
        em.push("pooler.bias".into(), ParameterTag::Head, &[d], true);
    }
    let out = match head {
        HeadKind::Classifier => dims.num_classes,
        HeadKind::QaSpan => 2,
    };
    em.push("head.weight".into(), ParameterTag::Head, &[d, out], true);
    em.push("head.bias".into(), ParameterTag::Head, &[out], true);

    Ok(StaticCount { specs: em.specs })
}
