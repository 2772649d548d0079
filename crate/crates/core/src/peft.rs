//! Adapter tuning, BitFit and LoRA as trainable-set selections over the
//! registry. Each regime tags its per-block parameters so progressive
//! schedules can divide them block by block.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Adapter, Builder, LoraFactors, LoraTarget, Model, ParamId, ParamSpec, ParameterRegistry,
    ParameterTag,
};
use crate::tensor::{gemm_acc, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PeftConfig {
    #[default]
    Full,
    Adapter {
        bottleneck: usize,
    },
    Bitfit,
    Lora {
        rank: usize,
        alpha: f64,
        #[serde(default = "default_lora_targets")]
        targets: Vec<LoraTarget>,
    },
}

fn default_lora_targets() -> Vec<LoraTarget> {
    vec![LoraTarget::Wq, LoraTarget::Wv]
}

impl PeftConfig {
    pub fn name(&self) -> &'static str {
        match self {
            PeftConfig::Full => "full",
            PeftConfig::Adapter { .. } => "adapter",
            PeftConfig::Bitfit => "bitfit",
            PeftConfig::Lora { .. } => "lora",
        }
    }

    /// A regime by name with hyperparameters scaled to `hidden`: adapter
    /// bottleneck 64, LoRA rank 8 (alpha 16) on `{Wq, Wv}`, both capped at
    /// half the hidden size.
    pub fn with_defaults(kind: &str, hidden: usize) -> Result<Self> {
        let cap = |v: usize| v.min(hidden / 2).max(1);
        match kind {
            "full" => Ok(PeftConfig::Full),
            "adapter" => Ok(PeftConfig::Adapter { bottleneck: cap(64) }),
            "bitfit" => Ok(PeftConfig::Bitfit),
            "lora" => {
                let rank = cap(8);
                Ok(PeftConfig::Lora {
                    rank,
                    alpha: 2.0 * rank as f64,
                    targets: default_lora_targets(),
                })
            }
            other => Err(Error::config(format!("unknown PEFT kind `{other}`"))),
        }
    }

    pub fn validate(&self, hidden: usize) -> Result<()> {
        match self {
            PeftConfig::Adapter { bottleneck } if *bottleneck == 0 || *bottleneck >= hidden => {
                Err(Error::config(format!(
                    "adapter bottleneck {bottleneck} must be in [1, {hidden})"
                )))
            }
            PeftConfig::Lora { rank, .. } if *rank == 0 || *rank >= hidden => Err(Error::config(
                format!("LoRA rank {rank} must be in [1, {hidden})"),
            )),
            PeftConfig::Lora { targets, .. } if targets.is_empty() => {
                Err(Error::config("LoRA needs at least one target matrix"))
            }
            PeftConfig::Lora { alpha, .. } if !alpha.is_finite() => {
                Err(Error::config("LoRA alpha must be finite"))
            }
            _ => Ok(()),
        }
    }
}

/// Divisible per-block trainable groups plus the always-trainable remainder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PeftGroups {
    /// `per_block[i - 1]` holds the trainable parameters of block `i`.
    pub per_block: Vec<Vec<ParamId>>,
    /// Head and any trainable embedding-side parameters.
    pub non_block: Vec<ParamId>,
}

impl PeftGroups {
    pub fn all(&self) -> BTreeSet<ParamId> {
        self.per_block
            .iter()
            .flatten()
            .chain(&self.non_block)
            .copied()
            .collect()
    }

    pub fn num_blocks(&self) -> usize {
        self.per_block.len()
    }
}

/// Groups the trainable entries of `specs` (indexed like registry ids).
pub fn group_specs(specs: &[ParamSpec], num_blocks: usize) -> Result<PeftGroups> {
    let mut groups = PeftGroups {
        per_block: vec![Vec::new(); num_blocks],
        non_block: Vec::new(),
    };
    for (i, spec) in specs.iter().enumerate() {
        if !spec.trainable {
            continue;
        }
        match spec.tag.block() {
            Some(b) if (1..=num_blocks).contains(&b) => groups.per_block[b - 1].push(ParamId(i)),
            Some(b) => {
                return Err(Error::contract(format!(
                    "`{}` is tagged with block {b} outside [1, {num_blocks}]",
                    spec.name
                )))
            }
            None => groups.non_block.push(ParamId(i)),
        }
    }
    Ok(groups)
}

fn ensure_unmodified(model: &Model) -> Result<()> {
    match model.peft {
        None | Some(PeftConfig::Full) => Ok(()),
        Some(ref p) => Err(Error::State(format!("{} is already applied", p.name()))),
    }
}

/// Freezes everything except parameters for which `keep` holds.
fn select_trainable(registry: &mut ParameterRegistry, keep: impl Fn(&ParameterTag, &str) -> bool) {
    let ids: Vec<ParamId> = registry.ids().collect();
    for id in ids {
        let e = registry.get_mut(id);
        e.trainable = keep(&e.tag, &e.name);
        e.requires_grad = e.trainable;
    }
}

/// Inserts a bottleneck adapter after the attention output and after the FFN
/// of every block. Down projections are random, up projections zero, so the
/// network computes the same function until the adapters train.
pub fn apply_adapter(
    model: &mut Model,
    registry: &mut ParameterRegistry,
    bottleneck: usize,
    seed: u64,
) -> Result<()> {
    ensure_unmodified(model)?;
    let cfg = PeftConfig::Adapter { bottleneck };
    cfg.validate(model.config.hidden)?;
    let d = model.config.hidden;
    let mut b = Builder::new(registry, seed);
    for block in &mut model.blocks {
        let i = block.index;
        let tag = ParameterTag::AdapterIn(i);
        let mut make = |site: &str| Adapter {
            down: b.linear(&format!("blocks.{i}.{site}.down"), tag, d, bottleneck, false),
            up: b.linear(&format!("blocks.{i}.{site}.up"), tag, bottleneck, d, true),
        };
        block.attn_adapter = Some(make("attn_adapter"));
        block.ffn_adapter = Some(make("ffn_adapter"));
    }
    select_trainable(registry, |tag, _| {
        matches!(tag, ParameterTag::AdapterIn(_) | ParameterTag::Head)
    });
    model.peft = Some(cfg);
    Ok(())
}

/// Trains only bias vectors (dense biases and layer-norm shifts) plus the
/// head. Block biases are retagged `BiasTerm(i)`; the embedding layer-norm
/// shift stays under `Embedding`.
pub fn apply_bitfit(model: &mut Model, registry: &mut ParameterRegistry) -> Result<()> {
    ensure_unmodified(model)?;
    let mut bias_ids = BTreeSet::new();
    for block in &model.blocks {
        for lin in [block.q, block.k, block.v, block.o, block.ffn_in, block.ffn_out] {
            bias_ids.insert(lin.bias);
        }
        bias_ids.insert(block.attn_norm.beta);
        bias_ids.insert(block.ffn_norm.beta);
        for ad in [block.attn_adapter, block.ffn_adapter].into_iter().flatten() {
            bias_ids.insert(ad.down.bias);
            bias_ids.insert(ad.up.bias);
        }
    }
    for &id in &bias_ids {
        let e = registry.get_mut(id);
        if let Some(i) = e.tag.block() {
            e.tag = ParameterTag::BiasTerm(i);
        }
    }
    let emb_beta = model.embeddings.norm.beta;
    let ids: Vec<ParamId> = registry.ids().collect();
    for id in ids {
        let e = registry.get_mut(id);
        e.trainable = matches!(e.tag, ParameterTag::BiasTerm(_) | ParameterTag::Head) || id == emb_beta;
        e.requires_grad = e.trainable;
    }
    model.peft = Some(PeftConfig::Bitfit);
    Ok(())
}

/// Adds `(alpha / rank) · (x A) B` to each target projection of every block.
/// `A` is random, `B` zero, and the base weights are frozen.
pub fn apply_lora(
    model: &mut Model,
    registry: &mut ParameterRegistry,
    rank: usize,
    alpha: f64,
    targets: &[LoraTarget],
    seed: u64,
) -> Result<()> {
    ensure_unmodified(model)?;
    let mut targets: Vec<LoraTarget> = targets.to_vec();
    targets.sort();
    targets.dedup();
    let cfg = PeftConfig::Lora {
        rank,
        alpha,
        targets: targets.clone(),
    };
    cfg.validate(model.config.hidden)?;
    let d = model.config.hidden;
    let scale = alpha / rank as f64;
    let mut b = Builder::new(registry, seed);
    for block in &mut model.blocks {
        let i = block.index;
        for &t in &targets {
            let tag = ParameterTag::LoraFactor(i, t);
            let p = format!("blocks.{i}.lora.{}", t.name());
            let a = b.random(format!("{p}.a"), tag, &[d, rank]);
            let bf = b.zeros(format!("{p}.b"), tag, &[rank, d]);
            block.lora[t as usize] = Some(LoraFactors { a, b: bf, scale });
        }
    }
    select_trainable(registry, |tag, _| {
        matches!(tag, ParameterTag::LoraFactor(..) | ParameterTag::Head)
    });
    model.peft = Some(cfg);
    Ok(())
}

/// Applies `peft` to a freshly built model. `Full` only marks the state.
pub fn apply(model: &mut Model, registry: &mut ParameterRegistry, peft: &PeftConfig, seed: u64) -> Result<()> {
    match peft {
        PeftConfig::Full => {
            ensure_unmodified(model)?;
            model.peft = Some(PeftConfig::Full);
            Ok(())
        }
        PeftConfig::Adapter { bottleneck } => apply_adapter(model, registry, *bottleneck, seed),
        PeftConfig::Bitfit => apply_bitfit(model, registry),
        PeftConfig::Lora {
            rank,
            alpha,
            targets,
        } => apply_lora(model, registry, *rank, *alpha, targets, seed),
    }
}

/// Per-block trainable groups for an applied regime.
pub fn peft_trainable_set(model: &Model, registry: &ParameterRegistry, peft: &PeftConfig) -> Result<PeftGroups> {
    let applied = match (&model.peft, peft) {
        (None, PeftConfig::Full) => true,
        (Some(a), p) => a == p,
        (None, _) => false,
    };
    if !applied {
        return Err(Error::State(format!(
            "{} has not been applied to this model",
            peft.name()
        )));
    }
    group_specs(&registry.specs(), model.config.num_blocks)
}

/// Folds every LoRA pair into its base weight: `W' = W + scale · A B`.
/// The result is a plain, fully trainable model without the factors.
pub fn merge_lora(model: &Model, registry: &ParameterRegistry) -> Result<(Model, ParameterRegistry)> {
    let is_factor = |tag: ParameterTag| matches!(tag, ParameterTag::LoraFactor(..));
    let kept = registry.iter().take_while(|(_, e)| !is_factor(e.tag)).count();
    if registry.iter().skip(kept).any(|(_, e)| !is_factor(e.tag)) {
        return Err(Error::State("LoRA factors are not the last registered parameters".into()));
    }
    let mut merged = model.clone();
    let mut reg = ParameterRegistry::new();
    for (_, e) in registry.iter().take(kept) {
        reg.register(e.name.clone(), e.tag, e.value.clone());
    }
    let d = model.config.hidden;
    for block in &mut merged.blocks {
        for t in LoraTarget::ALL {
            let Some(f) = block.lora[t as usize].take() else { continue };
            let a = registry.get(f.a).value.data();
            let bm = registry.get(f.b).value.data();
            let rank = registry.get(f.a).value.shape()[1];
            let mut delta = vec![0.0; d * d];
            gemm_acc(a, bm, &mut delta, d, rank, d);
            let w = &mut reg.get_mut(block.projection(t).weight).value;
            for (wv, dv) in w.data_mut().iter_mut().zip(&delta) {
                *wv += f.scale * dv;
            }
        }
    }
    merged.peft = None;
    Ok((merged, reg))
}

/// Overwrites a parameter with fresh values (test and tooling helper).
pub fn set_values(registry: &mut ParameterRegistry, id: ParamId, values: Tensor) -> Result<()> {
    let e = registry.get_mut(id);
    if e.value.shape() != values.shape() {
        return Err(Error::shape("set_values", e.value.shape(), values.shape()));
    }
    e.value = values;
    Ok(())
}
