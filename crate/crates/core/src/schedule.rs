//! Progressive stage schedules and updated-parameter accounting.
//!
//! Blocks `1..=L` are split into `T` contiguous parts, low blocks first.
//! Epoch `t` trains one stage: a set of parts, plus the head, plus the
//! embedding layer. Three stage families are supported:
//!
//! * `Standard`: `S_t = {P_t, …, P_T}`, shrinking towards the top.
//! * `WithoutLowBlocks`: `S_t = {P_{t+1}, …, P_T}`; the last stage is head-only.
//! * `FromHighBlocks`: `S_t = {P_{T-t+1}, …, P_T}`, growing downwards.
//!
//! Plain fine-tuning is modelled as a one-part plan repeated every epoch.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamId, ParamSpec, ParameterRegistry, ParameterTag, StaticCount, TagClass};
use crate::peft::PeftGroups;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Standard,
    WithoutLowBlocks,
    FromHighBlocks,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Standard, Variant::WithoutLowBlocks, Variant::FromHighBlocks];

    pub fn short_name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::WithoutLowBlocks => "wolb",
            Variant::FromHighBlocks => "fromhb",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Variant::Standard),
            "wolb" | "without_low_blocks" => Ok(Variant::WithoutLowBlocks),
            "fromhb" | "from_high_blocks" => Ok(Variant::FromHighBlocks),
            other => Err(Error::config(format!("unknown schedule variant `{other}`"))),
        }
    }
}

/// Fine-tuning (every trainable parameter, every epoch) or a progressive schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[serde(alias = "ft")]
    FineTune,
    Progtune,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::FineTune => "ft",
            Mode::Progtune => "progtune",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ft" | "fine_tune" => Ok(Mode::FineTune),
            "progtune" | "pt" => Ok(Mode::Progtune),
            other => Err(Error::config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    pub num_blocks: usize,
    /// Inclusive, 1-based block ranges `P_1 … P_T`.
    pub parts: Vec<RangeInclusive<usize>>,
}

impl PartitionPlan {
    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    /// Blocks of part `p` (1-based).
    pub fn part(&self, p: usize) -> &RangeInclusive<usize> {
        &self.parts[p - 1]
    }
}

/// Splits `L` blocks into `T` parts of `⌊L/T⌋` blocks; the top part also
/// takes the `L mod T` leftover blocks.
pub fn partition_blocks(num_blocks: usize, num_parts: usize) -> Result<PartitionPlan> {
    if num_parts == 0 || num_parts > num_blocks {
        return Err(Error::config(format!(
            "cannot divide {num_blocks} blocks into {num_parts} parts"
        )));
    }
    let size = num_blocks / num_parts;
    let parts = (0..num_parts)
        .map(|p| {
            let start = p * size + 1;
            let end = if p + 1 == num_parts { num_blocks } else { start + size - 1 };
            start..=end
        })
        .collect();
    Ok(PartitionPlan { num_blocks, parts })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSchedule {
    pub mode: Mode,
    pub variant: Variant,
    pub plan: PartitionPlan,
    /// `stages[t - 1]` lists the part indices (1-based) trained in epoch `t`.
    /// The head is implicit in every stage.
    pub stages: Vec<Vec<usize>>,
    pub embeddings_always: bool,
}

/// Arranges a plan's parts into per-epoch stages.
pub fn build_stages(plan: &PartitionPlan, variant: Variant) -> StageSchedule {
    let t_max = plan.num_parts();
    let stages = (1..=t_max)
        .map(|t| {
            let first = match variant {
                Variant::Standard => t,
                Variant::WithoutLowBlocks => t + 1,
                Variant::FromHighBlocks => t_max - t + 1,
            };
            (first..=t_max).collect()
        })
        .collect();
    StageSchedule {
        mode: Mode::Progtune,
        variant,
        plan: plan.clone(),
        stages,
        embeddings_always: true,
    }
}

impl StageSchedule {
    /// Every trainable parameter in each of `epochs` epochs.
    pub fn fine_tune(num_blocks: usize, epochs: usize) -> Result<Self> {
        if epochs == 0 {
            return Err(Error::config("at least one epoch is required"));
        }
        Ok(StageSchedule {
            mode: Mode::FineTune,
            variant: Variant::Standard,
            plan: partition_blocks(num_blocks, 1)?,
            stages: vec![vec![1]; epochs],
            embeddings_always: true,
        })
    }

    /// Progressive schedule with one stage per epoch.
    pub fn progressive(num_blocks: usize, epochs: usize, variant: Variant) -> Result<Self> {
        Ok(build_stages(&partition_blocks(num_blocks, epochs)?, variant))
    }

    pub fn new(mode: Mode, variant: Variant, num_blocks: usize, epochs: usize) -> Result<Self> {
        match mode {
            Mode::FineTune => Self::fine_tune(num_blocks, epochs),
            Mode::Progtune => Self::progressive(num_blocks, epochs, variant),
        }
    }

    /// When `false`, embeddings train only in stages that include the lowest part.
    pub fn with_embeddings_always(mut self, always: bool) -> Self {
        self.embeddings_always = always;
        self
    }

    pub fn epochs(&self) -> usize {
        self.stages.len()
    }

    fn stage(&self, epoch: usize) -> Result<&Vec<usize>> {
        if epoch == 0 || epoch > self.stages.len() {
            return Err(Error::contract(format!(
                "epoch {epoch} is outside [1, {}]",
                self.stages.len()
            )));
        }
        Ok(&self.stages[epoch - 1])
    }

    /// Blocks trained in `epoch`, ascending.
    pub fn stage_blocks(&self, epoch: usize) -> Result<Vec<usize>> {
        Ok(self
            .stage(epoch)?
            .iter()
            .flat_map(|&p| self.plan.part(p).clone())
            .collect())
    }

    pub fn trains_embeddings(&self, epoch: usize) -> Result<bool> {
        Ok(self.embeddings_always || self.stage(epoch)?.contains(&1))
    }
}

/// Tag and size lookup by parameter id, for registries and analytic counts alike.
pub trait ParamTable {
    fn tag(&self, id: ParamId) -> ParameterTag;
    fn numel(&self, id: ParamId) -> u64;
}

impl ParamTable for ParameterRegistry {
    fn tag(&self, id: ParamId) -> ParameterTag {
        self.get(id).tag
    }

    fn numel(&self, id: ParamId) -> u64 {
        self.get(id).value.numel() as u64
    }
}

impl ParamTable for [ParamSpec] {
    fn tag(&self, id: ParamId) -> ParameterTag {
        self[id.index()].tag
    }

    fn numel(&self, id: ParamId) -> u64 {
        self[id.index()].numel()
    }
}

impl ParamTable for StaticCount {
    fn tag(&self, id: ParamId) -> ParameterTag {
        self.specs.as_slice().tag(id)
    }

    fn numel(&self, id: ParamId) -> u64 {
        self.specs.as_slice().numel(id)
    }
}

/// Parameters to update in `epoch`: the block groups of the stage's parts,
/// the head, and trainable embedding parameters.
pub fn trainable_set<P: ParamTable + ?Sized>(
    schedule: &StageSchedule,
    epoch: usize,
    table: &P,
    groups: &PeftGroups,
) -> Result<BTreeSet<ParamId>> {
    if groups.num_blocks() != schedule.plan.num_blocks {
        return Err(Error::contract(format!(
            "groups cover {} blocks, schedule {}",
            groups.num_blocks(),
            schedule.plan.num_blocks
        )));
    }
    let embeddings = schedule.trains_embeddings(epoch)?;
    let mut out: BTreeSet<ParamId> = schedule
        .stage_blocks(epoch)?
        .into_iter()
        .flat_map(|b| groups.per_block[b - 1].iter().copied())
        .collect();
    for &id in &groups.non_block {
        if table.tag(id) != ParameterTag::Embedding || embeddings {
            out.insert(id);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateLedger {
    pub per_epoch: Vec<u64>,
    pub cumulative: u64,
    pub breakdown: Vec<BTreeMap<TagClass, u64>>,
}

impl UpdateLedger {
    /// Ledger of explicit per-epoch parameter sets.
    pub fn from_epoch_sets<P: ParamTable + ?Sized>(table: &P, sets: &[BTreeSet<ParamId>]) -> Self {
        let mut ledger = UpdateLedger::default();
        for set in sets {
            let mut by_class = BTreeMap::new();
            let mut total = 0;
            for &id in set {
                let n = table.numel(id);
                total += n;
                *by_class.entry(table.tag(id).class()).or_insert(0) += n;
            }
            ledger.per_epoch.push(total);
            ledger.cumulative += total;
            ledger.breakdown.push(by_class);
        }
        ledger
    }

    /// `1 - self / baseline` over cumulative counts.
    pub fn reduction_against(&self, baseline: &UpdateLedger) -> f64 {
        if baseline.cumulative == 0 {
            return 0.0;
        }
        1.0 - self.cumulative as f64 / baseline.cumulative as f64
    }
}

/// Updated-parameter ledger: the size of each epoch's trainable set.
pub fn count_updated_params<P: ParamTable + ?Sized>(
    schedule: &StageSchedule,
    table: &P,
    groups: &PeftGroups,
) -> Result<UpdateLedger> {
    let sets = (1..=schedule.epochs())
        .map(|t| trainable_set(schedule, t, table, groups))
        .collect::<Result<Vec<_>>>()?;
    Ok(UpdateLedger::from_epoch_sets(table, &sets))
}

/// Fraction of updated parameters saved by the standard progressive
/// schedule relative to fine-tuning for the same number of epochs.
pub fn predicted_reduction<P: ParamTable + ?Sized>(
    num_blocks: usize,
    epochs: usize,
    table: &P,
    groups: &PeftGroups,
) -> Result<f64> {
    let ft = count_updated_params(&StageSchedule::fine_tune(num_blocks, epochs)?, table, groups)?;
    let pt = count_updated_params(
        &StageSchedule::progressive(num_blocks, epochs, Variant::Standard)?,
        table,
        groups,
    )?;
    Ok(pt.reduction_against(&ft))
}
