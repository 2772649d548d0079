//! Training loop driven by a stage schedule.
//!
//! Each epoch freezes everything outside its trainable set (frozen
//! parameters are bound as constants, so the backward pass never reaches
//! them), makes one shuffled pass over the training split and evaluates.
//! The run records which parameters actually received gradients and checks
//! that against the schedule's ledger.

mod optim;

pub use optim::{Optimizer, OptimizerConfig};

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, HeadKind, Model, ModelConfig, ParamId, ParameterRegistry, ParameterTag, Prediction};
use crate::peft::{self, PeftConfig};
use crate::schedule::{count_updated_params, trainable_set, Mode, StageSchedule, UpdateLedger, Variant};
use crate::tasks::{collate, Dataset, Example};
use crate::tensor::{Tape, Tensor};

const EVAL_BATCH: usize = 64;

/// `base_lr · (1 − step/total_steps)`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::contract("total_steps must be at least 1"));
    }
    if step > total_steps {
        return Err(Error::contract(format!("step {step} is past total_steps {total_steps}")));
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_true")]
    pub embeddings_always: bool,
    #[serde(default)]
    pub peft: PeftConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_mode() -> Mode {
    Mode::Progtune
}

fn default_variant() -> Variant {
    Variant::Standard
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr must be a positive number"));
        }
        match self.optimizer {
            OptimizerConfig::Adamw {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let unit = |b: f64| (0.0..1.0).contains(&b);
                if !unit(beta1) || !unit(beta2) || !(eps > 0.0) || !(weight_decay >= 0.0) {
                    return Err(Error::config("adamw needs betas in [0, 1), eps > 0, weight_decay ≥ 0"));
                }
            }
            OptimizerConfig::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::config("sgd momentum must lie in [0, 1)"));
                }
            }
        }
        Ok(())
    }

    /// The stage schedule this config describes for an `num_blocks` model.
    pub fn schedule(&self, num_blocks: usize) -> Result<StageSchedule> {
        Ok(StageSchedule::new(self.mode, self.variant, num_blocks, self.epochs)?
            .with_embeddings_always(self.embeddings_always))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Mean training loss over the epoch's batches.
    pub epoch_loss: Vec<f64>,
    pub train_acc: Vec<f64>,
    pub eval_acc: Vec<f64>,
    /// Learning rate of each epoch's first step.
    pub lr_start: Vec<f64>,
    /// Every step's learning rate, followed by the terminal value 0.
    pub lr_trace: Vec<f64>,
    #[serde(skip)]
    pub wall_time: Vec<f64>,
}

impl MetricsRecord {
    pub fn epochs(&self) -> usize {
        self.epoch_loss.len()
    }
}

/// Builds the model for a run and applies its PEFT regime. The backbone is
/// seeded with `seed`, PEFT modules with `seed + 1`.
pub fn prepare_model(model_config: &ModelConfig, config: &TrainConfig) -> Result<(Model, ParameterRegistry)> {
    let (mut model, mut registry) = build_model(model_config, config.seed)?;
    peft::apply(&mut model, &mut registry, &config.peft, config.seed.wrapping_add(1))?;
    Ok((model, registry))
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng
}

fn uses_spans(model: &Model) -> bool {
    model.config.head == HeadKind::QaSpan
}

fn total_steps(train_n: usize, batch_size: usize, epochs: usize) -> usize {
    epochs * train_n.div_ceil(batch_size)
}

/// Forward + backward on one batch; gradients are added to the registry.
fn batch_step(model: &Model, registry: &mut ParameterRegistry, examples: &[&Example], pad_to: usize, step: usize) -> Result<f64> {
    let (batch, targets) = collate(examples, pad_to, uses_spans(model))?;
    let mut tape = Tape::new();
    let vars = registry.bind(&mut tape);
    let logits = model.forward(&mut tape, &vars, &batch)?;
    let loss = model.loss(&mut tape, logits, &batch, &targets)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Divergence { step });
    }
    let grads = tape.backward(loss)?;
    registry.accumulate_grads(&vars, &grads)?;
    Ok(value)
}

struct EpochOutcome {
    metrics: MetricsRecord,
    /// Parameters that received a gradient, per epoch.
    touched: Vec<BTreeSet<ParamId>>,
}

/// The shared loop: epoch `t` trains exactly `sets[t - 1]`.
fn run_epochs(
    model: &Model,
    registry: &mut ParameterRegistry,
    sets: &[BTreeSet<ParamId>],
    data: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn FnMut(usize, &ParameterRegistry),
) -> Result<EpochOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    let total = total_steps(data.train.len(), config.batch_size, sets.len());
    let mut optimizer = Optimizer::new(config.optimizer.clone());
    let mut rng = shuffle_rng(config.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut metrics = MetricsRecord::default();
    let mut touched = Vec::with_capacity(sets.len());
    let mut step = 0;
    observer(0, registry);

    for (t, set) in sets.iter().enumerate() {
        let epoch = t + 1;
        let started = Instant::now();
        registry.set_active(set);
        registry.zero_grad();
        let frozen: Vec<(ParamId, Tensor)> = registry
            .iter()
            .filter(|(id, _)| !set.contains(id))
            .map(|(id, e)| (id, e.value.clone()))
            .collect();

        order.shuffle(&mut rng);
        let mut seen = BTreeSet::new();
        let mut loss_sum = 0.0;
        let mut batches = 0;
        metrics.lr_start.push(lr_at(step, total, config.base_lr)?);
        for chunk in order.chunks(config.batch_size) {
            let examples: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
            loss_sum += batch_step(model, registry, &examples, data.seq_len, step)?;
            seen.extend(registry.iter().filter(|(_, e)| e.grad.is_some()).map(|(id, _)| id));
            let lr = lr_at(step, total, config.base_lr)?;
            optimizer.step(registry, set, lr).map_err(|e| match e {
                Error::FreezeViolation { name, .. } => Error::FreezeViolation { name, epoch },
                other => other,
            })?;
            registry.zero_grad();
            metrics.lr_trace.push(lr);
            step += 1;
            batches += 1;
        }

        for (id, before) in &frozen {
            let e = registry.get(*id);
            if !e.value.bit_eq(before) {
                return Err(Error::FreezeViolation {
                    name: e.name.clone(),
                    epoch,
                });
            }
        }

        metrics.epoch_loss.push(loss_sum / batches as f64);
        metrics.train_acc.push(evaluate(model, registry, &data.train, data.seq_len)?);
        metrics.eval_acc.push(if data.eval.is_empty() {
            f64::NAN
        } else {
            evaluate(model, registry, &data.eval, data.seq_len)?
        });
        metrics.wall_time.push(started.elapsed().as_secs_f64());
        touched.push(seen);
        observer(epoch, registry);
    }
    metrics.lr_trace.push(lr_at(total, total, config.base_lr)?);
    registry.activate_trainable();
    Ok(EpochOutcome { metrics, touched })
}

/// Trains `model` under `schedule`. The returned ledger is measured from the
/// parameters that actually received gradients and must equal the
/// schedule's prediction exactly.
pub fn train_run(
    model: &Model,
    registry: &mut ParameterRegistry,
    schedule: &StageSchedule,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(MetricsRecord, UpdateLedger)> {
    train_run_observed(model, registry, schedule, data, config, &mut |_, _| {})
}

/// [`train_run`] with a callback at every epoch boundary: `observer(0, ..)`
/// before the first epoch and `observer(t, ..)` after epoch `t`.
pub fn train_run_observed(
    model: &Model,
    registry: &mut ParameterRegistry,
    schedule: &StageSchedule,
    data: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn FnMut(usize, &ParameterRegistry),
) -> Result<(MetricsRecord, UpdateLedger)> {
    if schedule.epochs() != config.epochs {
        return Err(Error::config(format!(
            "schedule has {} stages but the run declares {} epochs",
            schedule.epochs(),
            config.epochs
        )));
    }
    let applied = model.applied_peft().cloned().unwrap_or(PeftConfig::Full);
    if applied != config.peft {
        return Err(Error::State(format!(
            "model carries {} but the run asks for {}",
            applied.name(),
            config.peft.name()
        )));
    }
    let groups = peft::peft_trainable_set(model, registry, &config.peft)?;
    let sets = (1..=schedule.epochs())
        .map(|t| trainable_set(schedule, t, &*registry, &groups))
        .collect::<Result<Vec<_>>>()?;

    let outcome = run_epochs(model, registry, &sets, data, config, observer)?;
    let observed = UpdateLedger::from_epoch_sets(&*registry, &outcome.touched);
    let predicted = count_updated_params(schedule, &*registry, &groups)?;
    for (t, (&o, &p)) in observed.per_epoch.iter().zip(&predicted.per_epoch).enumerate() {
        if o != p {
            return Err(Error::LedgerMismatch {
                epoch: t + 1,
                observed: o,
                predicted: p,
            });
        }
    }
    Ok((outcome.metrics, observed))
}

/// Textbook fine-tuning: every regime-trainable parameter, every epoch, no
/// schedule involved. Shares shuffling, learning-rate and optimizer
/// conventions with [`train_run`].
pub fn plain_fine_tune(model: &Model, registry: &mut ParameterRegistry, data: &Dataset, config: &TrainConfig) -> Result<()> {
    config.validate()?;
    let trainable = registry.trainable_ids();
    registry.set_active(&trainable);
    let total = total_steps(data.train.len(), config.batch_size, config.epochs);
    let mut optimizer = Optimizer::new(config.optimizer.clone());
    let mut rng = shuffle_rng(config.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            registry.zero_grad();
            let examples: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
            batch_step(model, registry, &examples, data.seq_len, step)?;
            optimizer.step(registry, &trainable, lr_at(step, total, config.base_lr)?)?;
            step += 1;
        }
    }
    registry.zero_grad();
    Ok(())
}

/// Fraction of equal predictions.
pub fn accuracy(predictions: &[Prediction], targets: &[Prediction]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::contract("cannot score an empty split"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::shape("accuracy", &[predictions.len()], &[targets.len()]));
    }
    let hits = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Classification accuracy, or exact span match for span heads.
pub fn evaluate(model: &Model, registry: &ParameterRegistry, examples: &[Example], pad_to: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let spans = uses_spans(model);
    let mut predictions = Vec::with_capacity(examples.len());
    let mut targets = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let (batch, _) = collate(&refs, pad_to, spans)?;
        predictions.extend(model.predict(registry, &batch)?);
        for e in chunk {
            targets.push(match (spans, e.span) {
                (true, Some((s, t))) => Prediction::Span(s, t),
                (true, None) => return Err(Error::config("task provides no answer spans")),
                (false, _) => Prediction::Class(e.label),
            });
        }
    }
    accuracy(&predictions, &targets)
}

/// Trainable set of the block probe: embeddings, block `index` and the head.
pub fn probe_set(model: &Model, registry: &ParameterRegistry, index: usize) -> Result<BTreeSet<ParamId>> {
    let l = model.config.num_blocks;
    if index == 0 || index > l {
        return Err(Error::contract(format!("probe block {index} is outside [1, {l}]")));
    }
    Ok(registry
        .iter()
        .filter(|(_, e)| matches!(e.tag, ParameterTag::Embedding | ParameterTag::Head) || e.tag == ParameterTag::Block(index))
        .map(|(id, _)| id)
        .collect())
}

/// Trains a fresh full model in which only embeddings, block `index` and the
/// head learn, for `config.epochs` epochs; returns eval accuracy.
pub fn block_probe(model_config: &ModelConfig, data: &Dataset, index: usize, config: &TrainConfig) -> Result<f64> {
    let (model, mut registry) = build_model(model_config, config.seed)?;
    let set = probe_set(&model, &registry, index)?;
    let sets = vec![set; config.epochs];
    run_epochs(&model, &mut registry, &sets, data, config, &mut |_, _| {})?;
    let split = if data.eval.is_empty() { &data.train } else { &data.eval };
    evaluate(&model, &registry, split, data.seq_len)
}

/// Probe accuracy for every block, lowest first.
pub fn probe_all(model_config: &ModelConfig, data: &Dataset, config: &TrainConfig) -> Result<Vec<f64>> {
    (1..=model_config.num_blocks)
        .map(|i| block_probe(model_config, data, i, config))
        .collect()
}
