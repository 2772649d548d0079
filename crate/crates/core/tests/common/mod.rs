//! Oracles and checks shared by the integration tests and the acceptance
//! runner. Each `check_*` returns a short report on success and a
//! description of the first failure otherwise.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::time::Instant;

use progtune::model::{
    build_model, static_param_count, Arch, Batch, HeadKind, LoraTarget, Model, ModelConfig, ParamId, ParamSpec,
    ParameterRegistry, ParameterTag, Targets,
};
use progtune::peft::{self, group_specs, PeftConfig};
use progtune::schedule::{count_updated_params, predicted_reduction, Mode, StageSchedule, Variant};
use progtune::tasks::{generate_task, Dataset, TaskKind, TaskSpec};
use progtune::tensor::{grad_check, Tape, Tensor, Var};
use progtune::trainer::{plain_fine_tune, prepare_model, train_run, train_run_observed, OptimizerConfig, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

fn fail<E: std::fmt::Display>(ctx: &str) -> impl Fn(E) -> String + '_ {
    move |e| format!("{ctx}: {e}")
}

// ---------------------------------------------------------------- schedules

/// Blocks trained in epoch `t`, written straight from the partition and
/// stage definitions: part `j` holds blocks `(j-1)k+1 ..= jk` with
/// `k = ⌊L/T⌋`, the last part running to `L`.
pub fn oracle_stage_blocks(l: usize, t_max: usize, variant: Variant, t: usize) -> BTreeSet<usize> {
    let k = l / t_max;
    let part = |j: usize| -> Vec<usize> {
        let lo = (j - 1) * k + 1;
        let hi = if j == t_max { l } else { j * k };
        (lo..=hi).collect()
    };
    let first = match variant {
        Variant::Standard => t,
        Variant::WithoutLowBlocks => t + 1,
        Variant::FromHighBlocks => t_max + 1 - t,
    };
    let mut out = BTreeSet::new();
    let mut j = first;
    while j <= t_max {
        out.extend(part(j));
        j += 1;
    }
    out
}

/// Per-epoch updated-parameter counts from the oracle stages: every
/// trainable spec whose block is in the stage, plus every trainable spec
/// outside the blocks.
pub fn oracle_ledger(specs: &[ParamSpec], l: usize, t_max: usize, variant: Variant, mode: Mode) -> Vec<u64> {
    (1..=t_max)
        .map(|t| {
            let blocks: BTreeSet<usize> = match mode {
                Mode::FineTune => (1..=l).collect(),
                Mode::Progtune => oracle_stage_blocks(l, t_max, variant, t),
            };
            specs
                .iter()
                .filter(|s| s.trainable)
                .filter(|s| s.tag.block().is_none_or(|b| blocks.contains(&b)))
                .map(|s| s.shape.iter().product::<usize>() as u64)
                .sum()
        })
        .collect()
}

pub fn peft_kinds(hidden: usize) -> Vec<PeftConfig> {
    ["full", "adapter", "bitfit", "lora"]
        .iter()
        .map(|k| PeftConfig::with_defaults(k, hidden).unwrap())
        .collect()
}

pub fn model_with_blocks(l: usize) -> ModelConfig {
    ModelConfig {
        num_blocks: l,
        ..ModelConfig::tiny()
    }
}

pub fn tiny_data(train_n: usize, seq_len: usize, seed: u64) -> Dataset {
    generate_task(&TaskSpec {
        kind: TaskKind::KeywordDetect,
        vocab_size: 11,
        seq_len,
        num_classes: 2,
        train_n,
        eval_n: 4,
        seed,
    })
    .unwrap()
}

pub fn train_config(epochs: usize, mode: Mode, variant: Variant, peft: PeftConfig) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        base_lr: 1e-2,
        seed: 3,
        mode,
        variant,
        embeddings_always: true,
        peft,
        optimizer: OptimizerConfig::default(),
    }
}

/// Schedule stages against the oracle for every `(L, T, variant)`.
pub fn check_stage_oracle() -> Check {
    let mut cases = 0;
    for l in 2..=8 {
        for t_max in 1..=l {
            for v in Variant::ALL {
                let s = StageSchedule::progressive(l, t_max, v).map_err(fail("schedule"))?;
                for t in 1..=t_max {
                    let got: BTreeSet<usize> = s.stage_blocks(t).map_err(fail("stage"))?.into_iter().collect();
                    let want = oracle_stage_blocks(l, t_max, v, t);
                    if got != want {
                        return Err(format!("L={l} T={t_max} {v} t={t}: {got:?} != {want:?}"));
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("{cases} stage sets match"))
}

/// Trains every `(L, T, variant, PEFT)` combination on a tiny model and
/// compares the instrumented ledger with both the schedule module and the
/// oracle. With `freeze` set, it also checks at every epoch boundary that
/// parameters outside the oracle's stage are bit-identical.
pub fn check_ledger_sweep(max_l: usize, freeze: bool) -> Check {
    let data = tiny_data(4, 5, 11);
    let mut runs = 0;
    for l in 2..=max_l {
        let mcfg = model_with_blocks(l);
        for t_max in 1..=l {
            for v in Variant::ALL {
                for peft in peft_kinds(mcfg.hidden) {
                    let ctx = format!("L={l} T={t_max} {v} {}", peft.name());
                    let cfg = train_config(t_max, Mode::Progtune, v, peft.clone());
                    let (model, mut reg) = prepare_model(&mcfg, &cfg).map_err(fail(&ctx))?;
                    let specs = reg.specs();
                    let schedule = cfg.schedule(l).map_err(fail(&ctx))?;
                    let groups = peft::peft_trainable_set(&model, &reg, &peft).map_err(fail(&ctx))?;
                    let predicted = count_updated_params(&schedule, &reg, &groups).map_err(fail(&ctx))?;

                    let mut snapshot: Vec<Tensor> = Vec::new();
                    let mut violation: Option<String> = None;
                    let mut observe = |epoch: usize, r: &ParameterRegistry| {
                        let now: Vec<Tensor> = r.iter().map(|(_, e)| e.value.clone()).collect();
                        if freeze && epoch > 0 && violation.is_none() {
                            let stage = oracle_stage_blocks(l, t_max, v, epoch);
                            for (i, (id, e)) in r.iter().enumerate() {
                                let in_stage =
                                    e.trainable && e.tag.block().is_none_or(|b| stage.contains(&b));
                                if !in_stage && !snapshot[i].bit_eq(&now[i]) {
                                    violation = Some(format!("{ctx}: `{}` ({:?}) changed in epoch {epoch}", e.name, id));
                                    break;
                                }
                            }
                        }
                        snapshot = now;
                    };
                    let (_, ledger) =
                        train_run_observed(&model, &mut reg, &schedule, &data, &cfg, &mut observe).map_err(fail(&ctx))?;
                    if let Some(v) = violation {
                        return Err(v);
                    }
                    let oracle = oracle_ledger(&specs, l, t_max, v, Mode::Progtune);
                    if ledger.per_epoch != predicted.per_epoch || ledger.per_epoch != oracle {
                        return Err(format!(
                            "{ctx}: instrumented {:?}, predicted {:?}, oracle {:?}",
                            ledger.per_epoch, predicted.per_epoch, oracle
                        ));
                    }
                    runs += 1;
                }
            }
        }
    }
    Ok(format!("{runs} runs: instrumented = predicted = oracle{}", if freeze { ", frozen bytes unchanged" } else { "" }))
}

// ------------------------------------------------------------ counting

pub struct CountCase {
    pub label: &'static str,
    pub arch: Arch,
    pub head: HeadKind,
    pub epochs: usize,
    pub mode: Mode,
    pub expected: f64,
}

pub fn updated_params(arch: Arch, head: HeadKind, epochs: usize, mode: Mode) -> Result<(u64, u64), String> {
    let dims = arch.dims(head);
    let count = static_param_count(&dims, head, &PeftConfig::Full).map_err(fail("count"))?;
    let groups = group_specs(&count.specs, dims.num_blocks).map_err(fail("groups"))?;
    let schedule = StageSchedule::new(mode, Variant::Standard, dims.num_blocks, epochs).map_err(fail("schedule"))?;
    let ledger = count_updated_params(&schedule, &count, &groups).map_err(fail("ledger"))?;
    Ok((count.total(), ledger.cumulative))
}

pub fn check_published_counts() -> Check {
    let started = Instant::now();
    let within = |got: f64, want: f64| (got / want - 1.0).abs() <= 0.02;
    let mut lines = Vec::new();

    let (total, ft) = updated_params(Arch::BertBase, HeadKind::Classifier, 3, Mode::FineTune)?;
    for (label, got, want) in [("base total", total as f64, 110e6), ("base FT x3", ft as f64, 330e6)] {
        if !within(got, want) {
            return Err(format!("{label}: {got} vs {want}"));
        }
        lines.push(format!("{label} {:.2}M", got / 1e6));
    }
    let cases = [
        ("qa FT", Arch::BertBase, HeadKind::QaSpan, Mode::FineTune, 326.7e6),
        ("qa PT", Arch::BertBase, HeadKind::QaSpan, Mode::Progtune, 241.6e6),
        ("large FT", Arch::BertLarge, HeadKind::Classifier, Mode::FineTune, 1005.4e6),
        ("large PT", Arch::BertLarge, HeadKind::Classifier, Mode::Progtune, 703.1e6),
    ];
    for (label, arch, head, mode, want) in cases {
        let (_, got) = updated_params(arch, head, 3, mode)?;
        if !within(got as f64, want) {
            return Err(format!("{label}: {got} vs {want}"));
        }
        lines.push(format!("{label} {:.2}M", got as f64 / 1e6));
    }
    let (_, lft) = updated_params(Arch::BertLarge, HeadKind::Classifier, 3, Mode::FineTune)?;
    let (_, lpt) = updated_params(Arch::BertLarge, HeadKind::Classifier, 3, Mode::Progtune)?;
    let red = 1.0 - lpt as f64 / lft as f64;
    if (red - 0.30).abs() > 0.02 {
        return Err(format!("large reduction {red}"));
    }
    let secs = started.elapsed().as_secs_f64();
    if secs >= 1.0 {
        return Err(format!("took {secs:.3}s"));
    }
    Ok(format!("{}; large reduction {red:.3}; {secs:.3}s", lines.join(", ")))
}

pub fn reduction(arch: Arch, head: HeadKind, epochs: usize) -> Result<f64, String> {
    let dims = arch.dims(head);
    let count = static_param_count(&dims, head, &PeftConfig::Full).map_err(fail("count"))?;
    let groups = group_specs(&count.specs, dims.num_blocks).map_err(fail("groups"))?;
    predicted_reduction(dims.num_blocks, epochs, &count, &groups).map_err(fail("reduction"))
}

pub fn check_reduction_claims() -> Check {
    let started = Instant::now();
    let cls = reduction(Arch::BertBase, HeadKind::Classifier, 3)?;
    if !(0.22..=0.28).contains(&cls) {
        return Err(format!("BERT-base T=3 reduction {cls}"));
    }
    let qa = reduction(Arch::BertBase, HeadKind::QaSpan, 2)?;
    if !(0.17..=0.23).contains(&qa) {
        return Err(format!("BERT-base qa T=2 reduction {qa}"));
    }
    let secs = started.elapsed().as_secs_f64();
    if secs >= 1.0 {
        return Err(format!("took {secs:.3}s"));
    }
    Ok(format!("T=3 classifier {cls:.4}, T=2 qa {qa:.4}; {secs:.3}s"))
}

// ------------------------------------------------------------- gradients

pub const GRAD_TOL: f64 = 1e-4;
const H: f64 = 1e-5;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `Σ x ⊙ W` for a fixed random `W`, so every output entry carries a
/// distinct, non-vanishing weight (a plain sum would cancel, e.g. through
/// softmax or layer norm).
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> progtune::Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.leaf(rand_tensor(&mut rng, &shape, -1.0, 1.0), false);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> progtune::Result<Var>>;

/// One entry per differentiable tape op: parameter shapes and a closure
/// building a scalar from them.
pub fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    let ids = vec![3usize, 0, 4, 3, 1, 2];
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 1)
        })),
        ("batch_matmul", vec![vec![2, 3, 4], vec![2, 4, 2]], Box::new(|t, v| {
            let y = t.batch_matmul(v[0], v[1])?;
            weighted_sum(t, y, 2)
        })),
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, 3)
        })),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, 4)
        })),
        ("add_bias", vec![vec![2, 3, 4], vec![4]], Box::new(|t, v| {
            let y = t.add_bias(v[0], v[1])?;
            weighted_sum(t, y, 5)
        })),
        ("scale", vec![vec![5]], Box::new(|t, v| {
            let y = t.scale(v[0], -1.7)?;
            weighted_sum(t, y, 6)
        })),
        ("add_const", vec![vec![2, 3]], Box::new(|t, v| {
            let c = Tensor::full(&[2, 3], 0.3);
            let y = t.add_const(v[0], &c)?;
            weighted_sum(t, y, 7)
        })),
        ("reshape", vec![vec![2, 6]], Box::new(|t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            weighted_sum(t, y, 8)
        })),
        ("permute", vec![vec![2, 3, 4]], Box::new(|t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            weighted_sum(t, y, 9)
        })),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-12)?;
            weighted_sum(t, y, 10)
        })),
        ("gelu", vec![vec![4, 3]], Box::new(|t, v| {
            let y = t.gelu(v[0])?;
            weighted_sum(t, y, 11)
        })),
        ("tanh", vec![vec![4, 3]], Box::new(|t, v| {
            let y = t.tanh(v[0])?;
            weighted_sum(t, y, 12)
        })),
        ("softmax", vec![vec![3, 5]], Box::new(|t, v| {
            let y = t.softmax(v[0])?;
            weighted_sum(t, y, 13)
        })),
        ("embedding", vec![vec![5, 3]], Box::new(move |t, v| {
            let y = t.embedding(v[0], &ids, &[2, 3])?;
            weighted_sum(t, y, 14)
        })),
        ("select_position", vec![vec![2, 3, 4]], Box::new(|t, v| {
            let y = t.select_position(v[0], 1)?;
            weighted_sum(t, y, 15)
        })),
        ("select_last", vec![vec![2, 3, 2]], Box::new(|t, v| {
            let y = t.select_last(v[0], 1)?;
            weighted_sum(t, y, 16)
        })),
        ("sum", vec![vec![3, 2]], Box::new(|t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        })),
        ("softmax_cross_entropy", vec![vec![4, 3]], Box::new(|t, v| t.softmax_cross_entropy(v[0], &[0, 2, 1, 2]))),
    ]
}

pub fn check_op_gradients() -> Result<Vec<(&'static str, f64)>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    for (name, shapes, f) in op_cases() {
        let mut params: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s, -1.5, 1.5)).collect();
        let trainable = vec![true; params.len()];
        let report = grad_check(&mut params, &trainable, H, |t, v| f(t, v)).map_err(fail(name))?;
        if !(report.max_rel_error < GRAD_TOL) {
            return Err(format!("{name}: max relative error {:e}", report.max_rel_error));
        }
        out.push((name, report.max_rel_error));
    }
    Ok(out)
}

/// Replaces every parameter with uniform noise so gradients are not tiny.
pub fn randomize(reg: &mut ParameterRegistry, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = reg.ids().collect();
    for id in ids {
        let shape = reg.get(id).value.shape().to_vec();
        let mut t = rand_tensor(&mut rng, &shape, -scale, scale);
        if reg.get(id).name.ends_with("gamma") {
            t.data_mut().iter_mut().for_each(|x| *x += 1.0);
        }
        peft::set_values(reg, id, t).unwrap();
    }
}

pub fn padded_batch() -> (Batch, Targets) {
    let ids = vec![1, 4, 2, 7, 0, 1, 9, 3, 5, 6, 1, 2, 0, 0, 0];
    let mask = ids.iter().enumerate().map(|(i, &id)| !(id == 0 && i % 5 != 0)).collect();
    (
        Batch {
            ids,
            mask,
            batch: 3,
            seq_len: 5,
        },
        Targets::Classes(vec![1, 0, 1]),
    )
}

/// Attention key biases shift every score of a query by the same amount,
/// which softmax ignores. Their gradient is identically zero, so a relative
/// error would only measure rounding noise.
pub fn is_shift_invariant(name: &str) -> bool {
    name.ends_with("attn.k.bias")
}

/// Task loss plus a fixed random weighting of the raw logits. The extra
/// term keeps parameters that only shift all span logits together (head
/// bias, last layer-norm shift) from having a vanishing gradient.
fn encoder_objective(model: &Model, t: &mut Tape, v: &[Var], batch: &Batch, targets: &Targets) -> progtune::Result<Var> {
    let logits = model.forward(t, v, batch)?;
    let loss = model.loss(t, logits, batch, targets)?;
    let probe = weighted_sum(t, logits, 99)?;
    t.add(loss, probe)
}

/// Finite-difference check of a whole encoder forward + loss through every
/// parameter of `reg` except the shift-invariant key biases, whose analytic
/// gradient must instead vanish.
pub fn encoder_grad_error(model: &Model, reg: &ParameterRegistry, batch: &Batch, targets: &Targets) -> Result<f64, String> {
    let mut params: Vec<Tensor> = reg.iter().map(|(_, e)| e.value.clone()).collect();
    let checked: Vec<bool> = reg.iter().map(|(_, e)| !is_shift_invariant(&e.name)).collect();
    let report = grad_check(&mut params, &checked, H, |t, v| encoder_objective(model, t, v, batch, targets))
        .map_err(fail("encoder"))?;
    if report.params.len() + model.config.num_blocks != reg.len() {
        return Err("unexpected set of checked parameters".into());
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = reg.iter().map(|(_, e)| tape.leaf(e.value.clone(), true)).collect();
    let loss = encoder_objective(model, &mut tape, &vars, batch, targets).map_err(fail("objective"))?;
    let grads = tape.backward(loss).map_err(fail("backward"))?;
    for (i, (_, e)) in reg.iter().enumerate() {
        if is_shift_invariant(&e.name) {
            let g = grads.get(vars[i]).ok_or("missing key-bias gradient")?;
            let worst = g.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if worst > 1e-10 {
                return Err(format!("`{}` gradient {worst:e} should vanish", e.name));
            }
        }
    }
    Ok(report.max_rel_error)
}

pub fn check_encoder_gradients() -> Check {
    let mut worst = Vec::new();
    let (batch, targets) = padded_batch();
    let variants: Vec<(&str, PeftConfig)> = vec![
        ("full", PeftConfig::Full),
        ("adapter", PeftConfig::Adapter { bottleneck: 3 }),
        (
            "lora",
            PeftConfig::Lora {
                rank: 2,
                alpha: 4.0,
                targets: LoraTarget::ALL.to_vec(),
            },
        ),
    ];
    for (name, peft) in variants {
        let (mut model, mut reg) = build_model(&ModelConfig::tiny(), 17).map_err(fail(name))?;
        peft::apply(&mut model, &mut reg, &peft, 18).map_err(fail(name))?;
        randomize(&mut reg, 19, 0.5);
        let err = encoder_grad_error(&model, &reg, &batch, &targets)?;
        if !(err < GRAD_TOL) {
            return Err(format!("2-block encoder ({name}): max relative error {err:e}"));
        }
        worst.push(format!("{name} {err:.1e}"));
    }
    let qa = ModelConfig {
        head: HeadKind::QaSpan,
        ..ModelConfig::tiny()
    };
    let (model, mut reg) = build_model(&qa, 21).map_err(fail("qa"))?;
    randomize(&mut reg, 22, 0.5);
    let spans = Targets::Spans(vec![(1, 2), (0, 0), (1, 1)]);
    let err = encoder_grad_error(&model, &reg, &batch, &spans)?;
    if !(err < GRAD_TOL) {
        return Err(format!("2-block span encoder: max relative error {err:e}"));
    }
    worst.push(format!("qa {err:.1e}"));
    Ok(worst.join(", "))
}

// --------------------------------------------------- training properties

pub fn bit_identical(a: &ParameterRegistry, b: &ParameterRegistry) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|((_, x), (_, y))| x.value.bit_eq(&y.value))
}

/// One-stage progressive training against the plain loop, per PEFT kind.
pub fn check_t1_equivalence() -> Check {
    let data = tiny_data(10, 6, 4);
    let mcfg = ModelConfig::tiny();
    for peft in peft_kinds(mcfg.hidden) {
        let cfg = train_config(1, Mode::Progtune, Variant::Standard, peft.clone());
        let (model, mut a) = prepare_model(&mcfg, &cfg).map_err(fail("prepare"))?;
        let mut b = a.clone();
        let schedule = cfg.schedule(mcfg.num_blocks).map_err(fail("schedule"))?;
        train_run(&model, &mut a, &schedule, &data, &cfg).map_err(fail("progtune"))?;
        plain_fine_tune(&model, &mut b, &data, &cfg).map_err(fail("plain"))?;
        if !bit_identical(&a, &b) {
            return Err(format!("{}: T=1 weights differ from plain fine-tuning", peft.name()));
        }
        let (_, untouched) = prepare_model(&mcfg, &cfg).map_err(fail("prepare"))?;
        if bit_identical(&a, &untouched) {
            return Err(format!("{}: training did not change any weight", peft.name()));
        }
    }
    Ok("bit-identical for full, adapter, bitfit, lora".into())
}

pub fn logits(model: &Model, reg: &ParameterRegistry, batch: &Batch) -> Tensor {
    model.logits(reg, batch).unwrap()
}

pub fn check_peft_transparency() -> Check {
    let (batch, _) = padded_batch();
    let mut worst: f64 = 0.0;
    for peft in [
        PeftConfig::Adapter { bottleneck: 3 },
        PeftConfig::Lora {
            rank: 2,
            alpha: 4.0,
            targets: LoraTarget::ALL.to_vec(),
        },
    ] {
        let (base_model, base_reg) = build_model(&ModelConfig::tiny(), 5).map_err(fail("build"))?;
        let mut model = base_model.clone();
        let mut reg = base_reg.clone();
        peft::apply(&mut model, &mut reg, &peft, 6).map_err(fail("apply"))?;
        let d = logits(&base_model, &base_reg, &batch).max_abs_diff(&logits(&model, &reg, &batch));
        if !(d <= 1e-10) {
            return Err(format!("{} changes initial logits by {d:e}", peft.name()));
        }
        worst = worst.max(d);
    }

    // Merge equivalence needs non-zero factors.
    let (mut model, mut reg) = build_model(&ModelConfig::tiny(), 7).map_err(fail("build"))?;
    let lora = PeftConfig::Lora {
        rank: 3,
        alpha: 6.0,
        targets: LoraTarget::ALL.to_vec(),
    };
    peft::apply(&mut model, &mut reg, &lora, 8).map_err(fail("apply"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let factor_ids: Vec<ParamId> = reg
        .iter()
        .filter(|(_, e)| matches!(e.tag, ParameterTag::LoraFactor(..)))
        .map(|(id, _)| id)
        .collect();
    for id in factor_ids {
        let shape = reg.get(id).value.shape().to_vec();
        peft::set_values(&mut reg, id, rand_tensor(&mut rng, &shape, -0.3, 0.3)).unwrap();
    }
    let (merged, merged_reg) = peft::merge_lora(&model, &reg).map_err(fail("merge"))?;
    let before = logits(&model, &reg, &batch);
    let after = logits(&merged, &merged_reg, &batch);
    let d = before.max_abs_diff(&after);
    let (base_model, base_reg) = build_model(&ModelConfig::tiny(), 7).map_err(fail("build"))?;
    let moved = before.max_abs_diff(&logits(&base_model, &base_reg, &batch));
    if !(d <= 1e-10) {
        return Err(format!("merged LoRA differs by {d:e}"));
    }
    if !(moved > 1e-6) {
        return Err("random LoRA factors did not change the logits".into());
    }
    Ok(format!("init max |Δ| {worst:.1e}, merge max |Δ| {d:.1e}"))
}

pub fn keyword_spec() -> TaskSpec {
    TaskSpec {
        kind: TaskKind::KeywordDetect,
        vocab_size: 16,
        seq_len: 8,
        num_classes: 2,
        train_n: 256,
        eval_n: 64,
        seed: 1,
    }
}

pub fn keyword_model() -> ModelConfig {
    ModelConfig {
        num_blocks: 3,
        hidden: 16,
        num_heads: 2,
        ffn_dim: 32,
        vocab_size: 16,
        max_positions: 16,
        num_classes: 2,
        head: HeadKind::Classifier,
        layer_norm_eps: 1e-12,
    }
}

pub fn keyword_train() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        base_lr: 0.01,
        seed: 7,
        mode: Mode::Progtune,
        variant: Variant::Standard,
        embeddings_always: true,
        peft: PeftConfig::Full,
        optimizer: OptimizerConfig::default(),
    }
}

pub fn check_keyword_training() -> Check {
    let data = generate_task(&keyword_spec()).map_err(fail("task"))?;
    let cfg = keyword_train();
    let mcfg = keyword_model();
    let (model, mut reg) = prepare_model(&mcfg, &cfg).map_err(fail("prepare"))?;
    let schedule = cfg.schedule(mcfg.num_blocks).map_err(fail("schedule"))?;
    let (m, _) = train_run(&model, &mut reg, &schedule, &data, &cfg).map_err(fail("train"))?;
    let final_acc = *m.train_acc.last().unwrap();
    if final_acc < 0.95 {
        return Err(format!("final train accuracy {final_acc}"));
    }
    if let Some(w) = m.epoch_loss.windows(2).find(|w| w[1] > w[0]) {
        return Err(format!("epoch loss increased: {:?} (all {:?})", w, m.epoch_loss));
    }
    Ok(format!(
        "train_acc {final_acc:.4}, losses {}",
        m.epoch_loss.iter().map(|l| format!("{l:.4}")).collect::<Vec<_>>().join(" > ")
    ))
}

pub fn keyword_config_toml(dir: &std::path::Path) -> String {
    format!(
        r#"[model]
num_blocks = 3
hidden = 16
num_heads = 2
ffn_dim = 32
vocab_size = 16
max_positions = 16
num_classes = 2
head = "classifier"

[task]
kind = "keyword_detect"
vocab_size = 16
seq_len = 8
num_classes = 2
train_n = 256
eval_n = 64
seed = 1

[train]
epochs = 3
batch_size = 8
base_lr = 0.01
seed = 7

[schedule]
stages = 3
mode = "progtune"
variant = "standard"

[output]
dir = "{}"
"#,
        dir.display().to_string().replace('\\', "/")
    )
}
