mod common;

use common::*;
use progtune::model::{build_model, static_param_count, Arch, ArchDims, HeadKind, ModelConfig};
use progtune::peft::{self, group_specs, PeftConfig};
use progtune::schedule::{
    count_updated_params, partition_blocks, trainable_set, Mode, StageSchedule, UpdateLedger, Variant,
};
use proptest::prelude::*;

fn variant() -> impl Strategy<Value = Variant> {
    prop::sample::select(Variant::ALL.to_vec())
}

fn l_and_t() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=24).prop_flat_map(|l| (Just(l), 1..=l))
}

proptest! {
    #[test]
    fn parts_tile_the_blocks((l, t) in l_and_t()) {
        let plan = partition_blocks(l, t).unwrap();
        prop_assert_eq!(plan.num_parts(), t);
        let flat: Vec<usize> = plan.parts.iter().flat_map(|p| p.clone()).collect();
        prop_assert_eq!(flat, (1..=l).collect::<Vec<_>>());
        for p in &plan.parts[..t - 1] {
            prop_assert_eq!(p.clone().count(), l / t);
        }
        prop_assert_eq!(plan.parts[t - 1].clone().count(), l / t + l % t);
    }

    #[test]
    fn stages_match_oracle((l, t) in l_and_t(), v in variant()) {
        let s = StageSchedule::progressive(l, t, v).unwrap();
        prop_assert_eq!(s.epochs(), t);
        for e in 1..=t {
            let got: std::collections::BTreeSet<usize> = s.stage_blocks(e).unwrap().into_iter().collect();
            prop_assert_eq!(got, oracle_stage_blocks(l, t, v, e));
        }
    }

    #[test]
    fn standard_stages_shrink_and_fromhb_grows((l, t) in l_and_t()) {
        let std_s = StageSchedule::progressive(l, t, Variant::Standard).unwrap();
        let hb = StageSchedule::progressive(l, t, Variant::FromHighBlocks).unwrap();
        for e in 1..t {
            let (a, b) = (std_s.stage_blocks(e).unwrap(), std_s.stage_blocks(e + 1).unwrap());
            prop_assert!(b.iter().all(|x| a.contains(x)) && b.len() < a.len());
            let (a, b) = (hb.stage_blocks(e).unwrap(), hb.stage_blocks(e + 1).unwrap());
            prop_assert!(a.iter().all(|x| b.contains(x)) && a.len() < b.len());
        }
        prop_assert_eq!(std_s.stage_blocks(1).unwrap(), (1..=l).collect::<Vec<_>>());
        prop_assert!(std_s.stage_blocks(t).unwrap().contains(&l));
    }

    #[test]
    fn without_low_blocks_ends_head_only((l, t) in l_and_t()) {
        let s = StageSchedule::progressive(l, t, Variant::WithoutLowBlocks).unwrap();
        prop_assert!(s.stage_blocks(t).unwrap().is_empty());
        let lowest = partition_blocks(l, t).unwrap().parts[0].clone();
        for e in 1..=t {
            prop_assert!(s.stage_blocks(e).unwrap().iter().all(|b| !lowest.contains(b)));
        }
    }

    #[test]
    fn ledger_is_sum_of_trainable_sets((l, t) in (2usize..=8).prop_flat_map(|l| (Just(l), 1..=l)),
                                       v in variant(), k in 0usize..4) {
        let cfg = model_with_blocks(l);
        let peft = peft_kinds(cfg.hidden)[k].clone();
        let (mut model, mut reg) = build_model(&cfg, 0).unwrap();
        peft::apply(&mut model, &mut reg, &peft, 1).unwrap();
        let groups = peft::peft_trainable_set(&model, &reg, &peft).unwrap();
        let s = StageSchedule::progressive(l, t, v).unwrap();
        let ledger = count_updated_params(&s, &reg, &groups).unwrap();
        let oracle = oracle_ledger(&reg.specs(), l, t, v, Mode::Progtune);
        prop_assert_eq!(&ledger.per_epoch, &oracle);
        prop_assert_eq!(ledger.cumulative, oracle.iter().sum::<u64>());
        for e in 1..=t {
            let set = trainable_set(&s, e, &reg, &groups).unwrap();
            prop_assert!(set.iter().all(|id| reg.get(*id).trainable));
            prop_assert_eq!(reg.count_of(&set), ledger.per_epoch[e - 1]);
        }
    }

    #[test]
    fn block_only_reduction_is_closed_form(t in 1usize..=12, per_part in 1usize..=3) {
        // Blocks only, every part the same size: standard progressive
        // training updates (T+1)/2T of what fine-tuning updates.
        let l = t * per_part;
        let dims = ArchDims { num_blocks: l, hidden: 4, num_heads: 1, ffn_dim: 4, vocab_size: 1,
                              max_positions: 1, type_vocab_size: 0, num_classes: 1, include_pooler: false };
        let count = static_param_count(&dims, HeadKind::Classifier, &PeftConfig::Full).unwrap();
        let mut groups = group_specs(&count.specs, l).unwrap();
        groups.non_block.clear();
        let ft = count_updated_params(&StageSchedule::fine_tune(l, t).unwrap(), &count, &groups).unwrap();
        let pt = count_updated_params(&StageSchedule::progressive(l, t, Variant::Standard).unwrap(), &count, &groups).unwrap();
        let expected = 1.0 - (t as f64 + 1.0) / (2.0 * t as f64);
        prop_assert!((pt.reduction_against(&ft) - expected).abs() < 1e-12);
    }
}

#[test]
fn exhaustive_stage_oracle() {
    check_stage_oracle().unwrap();
}

#[test]
fn ledger_exactness_sweep() {
    check_ledger_sweep(8, false).unwrap();
}

#[test]
fn fine_tune_ledger_is_epochs_times_trainable() {
    let dims = Arch::BertBase.dims(HeadKind::Classifier);
    let count = static_param_count(&dims, HeadKind::Classifier, &PeftConfig::Full).unwrap();
    let groups = group_specs(&count.specs, 12).unwrap();
    let ledger = count_updated_params(&StageSchedule::fine_tune(12, 3).unwrap(), &count, &groups).unwrap();
    assert_eq!(ledger, UpdateLedger { ..ledger.clone() });
    assert_eq!(ledger.cumulative, 3 * count.trainable_total());
    let _ = ModelConfig::tiny();
}

#[test]
fn published_counts_and_reductions() {
    check_published_counts().unwrap();
    check_reduction_claims().unwrap();
}

#[test]
fn trainable_set_rejects_bad_epochs() {
    let cfg = model_with_blocks(4);
    let (model, reg) = build_model(&cfg, 0).unwrap();
    let groups = peft::peft_trainable_set(&model, &reg, &PeftConfig::Full).unwrap();
    let s = StageSchedule::progressive(4, 2, Variant::Standard).unwrap();
    assert!(trainable_set(&s, 0, &reg, &groups).is_err());
    assert!(trainable_set(&s, 3, &reg, &groups).is_err());
    let wrong = StageSchedule::progressive(3, 2, Variant::Standard).unwrap();
    assert!(trainable_set(&wrong, 1, &reg, &groups).is_err());
}
