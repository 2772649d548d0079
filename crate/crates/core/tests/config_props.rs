use progtune::config::{ExportFormat, OutputSection, RunConfig, ScheduleSection, TrainSection};
use progtune::model::{HeadKind, ModelConfig};
use progtune::model::LoraTarget;
use progtune::peft::PeftConfig;
use progtune::schedule::{Mode, Variant};
use progtune::tasks::{TaskKind, TaskSpec};
use progtune::trainer::OptimizerConfig;
use progtune::Error;
use proptest::prelude::*;

fn peft() -> impl Strategy<Value = PeftConfig> {
    prop_oneof![
        Just(PeftConfig::Full),
        Just(PeftConfig::Bitfit),
        (1usize..8).prop_map(|b| PeftConfig::Adapter { bottleneck: b }),
        (1usize..8, 0.5f64..32.0, prop::sample::subsequence(LoraTarget::ALL.to_vec(), 1..=LoraTarget::ALL.len()))
            .prop_map(|(rank, alpha, targets)| PeftConfig::Lora { rank, alpha, targets }),
    ]
}

fn optimizer() -> impl Strategy<Value = OptimizerConfig> {
    prop_oneof![
        Just(OptimizerConfig::default()),
        (0.0f64..0.99).prop_map(|momentum| OptimizerConfig::Sgd { momentum }),
    ]
}

fn run_config() -> impl Strategy<Value = RunConfig> {
    (
        (1usize..6, prop::bool::ANY, 1e-5f64..1.0, 0..=i64::MAX as u64 - 1, 1usize..64),
        (peft(), optimizer(), prop::sample::select(Variant::ALL.to_vec()), prop::bool::ANY, prop::bool::ANY),
    )
        .prop_flat_map(|((l, qa, lr, seed, batch), (peft, optimizer, variant, ft, emb))| {
            (1..=l).prop_map(move |t| RunConfig {
                model: ModelConfig {
                    num_blocks: l,
                    hidden: 16,
                    num_heads: 2,
                    ffn_dim: 32,
                    vocab_size: 16,
                    max_positions: 16,
                    num_classes: 2,
                    head: if qa { HeadKind::QaSpan } else { HeadKind::Classifier },
                    layer_norm_eps: 1e-12,
                },
                task: TaskSpec {
                    kind: TaskKind::KeywordDetect,
                    vocab_size: 16,
                    seq_len: 8,
                    num_classes: 2,
                    train_n: 32,
                    eval_n: 8,
                    seed,
                },
                train: TrainSection {
                    epochs: t,
                    batch_size: batch,
                    base_lr: lr,
                    seed: seed ^ 1,
                    peft: peft.clone(),
                    optimizer: optimizer.clone(),
                },
                schedule: ScheduleSection {
                    stages: t,
                    mode: if ft { Mode::FineTune } else { Mode::Progtune },
                    variant,
                    embeddings_always: emb,
                },
                output: OutputSection {
                    dir: "runs/x".into(),
                    format: ExportFormat::Jsonl,
                    save_checkpoint: emb,
                },
            })
        })
}

proptest! {
    #[test]
    fn toml_round_trip(cfg in run_config()) {
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        back.validate().unwrap();
    }

    #[test]
    fn epochs_stages_disagreement_is_config_error(cfg in run_config(), bump in 1usize..4) {
        let mut bad = cfg;
        bad.schedule.stages += bump;
        prop_assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn shipped_configs_validate() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 2);
}

#[test]
fn too_many_stages_for_blocks_is_rejected() {
    let text = std::fs::read_to_string(std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/keyword.toml"))
        .unwrap()
        .replace("num_blocks = 3", "num_blocks = 2");
    let cfg = RunConfig::parse(&text).unwrap();
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn malformed_toml_is_a_config_error() {
    assert!(matches!(RunConfig::parse("[model\n"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::parse(""), Err(Error::Config(_))));
}

#[test]
fn seeds_beyond_toml_integers_are_rejected() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/keyword.toml");
    let mut cfg = RunConfig::load(path).unwrap();
    cfg.train.seed = u64::MAX;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}
