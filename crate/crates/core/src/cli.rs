//! Command-line surface. [`dispatch`] returns the process exit code:
//! 0 on success, 1 on a runtime error, 2 on a usage error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::save_checkpoint;
use crate::config::{ExportFormat, RunConfig};
use crate::error::{Error, Result};
use crate::export::{export_metrics, mean_record, render, render_ledger_csv, RunRecord};
use crate::model::{static_param_count, Arch, ArchDims, HeadKind};
use crate::peft::{group_specs, peft_trainable_set, PeftConfig};
use crate::schedule::{count_updated_params, Mode, StageSchedule, Variant};
use crate::tasks::generate_task;
use crate::trainer::{prepare_model, probe_all, train_run};

#[derive(Parser, Debug)]
#[command(name = "progtune", version, about = "Progressive stage-wise fine-tuning of a small encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration (optionally several seeds) and write metrics.
    Train(TrainArgs),
    /// Static updated-parameter ledger for a published or custom shape.
    Count(CountArgs),
    /// Per-block contribution probe.
    Probe(ConfigArg),
    /// Compare the three stage variants on one configuration.
    Ablate(ConfigArg),
    /// Re-render a saved run.
    Export(ExportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Ft,
    Progtune,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Ft => Mode::FineTune,
            ModeArg::Progtune => Mode::Progtune,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Standard,
    Wolb,
    Fromhb,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Standard => Variant::Standard,
            VariantArg::Wolb => Variant::WithoutLowBlocks,
            VariantArg::Fromhb => Variant::FromHighBlocks,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PeftArg {
    Full,
    Adapter,
    Bitfit,
    Lora,
}

impl PeftArg {
    fn name(self) -> &'static str {
        match self {
            PeftArg::Full => "full",
            PeftArg::Adapter => "adapter",
            PeftArg::Bitfit => "bitfit",
            PeftArg::Lora => "lora",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArchArg {
    BertBase,
    BertLarge,
    Custom,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadArg {
    Classifier,
    Qa,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CountFormat {
    Text,
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Csv,
    Jsonl,
}

impl From<FormatArg> for ExportFormat {
    fn from(f: FormatArg) -> ExportFormat {
        match f {
            FormatArg::Csv => ExportFormat::Csv,
            FormatArg::Jsonl => ExportFormat::Jsonl,
        }
    }
}

#[derive(Args, Debug)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    peft: Option<PeftArg>,
    /// Number of seeds, starting at the configured one.
    #[arg(long, default_value_t = 1)]
    repeat: u64,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[arg(long, value_enum)]
    arch: ArchArg,
    #[arg(long)]
    epochs: usize,
    #[arg(long, value_enum, default_value = "ft")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "full")]
    peft: PeftArg,
    #[arg(long, value_enum, default_value = "classifier")]
    head: HeadArg,
    #[arg(long, value_enum, default_value = "standard")]
    variant: VariantArg,
    /// Count a pooler in front of the head (default: classifier heads only).
    #[arg(long)]
    pooler: Option<bool>,
    #[arg(long, value_enum, default_value = "text")]
    format: CountFormat,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    max_positions: Option<usize>,
    #[arg(long)]
    type_vocab: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Directory holding a `run.json`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    /// Output file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Count(a) => cmd_count(a),
        Command::Probe(a) => cmd_probe(&a.config),
        Command::Ablate(a) => cmd_ablate(&a.config),
        Command::Export(a) => cmd_export(a),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn millions(n: u64) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

/// Trains one seed and returns its record; files go to `dir`.
fn run_once(cfg: &RunConfig, dir: &Path) -> Result<RunRecord> {
    let data = generate_task(&cfg.task)?;
    let train = cfg.train_config();
    let (model, mut registry) = prepare_model(&cfg.model, &train)?;
    let schedule = train.schedule(cfg.model.num_blocks)?;
    let groups = peft_trainable_set(&model, &registry, &train.peft)?;
    let baseline = count_updated_params(
        &StageSchedule::fine_tune(cfg.model.num_blocks, train.epochs)?,
        &registry,
        &groups,
    )?;
    let (metrics, ledger) = train_run(&model, &mut registry, &schedule, &data, &train)?;
    let record = RunRecord {
        mode: train.mode.name().into(),
        variant: train.variant.short_name().into(),
        peft: train.peft.name().into(),
        seed: train.seed,
        metrics,
        ledger,
        baseline_cumulative: baseline.cumulative,
    };
    fs::create_dir_all(dir)?;
    write_file(&dir.join("run.json"), &record.to_json()?)?;
    let fmt = cfg.output.format;
    export_metrics(&record, dir.join(format!("metrics.{}", fmt.extension())), fmt)?;
    if cfg.output.save_checkpoint {
        save_checkpoint(&registry, dir.join("model.pgtn"))?;
    }
    Ok(record)
}

fn load_with_overrides(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::parse(&fs::read_to_string(&a.config)?)?;
    if let Some(m) = a.mode {
        cfg.schedule.mode = m.into();
    }
    if let Some(v) = a.variant {
        cfg.schedule.variant = v.into();
    }
    if let Some(p) = a.peft {
        cfg.train.peft = PeftConfig::with_defaults(p.name(), cfg.model.hidden)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<String> {
    if a.repeat == 0 {
        return Err(Error::config("--repeat must be at least 1"));
    }
    let cfg = load_with_overrides(&a)?;
    let mut records = Vec::new();
    let mut out = String::new();
    for k in 0..a.repeat {
        let mut c = cfg.clone();
        c.train.seed = cfg.train.seed.wrapping_add(k);
        let dir = cfg.output.dir.join(format!("seed-{}", c.train.seed));
        let r = run_once(&c, &dir)?;
        let last = r.metrics.epochs() - 1;
        writeln!(
            out,
            "seed {}: loss {:.4} train_acc {:.4} eval_acc {:.4} updated {} reduction {:.4}",
            r.seed,
            r.metrics.epoch_loss[last],
            r.metrics.train_acc[last],
            r.metrics.eval_acc[last],
            r.ledger.cumulative,
            r.reduction()
        )
        .expect("string write");
        records.push(r);
    }
    if records.len() > 1 {
        let mean = mean_record(&records)?;
        let fmt = cfg.output.format;
        export_metrics(&mean, cfg.output.dir.join(format!("mean.{}", fmt.extension())), fmt)?;
        let last = mean.metrics.epochs() - 1;
        writeln!(
            out,
            "mean of {}: train_acc {:.4} eval_acc {:.4}",
            records.len(),
            mean.metrics.train_acc[last],
            mean.metrics.eval_acc[last]
        )
        .expect("string write");
    }
    Ok(out)
}

fn count_dims(a: &CountArgs, head: HeadKind) -> Result<ArchDims> {
    let mut dims = match a.arch {
        ArchArg::BertBase => Arch::BertBase.dims(head),
        ArchArg::BertLarge => Arch::BertLarge.dims(head),
        ArchArg::Custom => {
            let need = |v: Option<usize>, flag: &str| {
                v.ok_or_else(|| Error::config(format!("--arch custom needs --{flag}")))
            };
            ArchDims {
                num_blocks: need(a.layers, "layers")?,
                hidden: need(a.hidden, "hidden")?,
                num_heads: need(a.heads, "heads")?,
                ffn_dim: need(a.ffn, "ffn")?,
                vocab_size: need(a.vocab, "vocab")?,
                max_positions: need(a.max_positions, "max-positions")?,
                type_vocab_size: a.type_vocab.unwrap_or(0),
                num_classes: a.classes.unwrap_or(2),
                include_pooler: head == HeadKind::Classifier,
            }
        }
    };
    if let Some(p) = a.pooler {
        dims.include_pooler = p;
    }
    if let Some(k) = a.classes {
        dims.num_classes = k;
    }
    Ok(dims)
}

fn cmd_count(a: CountArgs) -> Result<String> {
    let head = match a.head {
        HeadArg::Classifier => HeadKind::Classifier,
        HeadArg::Qa => HeadKind::QaSpan,
    };
    let dims = count_dims(&a, head)?;
    let peft = PeftConfig::with_defaults(a.peft.name(), dims.hidden)?;
    let count = static_param_count(&dims, head, &peft)?;
    let groups = group_specs(&count.specs, dims.num_blocks)?;
    let schedule = StageSchedule::new(a.mode.into(), a.variant.into(), dims.num_blocks, a.epochs)?;
    let ledger = count_updated_params(&schedule, &count, &groups)?;
    let baseline = count_updated_params(&StageSchedule::fine_tune(dims.num_blocks, a.epochs)?, &count, &groups)?;
    let reduction = ledger.reduction_against(&baseline);
    let mode = Mode::from(a.mode);
    let variant = Variant::from(a.variant);

    let mut out = String::new();
    match a.format {
        CountFormat::Text => {
            writeln!(out, "total parameters: {} ({})", count.total(), millions(count.total())).expect("write");
            writeln!(out, "trainable parameters: {} ({})", count.trainable_total(), millions(count.trainable_total()))
                .expect("write");
            for (t, n) in ledger.per_epoch.iter().enumerate() {
                writeln!(out, "epoch {}: {} ({})", t + 1, n, millions(*n)).expect("write");
            }
            writeln!(out, "updated parameters: {} ({})", ledger.cumulative, millions(ledger.cumulative))
                .expect("write");
            writeln!(out, "fine-tuning baseline: {} ({})", baseline.cumulative, millions(baseline.cumulative))
                .expect("write");
            writeln!(out, "reduction: {reduction:.4}").expect("write");
        }
        CountFormat::Csv => out = render_ledger_csv(&ledger)?,
        CountFormat::Json => {
            let v = serde_json::json!({
                "mode": mode.name(),
                "variant": variant.short_name(),
                "peft": peft.name(),
                "total_params": count.total(),
                "trainable_params": count.trainable_total(),
                "per_epoch": ledger.per_epoch,
                "breakdown": ledger.breakdown,
                "cumulative": ledger.cumulative,
                "baseline_cumulative": baseline.cumulative,
                "reduction": reduction,
            });
            writeln!(out, "{v}").expect("write");
        }
    }
    Ok(out)
}

fn cmd_probe(path: &Path) -> Result<String> {
    let cfg = RunConfig::load(path)?;
    let data = generate_task(&cfg.task)?;
    let mut train = cfg.train_config();
    train.peft = PeftConfig::Full;
    let accs = probe_all(&cfg.model, &data, &train)?;
    let mut table = String::from("block,eval_acc\n");
    for (i, a) in accs.iter().enumerate() {
        writeln!(table, "{},{}", i + 1, a).expect("write");
    }
    write_file(&cfg.output.dir.join("probe.csv"), &table)?;
    let half = accs.len() / 2;
    if half > 0 {
        let low = accs[..half].iter().sum::<f64>() / half as f64;
        let high = accs[accs.len() - half..].iter().sum::<f64>() / half as f64;
        writeln!(table, "# mean of lower half {low:.4}, upper half {high:.4}").expect("write");
    }
    Ok(table)
}

fn cmd_ablate(path: &Path) -> Result<String> {
    let base = RunConfig::load(path)?;
    let mut table = String::from("variant,final_loss,train_acc,eval_acc,updated_params,reduction\n");
    for v in Variant::ALL {
        let mut cfg = base.clone();
        cfg.schedule.mode = Mode::Progtune;
        cfg.schedule.variant = v;
        cfg.validate()?;
        let dir = base.output.dir.join("ablate").join(v.short_name());
        let r = run_once(&cfg, &dir)?;
        let last = r.metrics.epochs() - 1;
        writeln!(
            table,
            "{},{},{},{},{},{}",
            v.short_name(),
            r.metrics.epoch_loss[last],
            r.metrics.train_acc[last],
            r.metrics.eval_acc[last],
            r.ledger.cumulative,
            r.reduction()
        )
        .expect("write");
    }
    write_file(&base.output.dir.join("ablate.csv"), &table)?;
    Ok(table)
}

fn cmd_export(a: ExportArgs) -> Result<String> {
    let record = RunRecord::from_json(&fs::read_to_string(a.run.join("run.json"))?)?;
    let text = render(&record, a.format.into())?;
    match a.out {
        Some(path) => {
            write_file(&path, &text)?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}
