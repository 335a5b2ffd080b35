//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};

use aerocon_core::config::{Config, Preset};
use aerocon_core::data::{extract_lt, generate_mosaics, lt_options, pretraining_set, LabeledDataset};
use aerocon_core::model::{Encoder, Model};
use aerocon_core::pipeline::{epoch_means, evaluate, extract_features, pretrain_observed, Evaluation, Metrics, Mode, Record};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{self, AppError, Result};
use crate::{checkpoint, dataset, embeddings, losslog, selftest, settings};

pub const CHECKPOINT_FILE: &str = "checkpoint.kwdc";
pub const LOSS_FILE: &str = "loss.txt";
pub const CONFIG_FILE: &str = "config.toml";
pub const CLASSIFIER_FILE: &str = "classifier.kwdc";
pub const METRICS_FILE: &str = "metrics.txt";

#[derive(Debug, Parser)]
#[command(name = "aerocon", version, about = "Contrastive pretraining for rare objects in aerial imagery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PresetArg {
    Mcc0,
    Mcc1,
    Mcc2,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Mcc0 => Preset::Mcc0,
            PresetArg::Mcc1 => Preset::Mcc1,
            PresetArg::Mcc2 => Preset::Mcc2,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Frozen,
    EndToEnd,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Frozen => Mode::Frozen,
            ModeArg::EndToEnd => Mode::EndToEnd,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Protocol {
    Pre,
    Lt,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set contrast.lambda=0`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
    /// Seed of the section this command uses.
    #[arg(long)]
    seed: Option<u64>,
    /// Model recipe applied before the file and overrides.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Labeled patch directory written by `extract --protocol lt`.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Pretrained checkpoint; without it a randomly initialized encoder is used.
    #[arg(long, value_name = "FILE")]
    ckpt: Option<PathBuf>,
    /// Fraction of training labels to keep.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Directory for the classifier weights and metrics.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic aerial mosaics with ground-truth boxes.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Cut pretraining or labeled long-tail patches from a mosaic directory.
    Extract {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_enum)]
        protocol: Protocol,
    },
    /// Contrastive pretraining on an unlabeled patch directory.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Output directory for checkpoint, loss log and configuration.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long, value_name = "FILE")]
        ckpt: Option<PathBuf>,
    },
    /// Linear probe on frozen features (or end-to-end with `--mode`).
    Probe(EvalArgs),
    /// End-to-end fine-tuning of encoder and classifier.
    Finetune(EvalArgs),
    /// Downstream metrics over the configured label fractions.
    Eval(EvalArgs),
    /// Write encoder features of every patch in a patch directory.
    ExportEmbeddings {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        ckpt: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Run the built-in verification suite.
    Selftest,
}

/// Runs one command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments) {
    let _ = out.write_fmt(text);
    let _ = out.write_all(b"\n");
}

macro_rules! say {
    ($out:expr, $($t:tt)*) => { say($out, format_args!($($t)*)) };
}

#[derive(Debug, Clone, Copy)]
enum SeedSection {
    Data,
    Train,
    Eval,
}

fn resolve(args: &ConfigArgs, base: &Config, section: SeedSection) -> Result<Config> {
    let mut base = base.clone();
    if let Some(p) = args.preset {
        Preset::from(p).apply(&mut base);
    }
    let mut sets = args.sets.clone();
    if let Some(seed) = args.seed {
        let name = match section {
            SeedSection::Data => "data",
            SeedSection::Train => "train",
            SeedSection::Eval => "eval",
        };
        sets.push(format!("{name}.seed={seed}"));
    }
    settings::resolve_from(&base, args.config.as_deref(), &sets)
}

fn echo(out: &mut dyn Write, cfg: &Config) {
    say!(out, "# resolved configuration\n{}# end configuration", settings::to_toml(cfg));
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::GenData { config, out: dir } => {
            let cfg = resolve(&config, &Config::default(), SeedSection::Data)?;
            echo(out, &cfg);
            let mosaics = generate_mosaics(&cfg.data)?;
            dataset::write_mosaics(&dir, &mosaics)?;
            let with = mosaics.iter().filter(|m| !m.boxes.is_empty()).count();
            let animals: usize = mosaics.iter().map(|m| m.boxes.len()).sum();
            say!(out, "generated {} mosaics ({with} with animals, {animals} animals) in {}", mosaics.len(), dir.display());
        }
        Command::Extract {
            config,
            data,
            out: dir,
            protocol,
        } => {
            let cfg = resolve(&config, &Config::default(), SeedSection::Data)?;
            echo(out, &cfg);
            let mosaics = dataset::read_mosaics(&data)?;
            match protocol {
                Protocol::Pre => {
                    let set = pretraining_set(&mosaics, &cfg.data)?;
                    dataset::write_pretraining_set(&dir, &set)?;
                    say!(out, "extracted {} patches ({}x{0}) from {} mosaics", set.len(), set.size, mosaics.len());
                }
                Protocol::Lt => {
                    let lt = extract_lt(&mosaics, &lt_options(&cfg.data))?;
                    dataset::write_labeled(&dir, &lt)?;
                    for (name, s) in dataset::LT_SPLITS.iter().zip([&lt.train, &lt.val, &lt.test]) {
                        let (bg, fg) = s.class_counts();
                        say!(out, "{name}: {} patches ({fg} foreground, {bg} background)", s.len());
                    }
                }
            }
        }
        Command::Pretrain {
            config,
            data,
            out: dir,
            ckpt,
        } => pretrain_command(&config, &data, &dir, ckpt.as_deref(), out)?,
        Command::Probe(args) => downstream(&args, Mode::Frozen, out)?,
        Command::Finetune(args) => downstream(&args, Mode::EndToEnd, out)?,
        Command::Eval(args) => eval_command(&args, out)?,
        Command::ExportEmbeddings {
            config,
            data,
            ckpt,
            out: file,
        } => {
            let (cfg, encoder) = encoder_for(&config, ckpt.as_deref(), SeedSection::Train)?;
            echo(out, &cfg);
            let items = dataset::read_patches(&data)?;
            if items.is_empty() {
                return Err(AppError::format(&data, "no patches"));
            }
            let images: Vec<_> = items.iter().map(|(_, p)| p.clone()).collect();
            let feats = extract_features(&encoder, &images, cfg.augment.crop_size, cfg.eval.probe_batch)?;
            let rows = embeddings::rows_from(
                items.iter().map(|(e, _)| e.path.clone()).collect(),
                items.iter().map(|(e, _)| e.label).collect(),
                &feats,
            );
            let text = embeddings::render(encoder.feature_dim(), &rows).map_err(|e| AppError::format(&file, e))?;
            error::write(&file, text)?;
            say!(out, "exported {} embeddings of dimension {} to {}", rows.len(), encoder.feature_dim(), file.display());
        }
        Command::Selftest => {
            let (passed, total) = selftest::run_all(out);
            return Ok(if passed == total { 0 } else { 2 });
        }
    }
    Ok(0)
}

/// Configuration and state for `pretrain`. A resumed run starts from the
/// checkpoint's configuration; only the schedule and seeds outside the
/// stored state may change.
fn pretrain_command(args: &ConfigArgs, data: &Path, dir: &Path, ckpt: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let (cfg, state) = match ckpt {
        Some(p) => {
            let (state, mut stored) = checkpoint::load(p)?;
            // The stop point belongs to the run that wrote the checkpoint.
            stored.train.stop_epoch = 0;
            let cfg = resolve(args, &stored, SeedSection::Train)?;
            if cfg.model != stored.model || cfg.contrast.queue_size != stored.contrast.queue_size {
                return Err(AppError::Config("model or queue settings differ from the checkpoint".into()));
            }
            if cfg.train.seed != state.seed {
                return Err(AppError::Config(format!(
                    "train.seed {} differs from the checkpoint seed {}",
                    cfg.train.seed, state.seed
                )));
            }
            (cfg, Some(state))
        }
        None => (resolve(args, &Config::default(), SeedSection::Train)?, None),
    };
    echo(out, &cfg);
    let patches = dataset::read_pretraining_set(data)?;
    let start = state.as_ref().map_or(0, |s| s.epoch);
    say!(out, "pretraining on {} patches, epochs {start}..{}", patches.len(), cfg.stop_epoch());

    let mut previous = Vec::new();
    let log_path = dir.join(LOSS_FILE);
    if start > 0 && log_path.exists() {
        previous = losslog::parse(&error::read_text(&log_path)?).map_err(|e| AppError::format(&log_path, e))?;
        previous.retain(|r| r.epoch < start);
    }
    let mut epoch_sum = (0.0, 0usize);
    let (state, log) = pretrain_observed(&cfg, &patches, state, |r| {
        epoch_sum.0 += r.total;
        epoch_sum.1 += 1;
        if r.batch + 1 == aerocon_core::pipeline::batches_per_epoch(patches.len(), cfg.train.batch_size) {
            say!(out, "epoch {:>4}  mean loss {:.6}  lr {:.5}", r.epoch, epoch_sum.0 / epoch_sum.1 as f64, r.lr);
            epoch_sum = (0.0, 0);
        }
    })?;
    previous.extend(log);
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &state, &cfg)?;
    error::write(&log_path, losslog::render(&previous))?;
    error::write(&dir.join(CONFIG_FILE), settings::to_toml(&cfg))?;
    if let Some((e, l)) = epoch_means(&previous).last() {
        say!(out, "finished epoch {e} (mean loss {l:.6}); wrote {}", dir.join(CHECKPOINT_FILE).display());
    }
    Ok(())
}

/// The resolved configuration and the query encoder: from the checkpoint
/// when given, otherwise randomly initialized from `train.seed`.
fn encoder_for(args: &ConfigArgs, ckpt: Option<&Path>, section: SeedSection) -> Result<(Config, Encoder)> {
    match ckpt {
        Some(p) => {
            let (state, stored) = checkpoint::load(p)?;
            let cfg = resolve(args, &stored, section)?;
            if cfg.model != stored.model {
                return Err(AppError::Config("model settings differ from the checkpoint".into()));
            }
            Ok((cfg, state.model.encoder))
        }
        None => {
            let cfg = resolve(args, &Config::default(), section)?;
            let model = Model::new(&cfg.model, cfg.train.seed)?;
            Ok((cfg, model.encoder))
        }
    }
}

fn fraction(args: &EvalArgs, cfg: &Config) -> f64 {
    args.fraction.unwrap_or(cfg.eval.fraction)
}

pub fn format_metrics(m: &Metrics) -> String {
    let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
    format!(
        "acc {:.2}  prec {}  rec {}  (tp {} fp {} fn {} tn {})",
        100.0 * m.accuracy,
        pct(m.precision),
        pct(m.recall),
        m.tp,
        m.fp,
        m.fn_,
        m.tn
    )
}

fn report(out: &mut dyn Write, ev: &Evaluation) -> String {
    let mut text = String::new();
    for (name, m) in [("train", &ev.train), ("val", &ev.val), ("test", &ev.test)] {
        let line = format!("{name:<5} {}", format_metrics(m));
        say!(out, "{line}");
        text.push_str(&line);
        text.push('\n');
    }
    text
}

fn load_eval(args: &EvalArgs) -> Result<(Config, Encoder, LabeledDataset)> {
    let (cfg, encoder) = encoder_for(&args.config, args.ckpt.as_deref(), SeedSection::Eval)?;
    let data = dataset::read_labeled(&args.data)?;
    Ok((cfg, encoder, data))
}

fn downstream(args: &EvalArgs, default_mode: Mode, out: &mut dyn Write) -> Result<()> {
    let (cfg, encoder, data) = load_eval(args)?;
    echo(out, &cfg);
    let mode = args.mode.map_or(default_mode, Mode::from);
    let f = fraction(args, &cfg);
    let source = args.ckpt.as_ref().map_or("random initialization".to_string(), |p| p.display().to_string());
    say!(out, "{mode:?} evaluation of {source} with {:.1}% of training labels", 100.0 * f);
    let ev = evaluate(&encoder, &data, f, mode, &cfg)?;
    let text = report(out, &ev);
    if let Some(dir) = &args.out {
        let records: Vec<Record> = ev
            .classifier
            .params()
            .iter()
            .map(|p| Record::tensor(p.name.clone(), &p.value))
            .collect();
        error::write(&dir.join(CLASSIFIER_FILE), checkpoint::encode(&records))?;
        error::write(&dir.join(METRICS_FILE), text)?;
    }
    Ok(())
}

fn eval_command(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (cfg, encoder, data) = load_eval(args)?;
    echo(out, &cfg);
    let mode = args.mode.map_or(Mode::Frozen, Mode::from);
    let fractions = match args.fraction {
        Some(f) => vec![f],
        None => cfg.eval.fractions.clone(),
    };
    let mut text = String::from("# fraction accuracy precision recall (test split, %)\n");
    say!(out, "{mode:?} evaluation, test split");
    for f in fractions {
        let ev = evaluate(&encoder, &data, f, mode, &cfg)?;
        let m = &ev.test;
        let line = format!("{f} {}", format_metrics(m));
        say!(out, "{line}");
        text.push_str(&line);
        text.push('\n');
    }
    if let Some(dir) = &args.out {
        error::write(&dir.join(METRICS_FILE), text)?;
    }
    Ok(())
}
