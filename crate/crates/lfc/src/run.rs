//! The commands behind the CLI, callable as library functions.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use lfc_core::adapt::{adapt as run_adapt, Ablation, AdaptHooks, AdaptOutcome};
use lfc_core::checkpoint;
use lfc_core::curriculum::rank_dataset;
use lfc_core::data::Sample;
use lfc_core::metrics::{evaluate_model, report, MetricReport, FOREGROUND};
use lfc_core::model::{adabn_init, ModelBranch};
use lfc_core::synth::{benchmark, BenchmarkSizes, DomainSpec, Split};
use lfc_core::train::{holdout_split, train_source as run_train_source};

use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::dataset::{self, spec_to_text};
use crate::error::{CliError, CliResult};
use crate::tables::{self, ModeResult};

pub const MODEL_FILE: &str = "model.ckpt";
pub const MOMENTUM_FILE: &str = "momentum.ckpt";
pub const REPORT_FILE: &str = "report.csv";
pub const EPOCH_LOG_FILE: &str = "epoch_log.csv";
pub const STEP_LOG_FILE: &str = "step_log.csv";
pub const CHECKSUM_FILE: &str = "checksums.txt";

/// Prepares `dir` for output: refuses a non-empty directory unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(CliError::output(dir))?;
        if entries.next().is_some() {
            if !force {
                return Err(CliError::Conflict(dir.to_path_buf()));
            }
            fs::remove_dir_all(dir).map_err(CliError::output(dir))?;
        }
    }
    fs::create_dir_all(dir).map_err(CliError::output(dir))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(CliError::output(path))
}

pub fn save_model(path: &Path, model: &ModelBranch) -> CliResult<()> {
    write(path, checkpoint::encode(model))
}

pub fn load_model(path: &Path) -> CliResult<ModelBranch> {
    let bytes = fs::read(path).map_err(CliError::input(path))?;
    checkpoint::decode(&bytes).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `sha256  name` for the listed files of `dir`, written to `checksums.txt`.
fn write_checksums(dir: &Path, names: &[&str]) -> CliResult<()> {
    let mut out = String::new();
    for name in names {
        let path = dir.join(name);
        if path.exists() {
            let bytes = fs::read(&path).map_err(CliError::input(&path))?;
            out.push_str(&format!("{}  {name}\n", sha256_hex(&bytes)));
        }
    }
    write(&dir.join(CHECKSUM_FILE), out)
}

/// Writes the divergence dump next to the outputs before reporting it.
fn guard<T>(dir: &Path, result: lfc_core::Result<T>) -> CliResult<T> {
    result.map_err(|e| match e {
        lfc_core::Error::Diverged(dump) => {
            let text = dump.to_string();
            let _ = fs::write(dir.join("divergence.txt"), &text);
            CliError::Numerical(text)
        }
        other => other.into(),
    })
}

#[derive(Debug, Clone)]
pub struct GenDataArgs {
    pub out: PathBuf,
    pub seed: u64,
    pub source_spec: Option<PathBuf>,
    pub target_spec: Option<PathBuf>,
    pub sizes: BenchmarkSizes,
    pub force: bool,
}

pub fn gen_data(args: &GenDataArgs) -> CliResult<()> {
    let source = match &args.source_spec {
        Some(p) => dataset::read_spec(p)?,
        None => DomainSpec::default_source(),
    };
    let target = match &args.target_spec {
        Some(p) => dataset::read_spec(p)?,
        None => DomainSpec::default_target(),
    };
    let bench = benchmark(&source, &target, args.sizes, args.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    prepare_out_dir(&args.out, args.force)?;
    dataset::write_benchmark(&args.out, &bench)?;
    write(&args.out.join("source_spec.txt"), spec_to_text(&source))?;
    write(&args.out.join("target_spec.txt"), spec_to_text(&target))
}

fn data_dir(cfg: &RunConfig, flag: Option<&Path>) -> CliResult<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| CliError::Usage("no data directory (use --data or `data =` in the config)".into()))
}

#[derive(Debug, Clone)]
pub struct TrainSourceArgs {
    pub data: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub force: bool,
}

/// Trains `f^s` on the source split; returns the validation report.
pub fn train_source(args: &TrainSourceArgs, mut log: impl FnMut(&str)) -> CliResult<MetricReport> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let data = data_dir(&cfg, args.data.as_deref())?;
    cfg.data = Some(data.clone());
    let samples = dataset::load_split(&data, Split::SourceTrain)?;
    prepare_out_dir(&args.out, args.force)?;
    write(&args.out.join(RESOLVED_CONFIG), cfg.to_text())?;
    let (train, val) = holdout_split(&samples);
    let result = run_train_source(&train, &val, &cfg.source_config(), |l| {
        log(&format!(
            "source epoch {:>3}  loss {:.5}  val dice {}",
            l.epoch,
            l.loss,
            l.dice_val.map_or("-".into(), |d| format!("{:.2}", d * 100.0))
        ))
    });
    let (model, logs) = guard(&args.out, result)?;
    save_model(&args.out.join(MODEL_FILE), &model)?;
    tables::write_source_log(&args.out.join("source_log.csv"), &logs)?;
    let val_report = if val.is_empty() {
        None
    } else {
        let r = evaluate_model(&model, &val)?;
        tables::write_report(&args.out.join("source_val_report.csv"), &r)?;
        Some(r)
    };
    write_checksums(&args.out, &[RESOLVED_CONFIG, MODEL_FILE, "source_log.csv", "source_val_report.csv"])?;
    val_report.ok_or_else(|| CliError::Usage("source split too small for a validation holdout".into()))
}

#[derive(Debug, Clone)]
pub struct AdaptArgs {
    pub source_model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub force: bool,
    /// Overrides the config's ablation.
    pub ablation: Option<Ablation>,
    /// Overrides the config's seed.
    pub seed: Option<u64>,
}

/// Everything a finished adaptation run produced.
pub struct AdaptRecord {
    pub outcome: AdaptOutcome,
    pub report: MetricReport,
}

/// Runs one adaptation and writes its run record into `args.out`.
pub fn adapt(args: &AdaptArgs, mut log: impl FnMut(&str)) -> CliResult<AdaptRecord> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let data = data_dir(&cfg, args.data.as_deref())?;
    let model_path = args
        .source_model
        .clone()
        .or_else(|| cfg.source_model.clone())
        .ok_or_else(|| CliError::Usage("no source model (use --source-model or `source_model =`)".into()))?;
    cfg.data = Some(data.clone());
    cfg.source_model = Some(model_path.clone());
    if let Some(a) = args.ablation {
        cfg.ablation = a;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let source = load_model(&model_path)?;
    adapt_loaded(&source, &data, &cfg, &args.out, args.force, &mut log)
}

/// [`adapt`] with the source model and config already resolved.
pub fn adapt_loaded(
    source: &ModelBranch,
    data: &Path,
    cfg: &RunConfig,
    out: &Path,
    force: bool,
    log: &mut dyn FnMut(&str),
) -> CliResult<AdaptRecord> {
    let images = dataset::load_images(data, Split::TargetTrain)?;
    let test = dataset::load_split(data, Split::TargetTest)?;
    prepare_out_dir(out, force)?;
    write(&out.join(RESOLVED_CONFIG), cfg.to_text())?;
    let mut on_epoch = |l: &lfc_core::adapt::EpochLog| {
        log(&format!(
            "{} epoch {:>3}  alpha {:.4}  omega {:.4}  l_fix {:.5}  l_sl {}  l_total {:.5}  dice {}",
            cfg.ablation,
            l.epoch,
            l.alpha,
            l.mean_omega,
            l.l_fix,
            l.l_sl.map_or("-".into(), |v| format!("{v:.5}")),
            l.l_total,
            l.dice_val.map_or("-".into(), |d| format!("{:.2}", d * 100.0))
        ))
    };
    let hooks = AdaptHooks {
        monitor: Some(&test),
        on_epoch: Some(&mut on_epoch),
    };
    let outcome = guard(out, run_adapt(source, &images, &cfg.adapt_config(), hooks))?;
    let report = evaluate_model(&outcome.target, &test)?;
    save_model(&out.join(MODEL_FILE), &outcome.target)?;
    if let Some(m) = &outcome.momentum {
        save_model(&out.join(MOMENTUM_FILE), m)?;
    }
    tables::write_epoch_log(&out.join(EPOCH_LOG_FILE), &outcome.epochs)?;
    tables::write_step_log(&out.join(STEP_LOG_FILE), &outcome.steps)?;
    tables::write_report(&out.join(REPORT_FILE), &report)?;
    write_checksums(
        out,
        &[RESOLVED_CONFIG, MODEL_FILE, MOMENTUM_FILE, EPOCH_LOG_FILE, STEP_LOG_FILE, REPORT_FILE],
    )?;
    Ok(AdaptRecord { outcome, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    /// Target test split.
    Test,
    /// Target train split (labels are only read for scoring).
    Train,
    /// Held-out tenth of the source train split.
    Source,
}

impl EvalSplit {
    pub fn split(self) -> Split {
        match self {
            EvalSplit::Test => Split::TargetTest,
            EvalSplit::Train => Split::TargetTrain,
            EvalSplit::Source => Split::SourceTrain,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    /// Absent in oracle mode.
    pub model: Option<PathBuf>,
    pub data: PathBuf,
    pub split: EvalSplit,
    pub out: PathBuf,
    /// Score the ground truth against itself.
    pub oracle: bool,
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult<MetricReport> {
    let mut samples = dataset::load_split(&args.data, args.split.split())?;
    if args.split == EvalSplit::Source {
        samples = holdout_split(&samples).1;
    }
    let result = if args.oracle {
        let pairs: Vec<_> = samples.iter().map(|s| (s.label.clone(), s.label.clone())).collect();
        report(&pairs, &FOREGROUND)?
    } else {
        let path = args
            .model
            .as_deref()
            .ok_or_else(|| CliError::Usage("--model is required unless --oracle is given".into()))?;
        evaluate_model(&load_model(path)?, &samples)?
    };
    tables::write_report(&args.out, &result)?;
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct RankArgs {
    pub source_model: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub batch_size: usize,
}

/// Difficulty of every target-train image after AdaBN, easiest first.
pub fn rank(args: &RankArgs) -> CliResult<()> {
    let source = load_model(&args.source_model)?;
    let images = dataset::load_images(&args.data, Split::TargetTrain)?;
    let target = adabn_init(&source, &images, args.batch_size)?;
    let ranked = rank_dataset(&source, &target, &images)?;
    tables::write_ranking(&args.out, &ranked)
}

#[derive(Debug, Clone)]
pub struct AblateArgs {
    pub data: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub seeds: usize,
    pub out: PathBuf,
    pub source_model: Option<PathBuf>,
    pub force: bool,
}

/// Per-mode results plus the source model they share.
pub struct AblationSuite {
    pub results: Vec<ModeResult>,
    pub seeds: Vec<u64>,
}

/// Runs every ablation mode for `seeds` consecutive seeds starting at the
/// config seed. Without a source model one is trained first and stored in
/// `out/source`.
pub fn ablate_suite(args: &AblateArgs, mut log: impl FnMut(&str)) -> CliResult<AblationSuite> {
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let data = data_dir(&cfg, args.data.as_deref())?;
    cfg.data = Some(data.clone());
    prepare_out_dir(&args.out, args.force)?;
    let model_path = match args.source_model.clone().or_else(|| cfg.source_model.clone()) {
        Some(p) => p,
        None => {
            let dir = args.out.join("source");
            let source_args = TrainSourceArgs {
                data: Some(data.clone()),
                config: args.config.clone(),
                out: dir.clone(),
                force: false,
            };
            train_source(&source_args, &mut log)?;
            dir.join(MODEL_FILE)
        }
    };
    cfg.source_model = Some(model_path.clone());
    write(&args.out.join(RESOLVED_CONFIG), cfg.to_text())?;
    let source = load_model(&model_path)?;
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| cfg.seed + i).collect();
    let mut results = Vec::new();
    for mode in Ablation::ALL {
        let mut reports = Vec::new();
        for &seed in &seeds {
            let run_cfg = RunConfig {
                seed,
                ablation: mode,
                ..cfg.clone()
            };
            let dir = args.out.join(mode.as_str()).join(format!("seed{seed}"));
            let record = adapt_loaded(&source, &data, &run_cfg, &dir, false, &mut log)?;
            log(&format!("{mode} seed {seed}: mean dice {:.2}", record.report.mean_dice() * 100.0));
            reports.push(record.report);
        }
        results.push(ModeResult {
            mode: mode.as_str().into(),
            reports,
        });
    }
    tables::write_ablation(&args.out.join("ablation.csv"), &results)?;
    tables::write_ablation_raw(&args.out.join("ablation_raw.csv"), &results, &seeds)?;
    Ok(AblationSuite { results, seeds })
}

/// Loads one labelled split; convenience for callers outside the CLI.
pub fn load_samples(data: &Path, split: Split) -> CliResult<Vec<Sample>> {
    dataset::load_split(data, split)
}
