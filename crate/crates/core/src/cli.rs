//! Command-line surface.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::io::checkpoint::{self, CheckpointError};
use crate::io::config::{load_config, ConfigError, LoadedConfig, Mode, RunConfig};
use crate::io::manifest::{write_manifest, Split};
use crate::io::report::{self, EvalReport};
use crate::numerics::ctns;
use crate::pipeline::{self, LoadedDataset, MappedOracle, PipelineError, Sample, TargetProtocol, UnlabeledView};
use crate::synthdata;

#[derive(Debug, Parser)]
#[command(name = "cacon", version, about = "Cross-age contrastive face representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Pretrained checkpoint directory (defaults to pipeline.checkpoint)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest, CTNS images, synth.json)
    GenData(Common),
    /// Contrastive pretraining of encoder and projection head
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Linear fine-tuning on the frozen encoder
    Finetune(WithCheckpoint),
    /// Rank-1 identification on the test split
    EvalId {
        #[command(flatten)]
        inner: WithCheckpoint,
        /// Classifier checkpoint directory (defaults to pipeline.classifier)
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
    /// Threshold verification with 10-fold cross-validation
    EvalVerify(WithCheckpoint),
    /// Leave-one-image-out identification
    Loio(WithCheckpoint),
    /// Fine-tune on the source dataset, evaluate on the target
    CrossEval(WithCheckpoint),
    /// Check that artifacts in --out carry this config's hash and seed
    Verify(Common),
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 1,
            CliError::Pipeline(e) if e.is_config() => 1,
            _ => 2,
        }
    }
}

fn runtime<E: std::fmt::Display>(context: &Path) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", context.display()))
}

pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Run {
    cfg: RunConfig,
    hash: String,
    seed: u64,
    out: PathBuf,
}

fn prepare(common: &Common, name: &str) -> Result<Run, CliError> {
    let LoadedConfig { mut config, hash } = load_config(&common.config)?;
    if let Some(s) = common.seed {
        config.seed = s;
    }
    std::fs::create_dir_all(&common.out).map_err(runtime(&common.out))?;
    append_log(&common.out, name, config.seed, &hash);
    Ok(Run {
        seed: config.seed,
        cfg: config,
        hash,
        out: common.out.clone(),
    })
}

/// The sidecar log is the only artifact carrying wall-clock time.
fn append_log(out: &Path, command: &str, seed: u64, hash: &str) {
    use std::io::Write;
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    if let Ok(mut f) = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("run.log"))
    {
        let _ = writeln!(f, "{secs} {command} seed={seed} config={hash}");
    }
}

fn manifest_path(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.data
        .manifest
        .as_deref()
        .ok_or_else(|| CliError::Usage("data.manifest is not set".into()))
}

fn load(cfg: &RunConfig) -> Result<LoadedDataset, CliError> {
    Ok(pipeline::load_dataset(manifest_path(cfg)?, cfg.pipeline.execution)?)
}

fn checkpoint_dir(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("no {what} given (flag or config)")))
}

fn split(samples: &[Sample], which: Split) -> Vec<&Sample> {
    samples.iter().filter(|s| s.split == which).collect()
}

fn write_eval(run: &Run, report: EvalReport) -> Result<(), CliError> {
    let report = report.stamped(&run.hash, run.seed);
    let path = run.out.join("report.json");
    report::write_report(&path, &report).map_err(runtime(&path))?;
    print!("{}", report::summary_table(std::slice::from_ref(&report)));
    Ok(())
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData(c) => gen_data(&prepare(&c, "gen-data")?),
        Command::Pretrain { common, mode } => {
            let mut run = prepare(&common, "pretrain")?;
            if let Some(m) = mode {
                run.cfg.pipeline.mode = m;
            }
            pretrain(&run)
        }
        Command::Finetune(w) => {
            let run = prepare(&w.common, "finetune")?;
            let ck = checkpoint_dir(&w.checkpoint, &run.cfg.pipeline.checkpoint, "checkpoint")?;
            finetune(&run, &ck)
        }
        Command::EvalId { inner, classifier } => {
            let run = prepare(&inner.common, "eval-id")?;
            let ck = checkpoint_dir(&inner.checkpoint, &run.cfg.pipeline.checkpoint, "checkpoint")?;
            let cl = checkpoint_dir(&classifier, &run.cfg.pipeline.classifier, "classifier")?;
            let (model, _) = checkpoint::load_model(&ck)?;
            let (clf, _) = checkpoint::load_classifier(&cl)?;
            let data = load(&run.cfg)?;
            let test = split(&data.samples, Split::Test);
            let r = pipeline::eval_identification(&model, &clf, &test, run.cfg.pipeline.execution)?;
            write_eval(&run, r)
        }
        Command::EvalVerify(w) => {
            let run = prepare(&w.common, "eval-verify")?;
            let ck = checkpoint_dir(&w.checkpoint, &run.cfg.pipeline.checkpoint, "checkpoint")?;
            let (model, _) = checkpoint::load_model(&ck)?;
            let data = load(&run.cfg)?;
            let p = &run.cfg.pipeline;
            let (pool, pairs) = match &run.cfg.data.pairs {
                Some(path) => {
                    let all: Vec<&Sample> = data.samples.iter().collect();
                    let pairs = pipeline::read_pairs(path, &all)?;
                    (all, pairs)
                }
                None => {
                    let test = split(&data.samples, Split::Test);
                    let pairs = pipeline::sample_pairs(&test, p.verification_pairs, run.seed)?;
                    (test, pairs)
                }
            };
            let r = pipeline::eval_verification(&model, &pool, &pairs, p.verification_folds, p.execution)?;
            write_eval(&run, r)
        }
        Command::Loio(w) => {
            let run = prepare(&w.common, "loio")?;
            let ck = checkpoint_dir(&w.checkpoint, &run.cfg.pipeline.checkpoint, "checkpoint")?;
            let (model, _) = checkpoint::load_model(&ck)?;
            let data = load(&run.cfg)?;
            let all: Vec<&Sample> = data.samples.iter().collect();
            write_eval(&run, pipeline::run_loio(&model, &all, &run.cfg)?)
        }
        Command::CrossEval(w) => {
            let run = prepare(&w.common, "cross-eval")?;
            let ck = checkpoint_dir(&w.checkpoint, &run.cfg.pipeline.checkpoint, "checkpoint")?;
            cross_eval(&run, &ck)
        }
        Command::Verify(c) => verify(&prepare(&c, "verify")?),
    }
}

fn gen_data(run: &Run) -> Result<(), CliError> {
    let mut spec = run.cfg.data.synth.clone();
    spec.seed = run.seed;
    let mut data = synthdata::generate_with(&spec, run.cfg.pipeline.execution)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    pipeline::assign_splits(&mut data.records, &run.cfg.data.split, run.seed);
    let images = run.out.join("images");
    std::fs::create_dir_all(&images).map_err(runtime(&images))?;
    for (r, img) in data.records.iter().zip(&data.images) {
        let path = run.out.join(&r.path);
        ctns::write(&path, &img.to_tensor()).map_err(runtime(&path))?;
    }
    let manifest = run.out.join("manifest.csv");
    write_manifest(&manifest, &data.records).map_err(runtime(&manifest))?;
    let spec_path = run.out.join(pipeline::SYNTH_SPEC_FILE);
    let text = serde_json::to_string_pretty(&spec).map_err(runtime(&spec_path))?;
    std::fs::write(&spec_path, text + "\n").map_err(runtime(&spec_path))?;
    println!("wrote {} images for {} subjects", data.len(), spec.n_subjects);
    Ok(())
}

fn pretrain(run: &Run) -> Result<(), CliError> {
    let data = load(&run.cfg)?;
    let oracle = data.synth.as_ref().map(|(d, map)| MappedOracle { data: d, map });
    let view = UnlabeledView::pretraining(&data.samples);
    let at = oracle.as_ref().map(|o| o as &dyn crate::augment::AgeTransform);
    let out = pipeline::pretrain(&view, at, &run.cfg)?;
    let dir = run.out.join("checkpoint");
    checkpoint::save_model(&dir, &out.model, run.seed, &run.hash)?;
    let curve = run.out.join("pretrain_loss.csv");
    report::write_loss_curve(&curve, &out.epoch_losses).map_err(runtime(&curve))?;
    if let (Some(first), Some(last)) = (out.epoch_losses.first(), out.epoch_losses.last()) {
        println!("pretrain {}: {} steps, loss {first:.4} -> {last:.4}", run.cfg.pipeline.mode, out.steps);
    }
    Ok(())
}

fn finetune(run: &Run, ck: &Path) -> Result<(), CliError> {
    let (model, _) = checkpoint::load_model(ck)?;
    let data = load(&run.cfg)?;
    let mut train = split(&data.samples, Split::Finetune);
    if train.is_empty() {
        train = split(&data.samples, Split::Train);
    }
    let required: Vec<u64> = split(&data.samples, Split::Test).iter().map(|s| s.subject).collect();
    let out = pipeline::finetune_linear(&model, &train, &required, &run.cfg)?;
    let dir = run.out.join("classifier");
    checkpoint::save_classifier(&dir, &out.classifier, run.seed, &run.hash)?;
    let curve = run.out.join("finetune_loss.csv");
    report::write_loss_curve(&curve, &out.epoch_losses).map_err(runtime(&curve))?;
    println!("finetune: train accuracy {:.2}%", out.train_accuracy);
    Ok(())
}

fn cross_eval(run: &Run, ck: &Path) -> Result<(), CliError> {
    let (model, _) = checkpoint::load_model(ck)?;
    let source = load(&run.cfg)?;
    let tgt_path = run
        .cfg
        .data
        .target_manifest
        .as_deref()
        .ok_or_else(|| CliError::Usage("data.target_manifest is not set".into()))?;
    let target = pipeline::load_dataset(tgt_path, run.cfg.pipeline.execution)?;
    let src: Vec<&Sample> = source.samples.iter().collect();
    let tgt: Vec<&Sample> = target.samples.iter().collect();
    let protocol = match &run.cfg.data.target_pairs {
        Some(p) => TargetProtocol::Verification(pipeline::read_pairs(p, &tgt)?),
        None => TargetProtocol::NearestNeighbor,
    };
    let name = |p: &Path| {
        p.parent()
            .and_then(|d| d.file_name())
            .map_or_else(|| "data".to_string(), |n| n.to_string_lossy().into_owned())
    };
    let r = pipeline::run_cross_dataset(
        &model,
        (&name(manifest_path(&run.cfg)?), &src),
        (&name(tgt_path), &tgt),
        &protocol,
        &run.cfg,
    )?;
    write_eval(run, r)
}

/// Walks `--out` and checks every checkpoint and report against the config.
fn verify(run: &Run) -> Result<(), CliError> {
    let mut checked = 0;
    let mut problems = Vec::new();
    let mut stack = vec![run.out.clone()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(runtime(&dir))?;
        for entry in entries {
            let path = entry.map_err(runtime(&dir))?.path();
            if path.is_dir() {
                if path.join(checkpoint::META_FILE).is_file() {
                    let meta = checkpoint::read_meta(&path)?;
                    let loaded = match meta.kind {
                        checkpoint::CheckpointKind::Contrastive => checkpoint::load_model(&path).map(|_| ()),
                        checkpoint::CheckpointKind::Classifier => checkpoint::load_classifier(&path).map(|_| ()),
                    };
                    if let Err(e) = loaded {
                        problems.push(format!("{}: {e}", path.display()));
                    }
                    check_stamp(&path, &meta.config_hash, meta.seed, run, &mut problems);
                    checked += 1;
                } else {
                    stack.push(path);
                }
            } else if path.file_name().is_some_and(|n| n == "report.json") {
                let r = report::read_report(&path).map_err(runtime(&path))?;
                check_stamp(&path, &r.config_hash, r.seed, run, &mut problems);
                checked += 1;
            }
        }
    }
    if problems.is_empty() {
        println!("verified {checked} artifacts");
        Ok(())
    } else {
        Err(CliError::Runtime(problems.join("\n")))
    }
}

fn check_stamp(path: &Path, hash: &str, seed: u64, run: &Run, problems: &mut Vec<String>) {
    if hash != run.hash {
        problems.push(format!("{}: config hash {hash} differs from {}", path.display(), run.hash));
    }
    if seed != run.seed {
        problems.push(format!("{}: seed {seed} differs from {}", path.display(), run.seed));
    }
}
