//! `phase-curator` command line.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use super::{classify, curate, evaluate, load_split, open_manifest, train, PipelineConfig, PipelineError, Prediction, PredictionLine, ScanFailure};
use super::{LossMode, CURATED_SCHEMA, EVAL_SCHEMA, PREDICTIONS_SCHEMA, TRAIN_LOG_SCHEMA};
use crate::io::{read_jsonl, read_rvol, write_jsonl, write_rvol, SchemaHeader, Volume};
use crate::miner::{default_rules, LabeledScan, LineError, RejectedScan, RuleSet};
use crate::model::{load, predict, preprocess, saliency, save, PhaseLabel};
use crate::phantom::generate_dataset;

pub const MINED_SCHEMA: &str = "phase-curator/mined";
const SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "phase-curator", version, about = "Phase identification and curation for dynamic liver CT", arg_required_else_help = true)]
struct Cli {
    /// JSON pipeline configuration (kebab-case keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset: volumes plus train/val/test manifests.
    Phantom {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Filter a manifest and label scans from their DICOM descriptions.
    Mine {
        #[command(flatten)]
        input: ManifestArgs,
        /// Rule file replacing the built-in rules.
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with a learning-rate sweep and validation-based selection.
    Train {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        volume_root: Option<PathBuf>,
        #[arg(long)]
        rules: Option<PathBuf>,
        /// discard-coarse or ace.
        #[arg(long)]
        loss_mode: Option<LossMode>,
        /// Checkpoint destination.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Epoch log (JSON lines); defaults to the checkpoint path plus `.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Predict the phase of every kept scan in a manifest.
    Classify {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        input: ManifestArgs,
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Harvest one scan per phase of interest for each study.
    Curate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against reference phases, classifier versus text labels.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        /// JSON report destination; the table always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export a class saliency volume for one scan.
    Cam {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        volume: PathBuf,
        /// Phase to explain; defaults to the predicted one.
        #[arg(long)]
        class: Option<PhaseLabel>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ManifestArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Base directory for relative volume paths (default: the manifest's directory).
    #[arg(long)]
    volume_root: Option<PathBuf>,
}

#[derive(Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
enum MinedLine<'a> {
    Keep(&'a LabeledScan),
    Drop(&'a RejectedScan),
    Error(&'a LineError),
}

/// Run the CLI on `args` (program name first) and return the exit code:
/// 0 on success, 1 on usage or configuration errors, 2 on data errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    crate::exec::init_threads_from_env();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                PipelineError::Config(_) => 1,
                _ => 2,
            }
        }
    }
}

fn required(flag: Option<PathBuf>, configured: &Option<PathBuf>, name: &str) -> Result<PathBuf, PipelineError> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| PipelineError::Config(format!("--{name} is required (or set it under \"paths\" in the config)")))
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::file(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| PipelineError::file(path, e))
}

fn write_records<T: Serialize>(path: &Path, schema: &str, records: &[T]) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    write_jsonl(&mut w, &SchemaHeader::new(schema, SCHEMA_VERSION), records).map_err(|e| PipelineError::file(path, e))
}

fn load_rules(path: Option<&Path>) -> Result<RuleSet, PipelineError> {
    match path {
        None => Ok(default_rules()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| PipelineError::file(p, e))?;
            RuleSet::parse(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", p.display())))
        }
    }
}

/// Successful predictions from a predictions file, in file order.
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, PipelineError> {
    let f = File::open(path).map_err(|e| PipelineError::file(path, e))?;
    let (_, lines) = read_jsonl::<PredictionLine>(BufReader::new(f)).map_err(|e| PipelineError::file(path, e))?;
    let mut out = Vec::new();
    for l in lines {
        match l.record {
            Ok(PredictionLine::Ok(p)) => out.push(p),
            Ok(PredictionLine::Failed(_)) => {}
            Err(e) => return Err(PipelineError::Data(format!("{}: line {}: {e}", path.display(), l.line))),
        }
    }
    Ok(out)
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let paths = cfg.paths.clone();
    match cli.command {
        Command::Phantom { out } => {
            let out = required(out, &paths.out_dir, "out")?;
            let summary = generate_dataset(&cfg.phantom, &cfg.dataset, &out)?;
            for (split, counts) in &summary.scans {
                println!("{:<5} {:>5} scans  NC/A/V/D/O {:?}", split.name(), counts.iter().sum::<usize>(), counts);
            }
            println!("{} patients, {} coarse training labels, written to {}", summary.patients, summary.coarse, out.display());
        }
        Command::Mine { input, rules, out } => {
            let manifest = required(input.manifest, &paths.manifest, "manifest")?;
            let rules = load_rules(rules.as_deref().or(paths.rules.as_deref()))?;
            let mined = open_manifest(&manifest, &rules)?;
            let mut lines: Vec<(usize, MinedLine)> = Vec::new();
            lines.extend(mined.labeled.iter().map(|s| (s.line, MinedLine::Keep(s))));
            lines.extend(mined.rejected.iter().map(|s| (s.line, MinedLine::Drop(s))));
            lines.extend(mined.errors.iter().map(|s| (s.line, MinedLine::Error(s))));
            lines.sort_by_key(|(l, _)| *l);
            let records: Vec<&MinedLine> = lines.iter().map(|(_, m)| m).collect();
            write_records(&out, MINED_SCHEMA, &records)?;
            println!("kept {}, dropped {}, unreadable {}", mined.labeled.len(), mined.rejected.len(), mined.errors.len());
            for (class, n) in &mined.counts {
                println!("  {class:<8} {n}");
            }
        }
        Command::Train {
            train: train_path,
            val,
            volume_root,
            rules,
            loss_mode,
            out,
            log,
        } => {
            let train_path = required(train_path, &paths.train_manifest, "train")?;
            let val_path = required(val, &paths.val_manifest, "val")?;
            let out = required(out, &paths.checkpoint, "out")?;
            let root = volume_root.or(paths.volume_root.clone());
            let rules = load_rules(rules.as_deref().or(paths.rules.as_deref()))?;
            if let Some(m) = loss_mode {
                cfg.training.loss_mode = m;
            }
            let tr = load_split(&train_path, root.as_deref(), &rules, &cfg.model)?;
            let va = load_split(&val_path, root.as_deref(), &rules, &cfg.model)?;
            let outcome = train(&cfg.model, &cfg.training, &tr, &va)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| PipelineError::file(dir, e))?;
            }
            save(&outcome.checkpoint, &out)?;
            let log = log.unwrap_or_else(|| {
                let mut s = out.clone().into_os_string();
                s.push(".log.jsonl");
                s.into()
            });
            write_records(&log, TRAIN_LOG_SCHEMA, &outcome.log)?;
            let m = outcome.checkpoint.meta;
            println!(
                "selected learning rate {} epoch {} (validation macro F1 {:.4}); checkpoint {}",
                outcome.learning_rate,
                m.epoch,
                m.val_metric,
                out.display()
            );
        }
        Command::Classify { checkpoint, input, rules, out } => {
            let ckpt_path = required(checkpoint, &paths.checkpoint, "checkpoint")?;
            let manifest = required(input.manifest, &paths.manifest, "manifest")?;
            let root = input.volume_root.or(paths.volume_root.clone());
            let rules = load_rules(rules.as_deref().or(paths.rules.as_deref()))?;
            let ckpt = load(&ckpt_path)?;
            let mined = open_manifest(&manifest, &rules)?;
            let mut lines = classify(&ckpt, &mined, &manifest, root.as_deref());
            lines.extend(mined.errors.iter().map(|e| {
                PredictionLine::Failed(ScanFailure {
                    line: e.line,
                    series_uid: String::new(),
                    error: e.error.clone(),
                })
            }));
            let line_of = |p: &PredictionLine| match p {
                PredictionLine::Ok(p) => p.line,
                PredictionLine::Failed(f) => f.line,
            };
            lines.sort_by_key(line_of);
            let failed = lines.iter().filter(|l| matches!(l, PredictionLine::Failed(_))).count();
            write_records(&out, PREDICTIONS_SCHEMA, &lines)?;
            println!("classified {} scans, {} failures", lines.len() - failed, failed);
            for l in &lines {
                if let PredictionLine::Failed(f) = l {
                    eprintln!("line {}: {}", f.line, f.error);
                }
            }
        }
        Command::Curate { predictions, out } => {
            let preds = read_predictions(&predictions)?;
            let curated = curate(preds.iter().map(Into::into));
            write_records(&out, CURATED_SCHEMA, &curated)?;
            let complete = curated.iter().filter(|s| s.complete.values().all(|&b| b)).count();
            println!("{} studies curated, {complete} complete", curated.len());
        }
        Command::Eval { predictions, out } => {
            let preds = read_predictions(&predictions)?;
            let report = evaluate(&preds, &cfg.evaluation)?;
            if let Some(out) = out {
                write_records(&out, EVAL_SCHEMA, &[&report])?;
            }
            print!("{}", report.to_table());
        }
        Command::Cam {
            checkpoint,
            volume,
            class,
            out,
        } => {
            let ckpt = load(&required(checkpoint, &paths.checkpoint, "checkpoint")?)?;
            let vol = read_rvol(&volume)?;
            let input = preprocess(&vol, ckpt.config())?;
            let class = match class {
                Some(c) => c,
                None => predict(&ckpt, &input)?.0,
            };
            let map = saliency(&ckpt, &input, class.code())?;
            let [d, h, w] = ckpt.config().input_dims;
            let spacing = [0, 1, 2].map(|a| vol.spacing[a] * vol.dims()[a] as f32 / [d, h, w][a] as f32);
            write_rvol(&out, &Volume { data: map, spacing })?;
            println!("saliency for {class} written to {}", out.display());
        }
    }
    std::io::stdout().flush().map_err(|e| PipelineError::file(Path::new("<stdout>"), e))
}
