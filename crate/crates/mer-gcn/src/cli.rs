//! Command-line entry points: dataset synthesis, graph inspection,
//! cross-validated training, checkpoint evaluation, and the end-to-end
//! gradient self-check.
//!
//! Exit codes are a stable scripting contract: 0 success, 1 runtime
//! failure, 2 usage error. Flags override config-file values (a flat
//! `key = value` file); the effective configuration is echoed into every
//! machine-readable output artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{generate_synthetic, load_manifest, DatasetManifest, SyntheticConfig};
use crate::eval::{
    cross_validate, evaluate, kfold_splits, loso_splits, EvalError, SplitPlan, TrainConfig,
};
use crate::graph::{AdjacencyMatrix, AuVocabulary};
use crate::model::{
    load_checkpoint, save_checkpoint, tiny_gradcheck_target, CheckpointMeta, Classifier,
    ModelVariant, CHECKPOINT_VERSION,
};
use crate::optim::{grad_check, GradCheckConfig};

/// Threshold the gradient self-check must beat to succeed.
pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config values: exit 2.
    Usage(String),
    /// Anything that failed at runtime: exit 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

fn runtime(err: impl std::fmt::Display) -> CliError {
    CliError::Runtime(err.to_string())
}

/// k out of range is a flag problem; everything else in training and
/// evaluation is a runtime failure.
fn eval_error(err: EvalError) -> CliError {
    match err {
        EvalError::KOutOfRange { .. } => CliError::Usage(err.to_string()),
        EvalError::EmptySelection => CliError::Usage(err.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

#[derive(Parser)]
#[command(
    name = "mer-gcn",
    version,
    about = "Micro-expression recognition over AU co-occurrence graphs"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (frames + manifest).
    Synth(SynthArgs),
    /// Build the AU co-occurrence graph from a manifest and export it.
    Graph(GraphArgs),
    /// Cross-validated training; writes results JSON and fold checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Finite-difference gradient check of a tiny end-to-end model.
    Gradcheck(GradcheckArgs),
}

// ── Config-file merging ─────────────────────────────────────────────────

/// Flat `key = value` file; `#` starts a comment.
#[derive(Debug)]
struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {path:?}: {e}")))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(CliError::Usage(format!(
                        "config line {} is not `key = value`: {raw}",
                        lineno + 1
                    )));
                };
                values.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(FileConfig { values })
    }

    /// flag > file > default.
    fn resolve<T: FromStr + Copy>(
        &self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|e| {
                CliError::Usage(format!("config key `{key}` has invalid value `{raw}`: {e}"))
            }),
        }
    }

    fn resolve_string(&self, flag: Option<String>, key: &str, default: &str) -> String {
        flag.or_else(|| self.values.get(key).cloned())
            .unwrap_or_else(|| default.to_string())
    }
}

// ── synth ───────────────────────────────────────────────────────────────

#[derive(Args)]
struct SynthArgs {
    /// Output directory for frames/ and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Sequences per class per subject.
    #[arg(long)]
    per: Option<usize>,
    /// Frames per sequence.
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut cfg = SyntheticConfig::new(
        file.resolve(args.subjects, "subjects", 4)?,
        file.resolve(args.classes, "classes", 3)?,
        file.resolve(args.per, "per", 2)?,
        file.resolve(args.t, "t", 8)?,
        file.resolve(args.seed, "seed", 0)?,
    );
    cfg.channels = file.resolve(args.channels, "channels", cfg.channels)?;
    cfg.noise_std = file.resolve(args.noise_std, "noise_std", cfg.noise_std)?;
    cfg.bump_amplitude = file.resolve(args.amplitude, "amplitude", cfg.bump_amplitude)?;
    let manifest = generate_synthetic(&cfg, &args.out).map_err(runtime)?;
    println!(
        "wrote {} records ({} subjects, {} classes) to {}",
        manifest.len(),
        manifest.subjects().len(),
        manifest.class_names.len(),
        args.out.join(crate::data::MANIFEST_NAME).display()
    );
    Ok(())
}

// ── graph ───────────────────────────────────────────────────────────────

#[derive(Args)]
struct GraphArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Write the adjacency export here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict to one fold's training split: loso or kfold.
    #[arg(long)]
    strategy: Option<String>,
    /// Fold index used with --strategy.
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed comma-separated AU vocabulary (default: AUs observed in the
    /// selected records). Fixing it keeps the graph size stable across
    /// folds; unobserved AUs produce zero columns.
    #[arg(long, value_delimiter = ',')]
    vocab: Option<Vec<u32>>,
}

fn build_plan(
    manifest: &DatasetManifest,
    strategy: &str,
    k: usize,
    seed: u64,
) -> Result<SplitPlan, CliError> {
    match strategy {
        "loso" => loso_splits(manifest).map_err(eval_error),
        "kfold" => kfold_splits(manifest, k, seed).map_err(eval_error),
        other => Err(CliError::Usage(format!(
            "unknown strategy `{other}` (expected loso or kfold)"
        ))),
    }
}

fn cmd_graph(args: GraphArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&args.manifest).map_err(runtime)?;
    let annotations = match &args.strategy {
        None => manifest.annotations(),
        Some(strategy) => {
            let plan = build_plan(&manifest, strategy, args.k.unwrap_or(5), args.seed.unwrap_or(0))?;
            let fold = args.fold.unwrap_or(0);
            let fold_def = plan.folds.get(fold).ok_or_else(|| {
                CliError::Usage(format!(
                    "fold {fold} out of range; plan has {} folds",
                    plan.folds.len()
                ))
            })?;
            fold_def
                .train
                .iter()
                .map(|id| manifest.record(id).expect("plan ids come from manifest").aus.clone())
                .collect()
        }
    };
    let vocab = match args.vocab {
        Some(mut ids) => {
            ids.sort_unstable();
            ids.dedup();
            AuVocabulary::from_ids(ids).map_err(|e| CliError::Usage(e.to_string()))?
        }
        None => AuVocabulary::from_annotations(&annotations).map_err(runtime)?,
    };
    let adjacency = AdjacencyMatrix::build(&annotations, &vocab).map_err(runtime)?;
    let text = adjacency.export_text(&vocab);
    let zero_columns = adjacency.zero_columns();
    println!("n {}", vocab.n());
    println!("zero-columns {}", zero_columns.len());
    if !zero_columns.is_empty() {
        let ids: Vec<u32> = zero_columns.iter().map(|&i| vocab.ids()[i]).collect();
        eprintln!(
            "warning: AUs {ids:?} never occur; consider pruning the vocabulary"
        );
    }
    match &args.out {
        Some(path) => {
            std::fs::write(path, &text)
                .map_err(|e| CliError::Runtime(format!("cannot write {path:?}: {e}")))?;
            println!("export {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// loso or kfold.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    variant: Option<ModelVariant>,
    /// Output directory for results.json and fold checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Global-norm gradient clip; 0 disables.
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Backbone width scale in (0, 1].
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Folds trained in parallel.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Serialize)]
struct EffectiveTrainRun {
    manifest: String,
    strategy: String,
    k: usize,
    jobs: usize,
    #[serde(flatten)]
    train: TrainConfig,
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let strategy = file.resolve_string(args.strategy, "strategy", "kfold");
    let k = file.resolve(args.k, "k", 5)?;
    let jobs = file.resolve(args.jobs, "jobs", 1)?.max(1);
    let clip = file.resolve(args.clip_norm, "clip_norm", 5.0)?;
    let variant = match args.variant {
        Some(v) => v,
        None => file
            .resolve_string(None, "variant", "mer-gcn")
            .parse()
            .map_err(CliError::Usage)?,
    };
    let train_config = TrainConfig {
        epochs: file.resolve(args.epochs, "epochs", 200)?,
        lr: file.resolve(args.lr, "lr", 1e-3)?,
        momentum: file.resolve(args.momentum, "momentum", 0.9)?,
        clip_norm: (clip > 0.0).then_some(clip),
        width_scale: file.resolve(args.scale, "scale", 1.0)?,
        gcn_dims: None,
        gcn_slope: crate::graph::DEFAULT_GCN_SLOPE,
        seed: file.resolve(args.seed, "seed", 0)?,
        variant,
    };
    let manifest = load_manifest(&args.manifest).map_err(runtime)?;
    let plan = build_plan(&manifest, &strategy, k, train_config.seed)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {:?}: {e}", args.out)))?;

    let cv = cross_validate(&manifest, &plan, &train_config, jobs).map_err(eval_error)?;

    let effective = EffectiveTrainRun {
        manifest: args.manifest.display().to_string(),
        strategy: strategy.clone(),
        k,
        jobs,
        train: train_config.clone(),
    };
    let config_echo = serde_json::to_value(&effective).expect("config serializes");
    for (fold, model) in cv.models.iter().enumerate() {
        let meta = checkpoint_meta(model, &manifest, &train_config, &config_echo);
        let path = args.out.join(format!("fold{fold}"));
        save_checkpoint(model, &meta, &path).map_err(runtime)?;
    }
    let results = serde_json::json!({
        "config": config_echo,
        "results": cv.report,
    });
    let results_path = args.out.join("results.json");
    std::fs::write(
        &results_path,
        serde_json::to_string_pretty(&results).expect("report serializes"),
    )
    .map_err(|e| CliError::Runtime(format!("cannot write {results_path:?}: {e}")))?;

    for fold in &cv.report.folds {
        println!(
            "fold {}: accuracy {:.4} (n={}), final train accuracy {:.4}, {:.1}s",
            fold.fold, fold.metrics.accuracy, fold.metrics.n_eval, fold.final_train_accuracy,
            fold.seconds
        );
    }
    println!(
        "pooled accuracy {:.4} over {} records ({} folds, {})",
        cv.report.pooled.accuracy,
        cv.report.pooled.n_eval,
        cv.report.folds.len(),
        strategy
    );
    println!("results {}", results_path.display());
    Ok(())
}

fn checkpoint_meta(
    model: &Classifier,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    config_echo: &serde_json::Value,
) -> CheckpointMeta {
    let backbone = model.backbone_config();
    let (vocabulary, gcn_dims) = match model {
        Classifier::MerGcn(m) => (
            m.vocab.ids().to_vec(),
            m.gcn.dims()[1..].to_vec(),
        ),
        Classifier::CnnOnly(_) => (Vec::new(), Vec::new()),
    };
    CheckpointMeta {
        version: CHECKPOINT_VERSION,
        variant: model.variant(),
        n_classes: model.n_classes(),
        class_names: manifest.class_names.clone(),
        in_channels: backbone.in_channels,
        width_scale: backbone.width_scale,
        min_t: backbone.min_t,
        vocabulary,
        gcn_dims,
        gcn_slope: config.gcn_slope,
        seed: config.seed,
        train_config: Some(config_echo.clone()),
    }
}

// ── eval ────────────────────────────────────────────────────────────────

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Evaluate only this subject's records.
    #[arg(long)]
    subject: Option<String>,
    /// Evaluate every record except this subject's.
    #[arg(long)]
    exclude_subject: Option<String>,
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&args.manifest).map_err(runtime)?;
    let (model, meta) = load_checkpoint(&args.checkpoint).map_err(runtime)?;
    if meta.n_classes != manifest.class_names.len() || meta.class_names != manifest.class_names {
        return Err(CliError::Runtime(format!(
            "checkpoint classes {:?} (n={}) do not match manifest classes {:?} (n={})",
            meta.class_names,
            meta.n_classes,
            manifest.class_names,
            manifest.class_names.len()
        )));
    }
    let ids: Vec<String> = manifest
        .records
        .iter()
        .filter(|r| match (&args.subject, &args.exclude_subject) {
            (Some(s), _) => &r.subject == s,
            (None, Some(x)) => &r.subject != x,
            (None, None) => true,
        })
        .map(|r| r.id.clone())
        .collect();
    let metrics = evaluate(&model, &manifest, &ids).map_err(eval_error)?;
    println!("accuracy {:.4} (n={})", metrics.accuracy, metrics.n_eval);
    println!("confusion (rows = true class, columns = predicted):");
    for (i, row) in metrics.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:4}")).collect();
        println!("  {:<12} {}", manifest.class_names[i], cells.join(" "));
    }
    for (name, recall) in manifest.class_names.iter().zip(&metrics.per_class_recall) {
        println!("recall {name}: {recall:.4}");
    }
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────────

#[derive(Args)]
struct GradcheckArgs {
    /// Central-difference step.
    #[arg(long)]
    eps: Option<f64>,
    /// Coordinates sampled per parameter.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Plant a wrong backward rule (negative control; must fail).
    #[arg(long)]
    corrupt: bool,
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let config = GradCheckConfig {
        eps: args.eps.unwrap_or(1e-5),
        coords_per_param: args.samples.unwrap_or(2),
        seed: args.seed.unwrap_or(17),
    };
    println!(
        "gradcheck: eps {:e}, {} coords/param, seed {}{}",
        config.eps,
        config.coords_per_param,
        config.seed,
        if args.corrupt { ", corrupted backward (negative control)" } else { "" }
    );
    let mut target = tiny_gradcheck_target(config.seed, args.corrupt).map_err(runtime)?;
    let report = grad_check(&mut target, &config).map_err(runtime)?;
    if let Some(worst) = &report.worst {
        println!(
            "max relative error {:.3e} over {} checks at {}[{}] (analytic {:.6e}, numeric {:.6e})",
            report.max_rel_err,
            report.coords_checked,
            worst.param,
            worst.index,
            worst.analytic,
            worst.numeric
        );
    }
    if report.max_rel_err < GRADCHECK_THRESHOLD {
        println!("PASS (threshold {GRADCHECK_THRESHOLD:e})");
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: max relative error {:.3e} >= {GRADCHECK_THRESHOLD:e}",
            report.max_rel_err
        )))
    }
}

// ── Entry point ─────────────────────────────────────────────────────────

/// Parses arguments and runs the selected command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Graph(args) => cmd_graph(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}
