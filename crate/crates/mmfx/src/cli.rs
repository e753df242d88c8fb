//! Command-line surface: generate synthetic data, train across the three
//! fusion wirings and adapter ranks, evaluate a checkpoint, and run the
//! self-verification suites.
//!
//! Exit codes: 0 success, 1 invalid input (config/flags/data), 2 runtime
//! failure (I/O, corrupt files, numerics), 3 verification-suite failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::load_model;
use crate::data::{
    corpus_lines, generate_synthetic, load_manifest, save_dataset, Dataset, Split, SyntheticSpec,
};
use crate::error::{Error, ErrorClass, Result};
use crate::features::Tokenizer;
use crate::fusion::{build_model, FusionVariant, ModelConfig, CLASS_NAMES};
use crate::lora::{wrap_model, LoraConfig};
use crate::rng::Rng;
use crate::train::{evaluate, train_loop, write_metrics_csv, EvalReport, TrainConfig};

/// Environment variable capping evaluation worker threads.
pub const THREADS_ENV: &str = "MMFX_THREADS";

// ----------------------------------------------------------------------
// Run configuration
// ----------------------------------------------------------------------

/// Everything one training run needs, as read from a single JSON config
/// document. Every field has a default; command-line flags override the
/// file. The fully-resolved result is snapshotted next to the run outputs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub lora: LoraConfig,
    /// Adapter fine-tuning on (frozen base) vs full fine-tuning.
    pub use_lora: bool,
    /// Dataset directory holding the split manifests.
    pub data: Option<PathBuf>,
    /// Output directory; the run writes into `<out>/<run_tag>/`.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            lora: LoraConfig::with_rank(4),
            use_lora: true,
            data: None,
            out: None,
        }
    }
}

impl RunConfig {
    /// Column-style name for the run: wiring plus adapter rank, or
    /// `_full` when every weight trains.
    pub fn run_tag(&self) -> String {
        if self.use_lora {
            format!("{}_r{}", self.model.variant, self.lora.r)
        } else {
            format!("{}_full", self.model.variant)
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&body)
        .map_err(|e| Error::Config(format!("{}: {what}: {e}", path.display())))
}

fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(raw) => raw
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                Error::Config(format!("{THREADS_ENV}={raw:?} is not a positive integer"))
            }),
        Err(_) => Ok(1),
    }
}

// ----------------------------------------------------------------------
// Argument grammar
// ----------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "mmfx",
    about = "Desk-scale multimodal transformer classifier: synthetic data, training, evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic image+report dataset with three splits.
    GenData(GenDataArgs),
    /// Train one model; writes metrics, checkpoint, and resolved config.
    Train(TrainArgs),
    /// Score a checkpoint against a manifest; prints per-class AUCs.
    Eval(EvalArgs),
    /// Run the built-in verification suites.
    Verify,
}

#[derive(Args)]
struct GenDataArgs {
    /// Directory to write manifests, images, and the corpus into.
    #[arg(long)]
    out: PathBuf,
    /// JSON file holding a full generator recipe.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training-split size (validation and test scale with it).
    #[arg(long)]
    n: Option<usize>,
    /// Per-class, per-channel evidence flip probability.
    #[arg(long)]
    noise: Option<f64>,
    /// Image side length in pixels.
    #[arg(long)]
    side: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file holding a run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (train/validation manifests + corpus).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; the run writes into `<out>/<run_tag>/`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fusion wiring: parallel, serial, or mixed.
    #[arg(long)]
    arch: Option<String>,
    /// Adapter rank.
    #[arg(long)]
    lora_r: Option<usize>,
    /// Train every weight instead of adapters over a frozen base.
    #[arg(long)]
    no_lora: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest file, or a dataset directory (then `test.jsonl` is used).
    #[arg(long)]
    data: PathBuf,
    /// Where to write the AUC table CSV (default: next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
}

// ----------------------------------------------------------------------
// Commands
// ----------------------------------------------------------------------

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &args.config {
        Some(path) => read_json(path, "generator recipe")?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.n {
        spec.n_examples = n;
    }
    if let Some(noise) = args.noise {
        spec.noise_rate = noise;
    }
    if let Some(side) = args.side {
        spec.side = side;
    }
    let (train, validation, test) = generate_synthetic(&spec)?;
    for ds in [&train, &validation, &test] {
        save_dataset(&args.out, ds)?;
    }
    let corpus_path = args.out.join("corpus.txt");
    let mut corpus = corpus_lines(&train).join("\n");
    if !corpus.is_empty() {
        corpus.push('\n');
    }
    std::fs::write(&corpus_path, corpus).map_err(|e| Error::io(&corpus_path, e))?;
    println!(
        "wrote {} train / {} validation / {} test examples to {}",
        train.len(),
        validation.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

fn merged_run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(path) => read_json(path, "run configuration")?,
        None => RunConfig::default(),
    };
    if let Some(arch) = &args.arch {
        cfg.model.variant = arch.parse::<FusionVariant>()?;
    }
    if let Some(r) = args.lora_r {
        cfg.lora.r = r;
    }
    if args.no_lora {
        cfg.use_lora = false;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(data) = &args.data {
        cfg.data = Some(data.clone());
    }
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

/// Corpus for vocabulary building: the dedicated file when present,
/// otherwise the training reports themselves.
fn load_corpus(data_dir: &Path, train: &Dataset) -> Result<Vec<String>> {
    let path = data_dir.join("corpus.txt");
    if path.exists() {
        let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(body.lines().map(str::to_string).collect())
    } else {
        Ok(corpus_lines(train))
    }
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = merged_run_config(args)?;
    let data_dir = cfg
        .data
        .clone()
        .ok_or_else(|| Error::Config("no dataset directory: pass --data or set \"data\"".into()))?;
    let out_dir = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory: pass --out or set \"out\"".into()))?;
    cfg.train.validate()?;
    if cfg.use_lora {
        cfg.lora.validate()?;
    }

    // Fail on missing/broken inputs before touching the output directory.
    let train_set = load_manifest(&data_dir.join("train.jsonl"), Split::Train)?;
    let val_set = load_manifest(&data_dir.join("validation.jsonl"), Split::Validation)?;
    let corpus = load_corpus(&data_dir, &train_set)?;
    let tokenizer = Tokenizer::build_vocab(&corpus, cfg.model.vocab_size);
    cfg.model.vocab_size = tokenizer.vocab_size();
    cfg.model = cfg.model.resolved();

    let mut rng = Rng::seed_from(cfg.train.seed);
    let mut model = build_model(&cfg.model, &mut rng)?;
    if cfg.use_lora {
        wrap_model(&mut model, &cfg.lora, &mut rng)?;
    }

    let run_dir = out_dir.join(cfg.run_tag());
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let resolved_path = run_dir.join("config.resolved");
    let snapshot = serde_json::to_string_pretty(&cfg)
        .map_err(|e| Error::Config(format!("config snapshot serialization: {e}")))?;
    std::fs::write(&resolved_path, snapshot + "\n").map_err(|e| Error::io(&resolved_path, e))?;

    let threads = threads_from_env()?;
    println!(
        "run {}: {} train / {} validation examples, {} epochs",
        cfg.run_tag(),
        train_set.len(),
        val_set.len(),
        cfg.train.epochs
    );
    let checkpoint_path = run_dir.join("best.mmfx");
    let outcome = train_loop(
        &mut model,
        &train_set,
        &val_set,
        &tokenizer,
        &cfg.train,
        &checkpoint_path,
        threads,
        |r| {
            let auc = r.val_mean_auc.map_or("-".to_string(), |a| format!("{a:.3}"));
            println!(
                "epoch {:>3}  train_loss {:.4}  val_loss {:.4}  val_auc {auc}",
                r.epoch, r.train_loss, r.val_loss
            );
        },
    )?;
    write_metrics_csv(&run_dir.join("metrics.csv"), &outcome.records, cfg.model.n_classes)?;
    match (outcome.best_epoch, outcome.best_val_auc) {
        (Some(e), Some(a)) => {
            println!("best epoch {e} (val mean AUC {a:.3}); outputs in {}", run_dir.display())
        }
        _ => println!("no validation AUC was defined; outputs in {}", run_dir.display()),
    }
    Ok(())
}

/// Render the evaluation table: one row per class, then the mean, values
/// to three decimals, undefined entries dashed.
pub fn auc_table(report: &EvalReport, class_names: &[&str]) -> String {
    let width = class_names.iter().map(|n| n.len()).max().unwrap_or(5).max("mean".len());
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |a| format!("{a:.3}"));
    let mut out = String::new();
    for (name, auc) in class_names.iter().zip(&report.per_class_auc) {
        out.push_str(&format!("{name:<width$}  {}\n", fmt(*auc)));
    }
    out.push_str(&format!("{:<width$}  {}\n", "mean", fmt(report.mean_auc)));
    out
}

fn auc_csv(report: &EvalReport, class_names: &[&str]) -> String {
    let fmt = |v: Option<f64>| v.map_or(String::new(), |a| format!("{a:.3}"));
    let mut out = String::from("class,auc\n");
    for (name, auc) in class_names.iter().zip(&report.per_class_auc) {
        out.push_str(&format!("{name},{}\n", fmt(*auc)));
    }
    out.push_str(&format!("mean,{}\n", fmt(report.mean_auc)));
    out
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (model, doc) = load_model(&args.checkpoint)?;
    let words = doc.vocab.ok_or_else(|| {
        Error::Checkpoint(format!(
            "{}: checkpoint carries no vocabulary, cannot tokenize reports",
            args.checkpoint.display()
        ))
    })?;
    let tokenizer = Tokenizer::from_words(words);
    if tokenizer.vocab_size() != model.cfg.vocab_size {
        return Err(Error::Checkpoint(format!(
            "{}: vocabulary holds {} ids but the model embeds {}",
            args.checkpoint.display(),
            tokenizer.vocab_size(),
            model.cfg.vocab_size
        )));
    }

    let manifest = if args.data.is_dir() { args.data.join("test.jsonl") } else { args.data.clone() };
    let split = match manifest.file_stem().and_then(|s| s.to_str()) {
        Some("train") => Split::Train,
        Some("validation") => Split::Validation,
        _ => Split::Test,
    };
    let dataset = load_manifest(&manifest, split)?;
    if dataset.is_empty() {
        return Err(Error::Data(format!("{}: no examples to score", manifest.display())));
    }

    let threads = threads_from_env()?;
    let seq_len = model.cfg.clone().resolved().text_seq_len;
    let report = evaluate(&model, &dataset, &tokenizer, seq_len, 20, threads)?;
    print!("{}", auc_table(&report, &CLASS_NAMES));

    let csv_path = args.out.clone().unwrap_or_else(|| {
        let stem = args.checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("eval");
        args.checkpoint.with_file_name(format!("{stem}_eval.csv"))
    });
    std::fs::write(&csv_path, auc_csv(&report, &CLASS_NAMES))
        .map_err(|e| Error::io(&csv_path, e))?;
    println!("table written to {}", csv_path.display());
    Ok(())
}

fn cmd_verify() -> i32 {
    let results = crate::verify::run_all();
    let mut failed = false;
    for r in &results {
        println!("{}", r.line());
        failed |= !r.passed;
    }
    if failed {
        3
    } else {
        0
    }
}

// ----------------------------------------------------------------------
// Entry point
// ----------------------------------------------------------------------

/// Parse arguments, dispatch, and map errors to exit codes.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; they exit cleanly.
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Verify => return cmd_verify(),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Validation => 1,
                ErrorClass::Runtime => 2,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_tags_mirror_the_grid_naming() {
        let mut cfg = RunConfig::default();
        cfg.model.variant = FusionVariant::Parallel;
        cfg.lora.r = 2;
        assert_eq!(cfg.run_tag(), "parallel_r2");
        cfg.model.variant = FusionVariant::Serial;
        cfg.lora.r = 8;
        assert_eq!(cfg.run_tag(), "serial_r8");
        cfg.model.variant = FusionVariant::Mixed;
        cfg.use_lora = false;
        assert_eq!(cfg.run_tag(), "mixed_full");
    }

    #[test]
    fn config_files_merge_under_flag_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"model": {"d_model": 16}, "train": {"epochs": 3}, "lora": {"r": 8}}"#,
        )
        .unwrap();
        let args = TrainArgs {
            config: Some(path),
            data: Some(PathBuf::from("/tmp/ds")),
            out: None,
            arch: Some("serial".to_string()),
            lora_r: Some(2),
            no_lora: false,
            seed: Some(9),
        };
        let cfg = merged_run_config(&args).unwrap();
        assert_eq!(cfg.model.d_model, 16);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.variant, FusionVariant::Serial);
        assert_eq!(cfg.lora.r, 2, "flag must beat the file");
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.data.as_deref(), Some(Path::new("/tmp/ds")));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"modle": {}}"#).unwrap();
        let args = TrainArgs {
            config: Some(path),
            data: None,
            out: None,
            arch: None,
            lora_r: None,
            no_lora: false,
            seed: None,
        };
        let err = merged_run_config(&args).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got: {err}");
        assert!(err.to_string().contains("modle"), "got: {err}");
    }

    #[test]
    fn bad_arch_names_list_the_valid_ones() {
        let args = TrainArgs {
            config: None,
            data: None,
            out: None,
            arch: Some("diagonal".to_string()),
            lora_r: None,
            no_lora: false,
            seed: None,
        };
        let err = merged_run_config(&args).unwrap_err();
        for name in ["parallel", "serial", "mixed"] {
            assert!(err.to_string().contains(name), "missing {name} in: {err}");
        }
    }

    #[test]
    fn table_rendering_handles_missing_columns() {
        let report = EvalReport {
            loss: 0.5,
            scores: Vec::new(),
            per_class_auc: vec![Some(0.91234), None],
            mean_auc: Some(0.91234),
        };
        let table = auc_table(&report, &["Alpha", "Beta"]);
        assert!(table.contains("Alpha  0.912\n"), "got:\n{table}");
        assert!(table.contains("Beta   -\n"), "got:\n{table}");
        assert!(table.contains("mean   0.912\n"), "got:\n{table}");
        let csv = auc_csv(&report, &["Alpha", "Beta"]);
        assert_eq!(csv, "class,auc\nAlpha,0.912\nBeta,\nmean,0.912\n");
    }
}
