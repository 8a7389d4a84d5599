//! Pipeline CLI. Every subcommand works inside a run directory (`--out`)
//! that ends up self-describing: config, dataset, checkpoints, metrics,
//! reports and plots all live under it.
//!
//! Exit codes: 0 success, 2 missing upstream artifact, 3 config schema
//! violation, 4 numerical abort (non-finite loss), 1 anything else.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use langemb::config::{ConfigError, TrainConfig};
use langemb::eval::{self, ConditionTags, EvalError, EvalReport};
use langemb::model::ModelError;
use langemb::synthdata;
use langemb::tensor::TensorError;
use langemb::training::{self, RunManifest, TrainData, TrainError};

#[derive(Parser)]
#[command(
    name = "langemb",
    about = "Speaker-disentangled language embeddings on a synthetic multilingual corpus",
    long_about = "Pipeline: datagen -> pretrain-encoder -> train --stage 1 -> train --stage 2 -> eval.\n\
Config keys and defaults are the fields of the JSON config; every \
paper-relevant toggle is also a flag. LD_RUN_SEED overrides the config seed."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run directory; all outputs land here
    #[arg(long)]
    out: PathBuf,
    /// JSON config; defaults to <out>/config.json if present, else built-in
    /// defaults (seed 7, 6 seen + 1 unseen languages, 8 speakers each)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; defaults to <out>/dataset
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override speaker-adversarial training (true/false; default from config: true)
    #[arg(long)]
    sat: Option<bool>,
    /// Override the gradient-reversal scale lambda (default from config: 1.0)
    #[arg(long)]
    grl_lambda: Option<f64>,
    /// Override the projection layer toggle (true/false; default from config: true)
    #[arg(long)]
    projection: Option<bool>,
    /// Override the stage-2 unseen-language utterance budget (default from config: 20)
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus into <out>/dataset
    Datagen(Common),
    /// Train the encoder on language ID until the accuracy gate
    PretrainEncoder(Common),
    /// Run training stage 1 (multilingual) or 2 (low-resource fine-tune)
    Train {
        #[command(flatten)]
        common: Common,
        /// 1 = multilingual stage, 2 = low-resource fine-tune
        #[arg(long)]
        stage: u32,
        /// Encoder checkpoint (stage 1); defaults to <out>/checkpoints/encoder.ldck
        #[arg(long)]
        encoder_checkpoint: Option<PathBuf>,
        /// Stage-1 checkpoint (stage 2); defaults to the condition-slugged
        /// file under <out>/checkpoints
        #[arg(long)]
        stage1_checkpoint: Option<PathBuf>,
    },
    /// Evaluate the stage-1 checkpoint (and the stage-2 one if present)
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to the condition-slugged stage-1 file
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate all four {sat, projection} stage-1 conditions and write summary.md
    Ablation(Common),
    /// Redraw SVG plots from the eval reports already in <out>
    Plot {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
enum AppError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] synthdata::DataError),
    #[error("{0}")]
    Msg(String),
}

fn exit_code_for(err: &AppError) -> u8 {
    match err {
        AppError::Config(_) => 3,
        AppError::Train(TrainError::Config(_)) => 3,
        AppError::Train(TrainError::MissingArtifact(_)) => 2,
        AppError::Train(TrainError::Model(ModelError::Io { .. })) => 2,
        AppError::Eval(EvalError::MissingCondition { .. }) => 2,
        AppError::Train(TrainError::NanAbort { .. }) => 4,
        AppError::Train(TrainError::Tensor(TensorError::NonFinite { .. })) => 4,
        AppError::Eval(EvalError::Tensor(TensorError::NonFinite { .. })) => 4,
        _ => 1,
    }
}

/// Exclusive lock on the run directory, released on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<RunLock, AppError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| AppError::Msg(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(AppError::Msg(format!(
                "run directory is locked by another process ({}); remove the file if stale",
                path.display()
            ))),
            Err(e) => Err(AppError::Msg(format!("cannot lock {}: {e}", path.display()))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn resolve_config(common: &Common) -> Result<TrainConfig, AppError> {
    let mut cfg = if let Some(path) = &common.config {
        TrainConfig::from_file(path)?
    } else {
        let default_path = common.out.join("config.json");
        if default_path.exists() {
            TrainConfig::from_file(&default_path)?
        } else {
            TrainConfig::default()
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Ok(v) = std::env::var("LD_RUN_SEED") {
        cfg.seed = v
            .parse()
            .map_err(|_| AppError::Config(ConfigError::Schema(format!("LD_RUN_SEED is not a u64: {v}"))))?;
    }
    if let Some(sat) = common.sat {
        cfg.sat_enabled = sat;
    }
    if let Some(l) = common.grl_lambda {
        cfg.grl_lambda = l;
    }
    if let Some(p) = common.projection {
        cfg.projection_enabled = p;
    }
    if let Some(b) = common.budget {
        cfg.low_resource_budget = b;
    }
    cfg.validate()?;
    std::fs::write(common.out.join("config.json"), cfg.to_json())
        .map_err(|e| AppError::Msg(format!("cannot write config.json: {e}")))?;
    Ok(cfg)
}

fn dataset_dir(common: &Common) -> PathBuf {
    common.dataset.clone().unwrap_or_else(|| common.out.join("dataset"))
}

fn condition_tags(cfg: &TrainConfig) -> ConditionTags {
    ConditionTags {
        sat_enabled: cfg.sat_enabled,
        projection_enabled: cfg.projection_enabled,
        budget: None,
    }
}

fn stage1_ckpt_path(out: &Path, cfg: &TrainConfig) -> PathBuf {
    out.join("checkpoints").join(format!("stage1_{}.ldck", condition_tags(cfg).slug()))
}

fn stage2_ckpt_path(out: &Path, cfg: &TrainConfig) -> PathBuf {
    out.join("checkpoints").join(format!(
        "stage2_{}_b{}.ldck",
        condition_tags(cfg).slug(),
        cfg.low_resource_budget
    ))
}

fn cmd_datagen(common: &Common) -> Result<(), AppError> {
    let cfg = resolve_config(common)?;
    let dir = dataset_dir(common);
    let manifest = synthdata::build_corpus(&cfg, &dir)?;
    let hash = synthdata::corpus_hash(&dir, &manifest)?;
    let mut run = RunManifest::load_or_default(&common.out);
    run.config = Some(cfg);
    run.corpus_hash = Some(langemb::config::hex(&hash));
    run.save(&common.out)?;
    println!(
        "datagen: {} utterances in {} (hash {})",
        manifest.entries.len(),
        dir.display(),
        run.corpus_hash.as_deref().unwrap()
    );
    Ok(())
}

fn cmd_pretrain(common: &Common) -> Result<(), AppError> {
    let cfg = resolve_config(common)?;
    let data = TrainData::load(&dataset_dir(common))?;
    let ckpt_dir = common.out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| AppError::Msg(e.to_string()))?;
    let ckpt = ckpt_dir.join("encoder.ldck");
    let outcome = training::pretrain_encoder(
        &cfg,
        &data,
        &ckpt,
        &common.out.join("metrics_pretrain.csv"),
    )?;
    println!(
        "pretrain-encoder: accuracy {:.3} after {} steps -> {}",
        outcome.final_accuracy,
        outcome.steps_run,
        ckpt.display()
    );
    let mut run = RunManifest::load_or_default(&common.out);
    run.config = Some(cfg);
    run.pretrain = Some(outcome);
    run.save(&common.out)?;
    Ok(())
}

fn cmd_train(
    common: &Common,
    stage: u32,
    encoder_checkpoint: &Option<PathBuf>,
    stage1_checkpoint: &Option<PathBuf>,
) -> Result<(), AppError> {
    let cfg = resolve_config(common)?;
    let data = TrainData::load(&dataset_dir(common))?;
    let ckpt_dir = common.out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| AppError::Msg(e.to_string()))?;
    let mut run = RunManifest::load_or_default(&common.out);
    match stage {
        1 => {
            let enc = encoder_checkpoint
                .clone()
                .unwrap_or_else(|| ckpt_dir.join("encoder.ldck"));
            let ckpt = stage1_ckpt_path(&common.out, &cfg);
            let outcome =
                training::train_stage1(&cfg, &data, &enc, &ckpt, &common.out.join("metrics.csv"))?;
            println!(
                "train stage 1 [{}]: final l_total {:.4} -> {}",
                condition_tags(&cfg).slug(),
                outcome.final_report.l_total,
                ckpt.display()
            );
            run.stage1 = Some(outcome);
        }
        2 => {
            let s1 = stage1_checkpoint
                .clone()
                .unwrap_or_else(|| stage1_ckpt_path(&common.out, &cfg));
            let ckpt = stage2_ckpt_path(&common.out, &cfg);
            let metrics = common
                .out
                .join(format!("metrics_stage2_b{}.csv", cfg.low_resource_budget));
            let outcome = training::train_stage2(&cfg, &data, &s1, &ckpt, &metrics)?;
            println!(
                "train stage 2 [budget {}]: final l_task {:.4} -> {}",
                cfg.low_resource_budget,
                outcome.final_report.l_task,
                ckpt.display()
            );
            run.stage2 = Some(outcome);
        }
        n => {
            return Err(AppError::Config(ConfigError::Schema(format!(
                "--stage must be 1 or 2, got {n}"
            ))))
        }
    }
    run.config = Some(cfg);
    run.save(&common.out)?;
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Option<PathBuf>) -> Result<(), AppError> {
    let cfg = resolve_config(common)?;
    let data = TrainData::load(&dataset_dir(common))?;
    let tags = condition_tags(&cfg);
    let ckpt = checkpoint
        .clone()
        .unwrap_or_else(|| stage1_ckpt_path(&common.out, &cfg));
    let model = eval::load_condition_model(&cfg, &tags, &ckpt)?;
    let report = eval::evaluate_condition(&model, &data, tags, cfg.seed)?;
    report.save(&common.out.join("eval_report.json"))?;
    eval::emit_plots(&report, &common.out)?;
    println!(
        "eval: TER {:.4}, lang probe {:.3}, spk probe {:.3}, silhouette(h) {:.3}",
        report.token_error_rate,
        report.language_probe_accuracy,
        report.speaker_probe_accuracy,
        report.silhouette_h_by_language
    );

    let s2 = stage2_ckpt_path(&common.out, &cfg);
    if s2.exists() {
        let mut tags2 = condition_tags(&cfg);
        tags2.budget = Some(cfg.low_resource_budget);
        let model2 = eval::load_condition_model(&cfg, &tags2, &s2)?;
        let (ter, per_lang) = eval::evaluate_transfer(&model2, &data, tags2.clone())?;
        let path = common
            .out
            .join(format!("eval_report_transfer_b{}.json", cfg.low_resource_budget));
        let json = serde_json::json!({
            "condition": tags2,
            "unseen_token_error_rate": ter,
            "per_language": per_lang,
        });
        std::fs::write(&path, serde_json::to_string_pretty(&json).unwrap())
            .map_err(|e| AppError::Msg(e.to_string()))?;
        println!("eval: unseen-language TER {ter:.4} (budget {})", cfg.low_resource_budget);
    }
    Ok(())
}

fn cmd_ablation(common: &Common) -> Result<(), AppError> {
    let cfg = resolve_config(common)?;
    let data = TrainData::load(&dataset_dir(common))?;
    let mut conditions = Vec::new();
    for sat in [true, false] {
        for proj in [true, false] {
            let tags = ConditionTags {
                sat_enabled: sat,
                projection_enabled: proj,
                budget: None,
            };
            let path = common
                .out
                .join("checkpoints")
                .join(format!("stage1_{}.ldck", tags.slug()));
            conditions.push((tags, path));
        }
    }
    let reports = eval::run_ablation_grid(&cfg, &data, &conditions, &common.out)?;
    println!("ablation: {} reports, summary at {}", reports.len(), common.out.join("summary.md").display());
    Ok(())
}

fn cmd_plot(out: &Path) -> Result<(), AppError> {
    let mut drawn = 0;
    let entries = std::fs::read_dir(out).map_err(|e| AppError::Msg(e.to_string()))?;
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("eval_report") && name.ends_with(".json") {
            // transfer reports have a different shape and no PCA; skip them
            if let Ok(report) = EvalReport::load(&entry.path()) {
                eval::emit_plots(&report, out)?;
                drawn += 2;
            }
        }
    }
    if drawn == 0 {
        return Err(AppError::Msg(format!(
            "no plottable eval reports found in {}",
            out.display()
        )));
    }
    println!("plot: {drawn} SVGs under {}", out.join("plots").display());
    Ok(())
}

fn run() -> Result<(), AppError> {
    use clap::{CommandFactory, FromArgMatches};
    // --help lists every config key with its default value
    let help = format!(
        "Config keys and their defaults (any subset may appear in --config):\n{}",
        TrainConfig::default().to_json()
    );
    let matches = Cli::command().after_long_help(help).get_matches();
    let cli = Cli::from_arg_matches(&matches)
        .map_err(|e| AppError::Msg(e.to_string()))?;
    match &cli.command {
        Command::Datagen(c) => {
            let _lock = RunLock::acquire(&c.out)?;
            cmd_datagen(c)
        }
        Command::PretrainEncoder(c) => {
            let _lock = RunLock::acquire(&c.out)?;
            cmd_pretrain(c)
        }
        Command::Train {
            common,
            stage,
            encoder_checkpoint,
            stage1_checkpoint,
        } => {
            let _lock = RunLock::acquire(&common.out)?;
            cmd_train(common, *stage, encoder_checkpoint, stage1_checkpoint)
        }
        Command::Eval { common, checkpoint } => {
            let _lock = RunLock::acquire(&common.out)?;
            cmd_eval(common, checkpoint)
        }
        Command::Ablation(c) => {
            let _lock = RunLock::acquire(&c.out)?;
            cmd_ablation(c)
        }
        Command::Plot { out } => {
            let _lock = RunLock::acquire(out)?;
            cmd_plot(out)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
