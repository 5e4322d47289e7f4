use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vlmdet_core::adapt::{train_adaptation, TrainOptions};
use vlmdet_core::data::{kshot_subset, manifest_lines, write_ppm};
use vlmdet_core::eval::{evaluate_families, robustness_sweep, size_ablation};
use vlmdet_core::experiments::{pretrain_from_config, run_meta, splits_from_config};
use vlmdet_core::io::{
    atomic_write, emit_loss_curve, emit_metrics_report, emit_sweep_result, features_csv,
    load_adapted, load_backbone, metrics_csv, save_adapted, save_backbone, ExperimentConfig,
    RunManifest,
};
use vlmdet_core::model::Vocabulary;

#[derive(Parser)]
#[command(
    name = "vlmdet",
    version,
    about = "Toy vision-language dual encoder for real/fake image detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a generated dataset to disk (PPM images, split manifests, vocabulary)
    GenData(GenDataArgs),
    /// Contrastively pre-train a dual encoder on captioned synthetic images
    Pretrain(PretrainArgs),
    /// Train one adaptation strategy on top of a pre-trained backbone
    Adapt(AdaptArgs),
    /// Evaluate an adapted checkpoint on every generator family
    Eval(EvalArgs),
    /// JPEG/blur robustness sweep over the evaluation sets
    Robustness(EvalArgs),
    /// Few-shot adaptation: k real + k fake per category
    Fewshot(FewshotArgs),
    /// Train-size ablation over nested subsets
    Ablate(AblateArgs),
    /// Dump evaluation-set embeddings, one CSV row per image
    ExportFeatures(ExportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file in key=value form (defaults apply for missing keys)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.epochs=5 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand for --set train.seed=...
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $VLMDET_RUN_ROOT/<command>-<seed>)
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn build(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                ExperimentConfig::from_text(&text)?
            }
            None => ExperimentConfig::default(),
        };
        for kv in &self.sets {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got '{kv}'");
            };
            config.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            config.set("train.seed", &seed.to_string())?;
        }
        Ok(config)
    }

    fn out_dir(&self, command: &str, config: &ExperimentConfig) -> Result<PathBuf> {
        let dir = match &self.out_dir {
            Some(d) => d.clone(),
            None => {
                let root =
                    std::env::var("VLMDET_RUN_ROOT").unwrap_or_else(|_| "runs".to_string());
                PathBuf::from(root).join(format!("{command}-{}", config.seed))
            }
        };
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating output dir {}", dir.display()))?;
        Ok(dir)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint output path (default <out-dir>/pretrained.ckpt)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StrategyArgs {
    /// probe | finetune | prompt | adapter
    #[arg(long)]
    strategy: String,
    /// Prompt context length M
    #[arg(long)]
    m: Option<usize>,
    /// Adapter residual blend ratio
    #[arg(long)]
    alpha: Option<f64>,
    /// Adapter bottleneck reduction
    #[arg(long)]
    reduction: Option<usize>,
    /// Learning rate (0 = per-strategy default)
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Blur/JPEG augmentation of training images
    #[arg(long)]
    augment: bool,
}

impl StrategyArgs {
    fn apply(&self, config: &mut ExperimentConfig) -> Result<()> {
        config.set("strategy.kind", &self.strategy)?;
        if let Some(m) = self.m {
            config.set("strategy.m", &m.to_string())?;
        }
        if let Some(alpha) = self.alpha {
            config.set("strategy.alpha", &alpha.to_string())?;
        }
        if let Some(r) = self.reduction {
            config.set("strategy.reduction", &r.to_string())?;
        }
        if let Some(lr) = self.lr {
            config.set("strategy.lr", &lr.to_string())?;
        }
        if let Some(e) = self.epochs {
            config.set("train.epochs", &e.to_string())?;
        }
        if let Some(b) = self.batch {
            config.set("train.batch", &b.to_string())?;
        }
        if self.augment {
            config.set("train.augment", "true")?;
        }
        Ok(())
    }
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Pre-trained backbone checkpoint
    #[arg(long)]
    backbone: PathBuf,
    #[command(flatten)]
    strategy: StrategyArgs,
    /// Checkpoint output path (default <out-dir>/adapted_<strategy>.ckpt)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Adapted checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct FewshotArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    backbone: PathBuf,
    #[command(flatten)]
    strategy: StrategyArgs,
    /// Samples per class per category
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    backbone: PathBuf,
    #[command(flatten)]
    strategy: StrategyArgs,
    /// Comma-separated train sizes (default: paper sizes / data.scale_divisor)
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Any checkpoint; only the backbone weights are used
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output CSV path (default <out-dir>/features.csv)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Entry point shared with tests: returns the process exit code
/// (0 success, 1 usage error, 2 runtime failure).
pub fn run_command(args: &[String]) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Pretrain(args) => pretrain(args),
        Command::Adapt(args) => adapt(args),
        Command::Eval(args) => eval(args),
        Command::Robustness(args) => robustness(args),
        Command::Fewshot(args) => fewshot(args),
        Command::Ablate(args) => ablate(args),
        Command::ExportFeatures(args) => export_features(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let config = args.config.build()?;
    let dir = args.config.out_dir("gen-data", &config)?;
    let mut manifest = RunManifest::new("gen-data", config.digest(), config.seed);
    let splits = splits_from_config(&config)?;
    let side = config.image_side;

    let write_set = |name: &str, keys: &[vlmdet_core::data::SampleKey]| -> Result<PathBuf> {
        let set_dir = dir.join(name);
        std::fs::create_dir_all(&set_dir)?;
        for key in keys {
            let sample = key.generate(side);
            write_ppm(&sample.image, &set_dir.join(format!("{}.ppm", key.source_id())))?;
        }
        let manifest_path = dir.join(format!("{name}.txt"));
        atomic_write(&manifest_path, manifest_lines(keys).as_bytes())?;
        Ok(manifest_path)
    };

    let path = write_set("train", &splits.train)?;
    manifest.add_output(&path)?;
    for (family, keys) in &splits.eval {
        let path = write_set(&format!("eval_{}", family.name()), keys)?;
        manifest.add_output(&path)?;
    }
    let vocab_path = dir.join("vocab.txt");
    atomic_write(&vocab_path, Vocabulary::standard().to_text().as_bytes())?;
    manifest.add_output(&vocab_path)?;
    manifest.finish_and_write(&dir)?;
    println!("dataset written to {}", dir.display());
    Ok(())
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    let config = args.config.build()?;
    let dir = args.config.out_dir("pretrain", &config)?;
    let mut manifest = RunManifest::new("pretrain", config.digest(), config.seed);

    let (model, curve) = pretrain_from_config(&config)?;
    let ckpt = args.out.unwrap_or_else(|| dir.join("pretrained.ckpt"));
    save_backbone(&ckpt, &config, &model)?;
    manifest.add_output(&ckpt)?;
    let curve_path = emit_loss_curve(&curve, &dir, "pretrain_loss")?;
    manifest.add_output(&curve_path)?;
    let vocab_path = dir.join("vocab.txt");
    atomic_write(&vocab_path, model.vocab.to_text().as_bytes())?;
    manifest.add_output(&vocab_path)?;
    manifest.finish_and_write(&dir)?;
    println!(
        "pretrained {} params, final loss {:.4} -> {}",
        model.total_parameters(),
        curve.last().copied().unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(())
}

fn adapt(args: AdaptArgs) -> Result<()> {
    let (loaded_config, backbone) = load_backbone::<f32>(&args.backbone)?;
    let mut config = merge_with_loaded(&args.config, &loaded_config)?;
    args.strategy.apply(&mut config)?;
    let dir = args.config.out_dir("adapt", &config)?;
    let mut manifest = RunManifest::new("adapt", config.digest(), config.seed);

    let Some(spec) = config.strategy_spec()? else {
        bail!("adapt requires --strategy");
    };
    let splits = splits_from_config(&config)?;
    let opts = train_options(&config);
    let (model, curve) = train_adaptation(backbone, spec, &splits.train, &opts)?;

    let ckpt = args
        .out
        .unwrap_or_else(|| dir.join(format!("adapted_{}.ckpt", spec.kind_name())));
    save_adapted(&ckpt, &config, &model)?;
    manifest.add_output(&ckpt)?;
    let curve_path = emit_loss_curve(&curve, &dir, "adapt_loss")?;
    manifest.add_output(&curve_path)?;
    manifest.finish_and_write(&dir)?;
    println!(
        "trained {} ({} trainable params), final loss {:.4} -> {}",
        spec.kind_name(),
        model.runtime_trainable_count(),
        curve.last().copied().unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let (loaded_config, model) = load_adapted::<f32>(&args.checkpoint)?;
    let config = merge_with_loaded(&args.config, &loaded_config)?;
    let dir = args.config.out_dir("eval", &config)?;
    let mut manifest = RunManifest::new("eval", config.digest(), config.seed);

    let splits = splits_from_config(&config)?;
    let report = evaluate_families(&model, &splits.eval, run_meta(&config, model.spec.kind_name()))?;
    for path in emit_metrics_report(&report, &dir, "metrics")? {
        manifest.add_output(&path)?;
    }
    manifest.finish_and_write(&dir)?;
    print!("{}", metrics_csv(&report));
    Ok(())
}

fn robustness(args: EvalArgs) -> Result<()> {
    let (loaded_config, model) = load_adapted::<f32>(&args.checkpoint)?;
    let config = merge_with_loaded(&args.config, &loaded_config)?;
    let dir = args.config.out_dir("robustness", &config)?;
    let mut manifest = RunManifest::new("robustness", config.digest(), config.seed);

    let splits = splits_from_config(&config)?;
    let sweep = robustness_sweep(
        &model,
        &splits.eval,
        &config.qualities,
        &config.sigmas,
        run_meta(&config, model.spec.kind_name()),
    );
    for path in emit_sweep_result(&sweep, &dir, "robustness")? {
        manifest.add_output(&path)?;
    }
    manifest.finish_and_write(&dir)?;
    println!(
        "robustness sweep: {} cells -> {}",
        sweep.cells.len(),
        dir.display()
    );
    Ok(())
}

fn fewshot(args: FewshotArgs) -> Result<()> {
    let (loaded_config, backbone) = load_backbone::<f32>(&args.backbone)?;
    let mut config = merge_with_loaded(&args.config, &loaded_config)?;
    args.strategy.apply(&mut config)?;
    if let Some(k) = args.k {
        config.set("eval.kshot", &k.to_string())?;
    }
    let dir = args.config.out_dir("fewshot", &config)?;
    let mut manifest = RunManifest::new("fewshot", config.digest(), config.seed);

    let Some(spec) = config.strategy_spec()? else {
        bail!("fewshot requires --strategy");
    };
    let splits = splits_from_config(&config)?;
    let subset = kshot_subset(&splits.train, config.kshot, config.seed)?;
    let opts = train_options(&config);
    let (model, curve) = train_adaptation(backbone, spec, &subset, &opts)?;
    let report = evaluate_families(
        &model,
        &splits.eval,
        run_meta(&config, &format!("{}-{}shot", spec.kind_name(), config.kshot)),
    )?;
    for path in emit_metrics_report(&report, &dir, "fewshot_metrics")? {
        manifest.add_output(&path)?;
    }
    let curve_path = emit_loss_curve(&curve, &dir, "fewshot_loss")?;
    manifest.add_output(&curve_path)?;
    manifest.finish_and_write(&dir)?;
    println!(
        "few-shot {} on {} samples (k={})",
        spec.kind_name(),
        subset.len(),
        config.kshot
    );
    print!("{}", metrics_csv(&report));
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let (loaded_config, backbone) = load_backbone::<f32>(&args.backbone)?;
    let mut config = merge_with_loaded(&args.config, &loaded_config)?;
    args.strategy.apply(&mut config)?;
    let dir = args.config.out_dir("ablate", &config)?;
    let mut manifest = RunManifest::new("ablate", config.digest(), config.seed);

    let Some(spec) = config.strategy_spec()? else {
        bail!("ablate requires --strategy");
    };
    let sizes = if args.sizes.is_empty() {
        config.ablation_sizes()
    } else {
        args.sizes.clone()
    };
    let opts = train_options(&config);
    let reports = size_ablation(
        &backbone,
        spec,
        &sizes,
        config.eval_size,
        config.categories,
        config.seed,
        &opts,
        &run_meta(&config, spec.kind_name()),
    )?;

    let mut summary = String::from("size,map,mean_acc\n");
    for (size, report) in &reports {
        for path in emit_metrics_report(report, &dir, &format!("metrics_{size}"))? {
            manifest.add_output(&path)?;
        }
        summary.push_str(&format!(
            "{size},{:.2},{:.2}\n",
            report.map * 100.0,
            report.mean_acc * 100.0
        ));
    }
    let summary_path = dir.join("ablation_summary.csv");
    atomic_write(&summary_path, summary.as_bytes())?;
    manifest.add_output(&summary_path)?;
    manifest.finish_and_write(&dir)?;
    print!("{summary}");
    Ok(())
}

fn export_features(args: ExportArgs) -> Result<()> {
    let (loaded_config, backbone) = load_backbone::<f32>(&args.checkpoint)?;
    let config = merge_with_loaded(&args.config, &loaded_config)?;
    let dir = args.config.out_dir("export-features", &config)?;
    let mut manifest = RunManifest::new("export-features", config.digest(), config.seed);

    let splits = splits_from_config(&config)?;
    let mut rows = Vec::new();
    for (_, keys) in &splits.eval {
        for key in keys {
            let sample = key.generate(config.image_side);
            let emb = backbone.embed_image(&sample.image)?.image_emb;
            rows.push((key.source_id(), key.label(), key.family.name().to_string(), emb));
        }
    }
    let out = args.out.unwrap_or_else(|| dir.join("features.csv"));
    atomic_write(&out, features_csv(&rows).as_bytes())?;
    manifest.add_output(&out)?;
    manifest.finish_and_write(&dir)?;
    println!("{} feature rows -> {}", rows.len(), out.display());
    Ok(())
}

fn train_options(config: &ExperimentConfig) -> TrainOptions {
    TrainOptions {
        epochs: config.epochs,
        batch: config.batch,
        seed: config.seed,
        lr: config.lr_override(),
        augment: config.augment,
    }
}

/// Start from the checkpoint's embedded config, apply CLI overrides, and
/// refuse overrides that would desynchronize the model shape from the
/// stored weights.
fn merge_with_loaded(
    args: &ConfigArgs,
    loaded: &ExperimentConfig,
) -> Result<ExperimentConfig> {
    let mut config = loaded.clone();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        config = ExperimentConfig::from_text(&text)?;
    }
    for kv in &args.sets {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got '{kv}'");
        };
        config.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        config.set("train.seed", &seed.to_string())?;
    }
    if config.encoder_config() != loaded.encoder_config() {
        bail!("model.* keys are fixed by the checkpoint (requested {:?}, stored {:?})",
            config.encoder_config(), loaded.encoder_config());
    }
    Ok(config)
}
