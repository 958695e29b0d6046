//! Subcommand implementations behind the `anoclass` binary. Every command
//! layers explicit flags over the optional `--config` TOML file.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::backbone::{
    extract_feature_map, load_backbone, read_feature_map, write_feature_map, FeatureSidecar,
    ImageTensor,
};
use crate::bank::{BankSidecar, MemoryBank};
use crate::config::{ExperimentConfig, ModelKind};
use crate::contrastive::{self, EmbeddingNet};
use crate::error::{Error, Result};
use crate::features::FileFeatures;
use crate::harness::{self, DatasetSpec, FeatureLayout};
use crate::relation::{self, RelationHead};
use crate::synth::{self, MaskKind, NormalImage};

#[derive(Debug, Parser)]
#[command(
    name = "anoclass",
    about = "Few-shot anomaly multi-classification pipeline",
    version
)]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed override (bank construction, episode sampling).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output path override for the active subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract patch feature maps for a dataset category.
    Extract(ExtractArgs),
    /// Build the coreset memory bank from extracted features.
    BuildBank(BuildBankArgs),
    /// Generate the pseudo-class defect set.
    GenDefects(GenDefectsArgs),
    /// Pretrain a classifier on the generated pseudo-classes.
    Pretrain(PretrainArgs),
    /// Fine-tune a classifier on the real support shots.
    Finetune(FinetuneArgs),
    /// Run the full episodic evaluation for one category.
    Evaluate(EvaluateArgs),
    /// Emit before/after t-SNE scatters for one category.
    Tsne(TsneArgs),
    /// Aggregate persisted result rows into markdown + CSV tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Dataset root containing the category directories.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub category: Option<String>,
    /// Which split to extract: train or test.
    #[arg(long)]
    pub split: String,
    /// Backbone weights archive (.anoc).
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Dataset layout: mvtec_ad or mvtec3d_ad.
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Debug, Args)]
pub struct BuildBankArgs {
    /// Directory of .anof files (or a category root with train/good below).
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub p: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenDefectsArgs {
    /// Directory of normal images to paste defects onto.
    #[arg(long)]
    pub normals: PathBuf,
    /// Texture dataset root (category subdirectories).
    #[arg(long)]
    pub dtd: PathBuf,
    /// Mask kind: poisson or polygon.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub per_class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Model to pretrain: contrastive or vanilla.
    #[arg(long)]
    pub model: Option<String>,
    /// Generated defect set directory (from gen-defects).
    #[arg(long)]
    pub synth: PathBuf,
    /// Memory bank file; built from --features when absent.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Feature directory for bank construction (train-good .anof files).
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Meta-train with two disjoint class batches per iteration.
    #[arg(long)]
    pub maml: bool,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Model to fine-tune: contrastive or vanilla.
    #[arg(long)]
    pub model: Option<String>,
    /// Starting checkpoint; fresh parameters when absent.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub shots: Option<usize>,
    /// Extracted feature root (the directory passed to extract --out).
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub category: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub category: Option<String>,
    #[arg(long)]
    pub shots: Option<usize>,
    /// Model: contrastive, vanilla or direct.
    #[arg(long)]
    pub model: Option<String>,
    /// Comma-separated seed list, e.g. 1,2,3,4,5.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub use_residual: Option<bool>,
    #[arg(long)]
    pub pretrain: Option<bool>,
    #[arg(long)]
    pub include_good: Option<bool>,
}

#[derive(Debug, Args)]
pub struct TsneArgs {
    #[arg(long)]
    pub category: Option<String>,
    /// Embedding checkpoint for the "after" plot.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub perplexity: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Results directory containing the rows/ subdirectory.
    #[arg(long)]
    pub results: Option<PathBuf>,
}

fn base_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.protocol.seeds = vec![seed];
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Extract(args) => cmd_extract(&cli, args),
        Command::BuildBank(args) => cmd_build_bank(&cli, args),
        Command::GenDefects(args) => cmd_gen_defects(&cli, args),
        Command::Pretrain(args) => cmd_pretrain(&cli, args),
        Command::Finetune(args) => cmd_finetune(&cli, args),
        Command::Evaluate(args) => cmd_evaluate(&cli, args),
        Command::Tsne(args) => cmd_tsne(&cli, args),
        Command::Report(args) => cmd_report(&cli, args),
    }
}

fn cmd_extract(cli: &Cli, args: &ExtractArgs) -> Result<()> {
    let mut cfg = base_config(cli)?;
    if let Some(root) = &args.data_root {
        cfg.data.root = root.clone();
    }
    if let Some(cat) = &args.category {
        cfg.data.category = cat.clone();
    }
    if let Some(ds) = &args.dataset {
        cfg.data.dataset = ds.parse()?;
    }
    if let Some(b) = &args.backbone {
        cfg.backbone.weights = b.clone();
    }
    if let Some(s) = args.input_size {
        cfg.backbone.input_size = s;
    }
    let out_root = cli.out.clone().unwrap_or_else(|| cfg.paths.features.clone());

    let spec = DatasetSpec::from_config(&cfg)?;
    let splits = harness::ingest(&spec)?;
    let handle = load_backbone(&cfg.backbone.weights)?;

    let mut jobs: Vec<(PathBuf, PathBuf)> = Vec::new();
    let out_cat = out_root.join(&cfg.data.category);
    match args.split.as_str() {
        "train" => {
            for img in &splits.train_good {
                jobs.push((img.clone(), feature_out(&out_cat, "train", "good", img)?));
            }
        }
        "test" => {
            for (class, files) in splits.test_by_class.iter().enumerate() {
                let name = &splits.defect_types[class];
                for img in files {
                    jobs.push((img.clone(), feature_out(&out_cat, "test", name, img)?));
                }
            }
            for img in &splits.test_good {
                jobs.push((img.clone(), feature_out(&out_cat, "test", "good", img)?));
            }
        }
        other => {
            return Err(Error::Argument(format!(
                "split must be train or test, got {other:?}"
            )))
        }
    }

    let input_size = cfg.backbone.input_size;
    let done: usize = jobs
        .par_iter()
        .map(|(img, out)| -> Result<usize> {
            if out.exists() {
                return Ok(0);
            }
            let tensor = extract_feature_map(
                &handle,
                &ImageTensor::open(img)?,
                input_size,
                &img.to_string_lossy(),
            )?;
            let sidecar =
                FeatureSidecar::new(&img.to_string_lossy(), handle.id(), input_size);
            write_feature_map(out, &tensor, &sidecar)?;
            Ok(1)
        })
        .collect::<Result<Vec<usize>>>()?
        .iter()
        .sum();
    println!(
        "extracted {done} of {} images into {}",
        jobs.len(),
        out_cat.display()
    );
    Ok(())
}

fn feature_out(out_cat: &Path, split: &str, class: &str, img: &Path) -> Result<PathBuf> {
    let stem = img
        .file_stem()
        .ok_or_else(|| Error::Argument(format!("no file stem in {}", img.display())))?;
    let dir = out_cat.join(split).join(class);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir.join(format!("{}.anof", stem.to_string_lossy())))
}

fn anof_files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let direct: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("anof"))
        .collect();
    let mut files = if direct.is_empty() {
        let nested = dir.join("train").join("good");
        if !nested.is_dir() {
            return Err(Error::Argument(format!(
                "no .anof files in {} and no train/good below it",
                dir.display()
            )));
        }
        std::fs::read_dir(&nested)
            .map_err(|e| Error::io(&nested, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("anof"))
            .collect()
    } else {
        direct
    };
    files.sort();
    Ok(files)
}

fn cmd_build_bank(cli: &Cli, args: &BuildBankArgs) -> Result<()> {
    let cfg = base_config(cli)?;
    let p = args.p.unwrap_or(cfg.bank.p);
    let seed = cli.seed.unwrap_or(1);
    let out = cli
        .out
        .clone()
        .ok_or_else(|| Error::Argument("--out <bank.anob> is required".into()))?;

    let files = anof_files_under(&args.features)?;
    if files.is_empty() {
        return Err(Error::Argument(format!(
            "no feature files under {}",
            args.features.display()
        )));
    }
    let maps = files
        .iter()
        .map(|f| read_feature_map(f))
        .collect::<Result<Vec<_>>>()?;
    let bank = MemoryBank::build(&maps, p, seed)?;
    let sidecar = BankSidecar {
        source_feature_files: files.iter().map(|f| f.to_string_lossy().into_owned()).collect(),
        source_count: bank.source_count(),
        p,
        seed,
    };
    bank.write(&out, &sidecar)?;
    println!(
        "bank: {} vectors of dim {} from {} source patches (p={p}, seed={seed}) -> {}",
        bank.len(),
        bank.dim(),
        bank.source_count(),
        out.display()
    );
    Ok(())
}

fn cmd_gen_defects(cli: &Cli, args: &GenDefectsArgs) -> Result<()> {
    let cfg = base_config(cli)?;
    let kind: MaskKind = match &args.kind {
        Some(k) => k.parse()?,
        None => cfg.protocol.gen_kind,
    };
    let per_class = args.per_class.unwrap_or(cfg.synth.per_class);
    let seed = cli.seed.unwrap_or(1);
    let out = cli.out.clone().unwrap_or_else(|| cfg.paths.synth.clone());

    let mut normal_files: Vec<PathBuf> = std::fs::read_dir(&args.normals)
        .map_err(|e| Error::io(&args.normals, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_lowercase),
                    Some(ref ext) if ["png", "jpg", "jpeg", "bmp"].contains(&ext.as_str())
                )
        })
        .collect();
    normal_files.sort();
    let normals = normal_files
        .iter()
        .map(|f| {
            Ok(NormalImage {
                id: f
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                image: ImageTensor::open(f)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let textures = synth::load_textures(&args.dtd)?;
    let items = synth::generate_pretrain_set(
        &normals,
        &textures,
        kind,
        per_class,
        seed,
        &cfg.synth.to_synth_config(),
    )?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let manifest = synth::write_synthetic_set(&out, &items)?;
    println!(
        "generated {} defect images across {} pseudo-classes -> {}",
        manifest.len(),
        synth::class_count(kind),
        out.display()
    );
    Ok(())
}

fn bank_from_args(
    cfg: &ExperimentConfig,
    bank: &Option<PathBuf>,
    features: &Option<PathBuf>,
    seed: u64,
) -> Result<MemoryBank> {
    if let Some(path) = bank {
        return MemoryBank::read(path);
    }
    let features = features.as_ref().ok_or_else(|| {
        Error::Argument("either --bank or --features is required".into())
    })?;
    let files = anof_files_under(features)?;
    let maps = files
        .iter()
        .map(|f| read_feature_map(f))
        .collect::<Result<Vec<_>>>()?;
    MemoryBank::build(&maps, cfg.bank.p, seed)
}

fn cmd_pretrain(cli: &Cli, args: &PretrainArgs) -> Result<()> {
    let mut cfg = base_config(cli)?;
    if let Some(b) = &args.backbone {
        cfg.backbone.weights = b.clone();
    }
    cfg.paths.synth = args.synth.clone();
    let model: ModelKind = match &args.model {
        Some(m) => m.parse()?,
        None => cfg.protocol.model,
    };
    let seed = cli.seed.unwrap_or(1);
    let out = cli
        .out
        .clone()
        .ok_or_else(|| Error::Argument("--out <checkpoint> is required".into()))?;

    let handle = load_backbone(&cfg.backbone.weights)?;
    let entries = harness::extract_synth_features(&cfg, &handle)?;
    let bank = bank_from_args(&cfg, &args.bank, &args.features, seed)?;
    let bank_opt = cfg.protocol.use_residual.then_some(&bank);
    let cache_dir = args.synth.join("residual_cache").join(format!("seed{seed}"));
    let source = FileFeatures::new(entries.clone(), bank_opt, Some(cache_dir))?;
    let feature_dim = read_feature_map(&entries[0].0)?.feature_dim();

    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }

    match model {
        ModelKind::Contrastive => {
            let mut net = EmbeddingNet::new(crate::contrastive::EmbeddingConfig {
                in_channels: feature_dim,
                block_channels: cfg.train.embed_channels.clone(),
                embed_dim: cfg.train.embed_dim,
                temperature: cfg.train.temperature,
                param_seed: cfg.train.param_seed,
            });
            let log = if args.maml {
                contrastive::maml_train(
                    &mut net,
                    &source,
                    &contrastive::MamlConfig {
                        inner_lr: cfg.train.maml_inner_lr,
                        outer_lr: cfg.train.maml_outer_lr,
                        episode_classes: cfg.train.pretrain_classes,
                        episode_shots: cfg.train.pretrain_shots,
                        accuracy_threshold: cfg.train.pretrain_threshold,
                        max_iterations: cfg.train.pretrain_max_iters,
                        seed,
                    },
                )?
            } else {
                contrastive::pretrain(
                    &mut net,
                    &source,
                    &contrastive::ContrastivePretrainConfig {
                        lr: cfg.train.lr,
                        episode_classes: cfg.train.pretrain_classes,
                        episode_shots: cfg.train.pretrain_shots,
                        accuracy_threshold: cfg.train.pretrain_threshold,
                        max_iterations: cfg.train.pretrain_max_iters,
                        seed,
                    },
                )?
            };
            net.save(&out)?;
            println!(
                "pretrained contrastive net: {} episodes, stopped early: {} -> {}",
                log.episode_accuracies.len(),
                log.stopped_early,
                out.display()
            );
        }
        ModelKind::Vanilla => {
            if args.maml {
                return Err(Error::Argument(
                    "--maml applies to the contrastive model only".into(),
                ));
            }
            let mut head = RelationHead::new(crate::relation::RelationConfig {
                in_channels: 2 * feature_dim,
                block_channels: cfg.train.relation_channels.clone(),
                hidden: cfg.train.relation_hidden,
                param_seed: cfg.train.param_seed,
            });
            let log = relation::pretrain_vanilla(
                &mut head,
                &source,
                &relation::PretrainConfig {
                    lr: cfg.train.lr,
                    episode_classes: cfg.train.pretrain_classes,
                    accuracy_threshold: cfg.train.pretrain_threshold,
                    max_iterations: cfg.train.pretrain_max_iters,
                    seed,
                },
            )?;
            head.save(&out)?;
            println!(
                "pretrained vanilla head: {} episodes, stopped early: {} -> {}",
                log.episode_accuracies.len(),
                log.stopped_early,
                out.display()
            );
        }
        ModelKind::Direct => {
            return Err(Error::Argument(
                "the direct baseline has no pretraining stage".into(),
            ))
        }
    }
    Ok(())
}

fn support_features(
    cfg: &ExperimentConfig,
    features_root: &Path,
    category: &str,
    shots: usize,
    bank: &MemoryBank,
) -> Result<Vec<(ndarray::Array3<f32>, usize)>> {
    let layout = FeatureLayout::new(features_root, category);
    let (names, by_class, _) = layout.test_classes()?;
    let selection = harness::select_shots(&by_class, &names, shots)?;
    let mut support = Vec::new();
    for (class, files) in selection.support.iter().enumerate() {
        for f in files {
            let map = read_feature_map(f)?;
            let tensor = if cfg.protocol.use_residual {
                bank.residual_map(&map)?.to_feature_tensor()
            } else {
                map.to_feature_tensor()
            };
            support.push((tensor, class));
        }
    }
    Ok(support)
}

fn cmd_finetune(cli: &Cli, args: &FinetuneArgs) -> Result<()> {
    let cfg = base_config(cli)?;
    let model: ModelKind = match &args.model {
        Some(m) => m.parse()?,
        None => cfg.protocol.model,
    };
    let shots = args.shots.unwrap_or(cfg.protocol.shots);
    let seed = cli.seed.unwrap_or(1);
    let features_root = args
        .features
        .clone()
        .unwrap_or_else(|| cfg.paths.features.clone());
    let category = args
        .category
        .clone()
        .unwrap_or_else(|| cfg.data.category.clone());
    if category.is_empty() {
        return Err(Error::Argument("--category is required".into()));
    }
    let out = cli
        .out
        .clone()
        .ok_or_else(|| Error::Argument("--out <checkpoint> is required".into()))?;

    let layout = FeatureLayout::new(&features_root, &category);
    let bank = harness::bank_for_seed(&cfg, &layout, seed)?;
    let support = support_features(&cfg, &features_root, &category, shots, &bank)?;
    let feature_dim = support[0].0.dim().0;

    match model {
        ModelKind::Contrastive => {
            let mut net = match &args.ckpt {
                Some(p) => EmbeddingNet::load(p)?,
                None => EmbeddingNet::new(crate::contrastive::EmbeddingConfig {
                    in_channels: feature_dim,
                    block_channels: cfg.train.embed_channels.clone(),
                    embed_dim: cfg.train.embed_dim,
                    temperature: cfg.train.temperature,
                    param_seed: cfg.train.param_seed,
                }),
            };
            let log = contrastive::finetune(
                &mut net,
                &support,
                shots,
                &contrastive::FinetuneConfig {
                    lr: cfg.train.lr,
                    epochs_override: None,
                },
            )?;
            net.save(&out)?;
            if log.skipped_one_shot {
                println!("one-shot: fine-tuning skipped, checkpoint copied -> {}", out.display());
            } else {
                println!(
                    "fine-tuned contrastive net: {} epochs, {} steps -> {}",
                    log.epochs,
                    log.iterations,
                    out.display()
                );
            }
        }
        ModelKind::Vanilla => {
            let mut head = match &args.ckpt {
                Some(p) => RelationHead::load(p)?,
                None => RelationHead::new(crate::relation::RelationConfig {
                    in_channels: 2 * feature_dim,
                    block_channels: cfg.train.relation_channels.clone(),
                    hidden: cfg.train.relation_hidden,
                    param_seed: cfg.train.param_seed,
                }),
            };
            let log = relation::train_vanilla(
                &mut head,
                &support,
                &relation::VanillaTrainConfig {
                    lr: cfg.train.lr,
                    epochs: cfg.train.vanilla_epochs,
                },
            )?;
            head.save(&out)?;
            println!(
                "fine-tuned vanilla head: {} epochs, final accuracy {:.3} -> {}",
                log.epoch_accuracies.len(),
                log.epoch_accuracies.last().copied().unwrap_or(0.0),
                out.display()
            );
        }
        ModelKind::Direct => {
            return Err(Error::Argument(
                "the direct baseline is trained inside evaluate".into(),
            ))
        }
    }
    Ok(())
}

fn cmd_evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<()> {
    let mut cfg = base_config(cli)?;
    if let Some(cat) = &args.category {
        cfg.data.category = cat.clone();
    }
    if let Some(shots) = args.shots {
        cfg.protocol.shots = shots;
    }
    if let Some(m) = &args.model {
        cfg.protocol.model = m.parse()?;
    }
    if let Some(seeds) = &args.seeds {
        cfg.protocol.seeds = seeds
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|e| Error::Argument(format!("bad seed {s:?}: {e}")))
            })
            .collect::<Result<Vec<u64>>>()?;
    }
    if let Some(v) = args.use_residual {
        cfg.protocol.use_residual = v;
    }
    if let Some(v) = args.pretrain {
        cfg.protocol.pretrain = v;
    }
    if let Some(v) = args.include_good {
        cfg.protocol.include_good = v;
    }
    if let Some(out) = &cli.out {
        cfg.paths.results = out.clone();
    }
    if cfg.data.category.is_empty() {
        return Err(Error::Argument("--category is required".into()));
    }

    let row = harness::run_experiment(&cfg)?;
    println!(
        "{} {}-shot ({:?}): {} over seeds {:?}",
        row.category,
        row.shot,
        row.model,
        row.formatted(),
        row.seeds
    );
    Ok(())
}

fn cmd_tsne(cli: &Cli, args: &TsneArgs) -> Result<()> {
    let mut cfg = base_config(cli)?;
    if let Some(cat) = &args.category {
        cfg.data.category = cat.clone();
    }
    if let Some(p) = args.perplexity {
        cfg.tsne.perplexity = p;
    }
    if cfg.data.category.is_empty() {
        return Err(Error::Argument("--category is required".into()));
    }
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.results.join("tsne").join(&cfg.data.category));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let seed = cli.seed.unwrap_or(1);

    let layout = FeatureLayout::new(&cfg.paths.features, &cfg.data.category);
    let bank = harness::bank_for_seed(&cfg, &layout, seed)?;
    let (names, by_class, _) = layout.test_classes()?;
    let _ = names;

    // "before": flattened residual maps; "after": checkpoint embeddings
    let mut before: Vec<(Vec<f32>, usize)> = Vec::new();
    let mut tensors: Vec<(ndarray::Array3<f32>, usize)> = Vec::new();
    for (class, files) in by_class.iter().enumerate() {
        for f in files {
            let map = read_feature_map(f)?;
            let tensor = if cfg.protocol.use_residual {
                bank.residual_map(&map)?.to_feature_tensor()
            } else {
                map.to_feature_tensor()
            };
            before.push((tensor.iter().copied().collect(), class));
            tensors.push((tensor, class));
        }
    }

    harness::tsne_emit(
        &before,
        &out.join("before.csv"),
        &out.join("before.png"),
        cfg.tsne.perplexity,
        cfg.tsne.iterations,
        seed,
    )?;

    if let Some(ckpt) = &args.ckpt {
        let net = EmbeddingNet::load(ckpt)?;
        let after: Vec<(Vec<f32>, usize)> = tensors
            .iter()
            .map(|(t, class)| -> Result<(Vec<f32>, usize)> {
                let e = contrastive::embed(&net, t)?;
                Ok((e.iter().map(|&v| v as f32).collect(), *class))
            })
            .collect::<Result<_>>()?;
        harness::tsne_emit(
            &after,
            &out.join("after.csv"),
            &out.join("after.png"),
            cfg.tsne.perplexity,
            cfg.tsne.iterations,
            seed,
        )?;
        println!("t-SNE written to {} (before + after)", out.display());
    } else {
        println!(
            "t-SNE written to {} (before only; pass --ckpt for the after plot)",
            out.display()
        );
    }
    Ok(())
}

fn cmd_report(cli: &Cli, args: &ReportArgs) -> Result<()> {
    let cfg = base_config(cli)?;
    let results = args
        .results
        .clone()
        .unwrap_or_else(|| cfg.paths.results.clone());
    let out = cli.out.clone().unwrap_or_else(|| results.join("report"));
    let rows = harness::load_rows(&results)?;
    let (md, csv) = harness::report(&rows, &out)?;
    println!("report written: {} and {}", md.display(), csv.display());
    Ok(())
}
