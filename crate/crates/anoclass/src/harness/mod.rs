//! Dataset ingestion, shot selection, experiment orchestration, the direct
//! fine-tuning baseline, and report generation.
//!
//! Evaluation runs one cell per (category, shot, seed): build the seeded
//! memory bank from the normal features, residualize support and query
//! features, train the configured model on the support set, classify every
//! query once, and persist the cell immediately so long runs are resumable.

pub mod tsne;

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    extract_feature_map, load_backbone, read_feature_map, BackboneHandle, ImageTensor,
};
use crate::bank::{BankSidecar, MemoryBank};
use crate::config::{DatasetKind, ExperimentConfig, ModelKind};
use crate::contrastive::{self, EmbeddingConfig, EmbeddingNet};
use crate::error::{Error, Result};
use crate::features::FileFeatures;
use crate::nn::{Adam, Linear, Param};
use crate::relation::{self, RelationConfig, RelationHead};

pub use tsne::{tsne, tsne_emit};

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

/// Where a dataset category lives and which layout it follows.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub dataset: DatasetKind,
    pub category: String,
}

impl DatasetSpec {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(DatasetSpec {
            root: cfg.data_root()?,
            dataset: cfg.data.dataset,
            category: cfg.data.category.clone(),
        })
    }

    pub fn category_dir(&self) -> PathBuf {
        self.root.join(&self.category)
    }

    /// The 3-D dataset nests images one level deeper under `rgb/`.
    fn image_dir(&self, split_class: &Path) -> PathBuf {
        match self.dataset {
            DatasetKind::MvtecAd => split_class.to_path_buf(),
            DatasetKind::Mvtec3dAd => split_class.join("rgb"),
        }
    }
}

/// Ingested file lists for one category.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train_good: Vec<PathBuf>,
    /// Defect type names in alphabetical order; index = class id.
    pub defect_types: Vec<String>,
    pub test_by_class: Vec<Vec<PathBuf>>,
    /// Good test images (only used when the good class is included).
    pub test_good: Vec<PathBuf>,
}

fn sorted_files_with_ext(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| exts.contains(&e.to_lowercase().as_str()))
                    .unwrap_or(false)
        })
        .collect();
    files.sort_by_key(|p| p.file_name().map(|n| n.to_os_string()));
    Ok(files)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut dirs: Vec<(String, PathBuf)> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .filter_map(|p| {
            p.file_name()
                .map(|n| (n.to_string_lossy().into_owned(), p.clone()))
        })
        .collect();
    dirs.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(dirs)
}

/// Enumerates the train/good and test/<defect_type> file lists.
///
/// Defect types are assigned class ids in alphabetical order; a category
/// with fewer than two defect types is excluded from the task.
pub fn ingest(spec: &DatasetSpec) -> Result<Splits> {
    let cat = spec.category_dir();
    if !cat.is_dir() {
        return Err(Error::Ingestion(format!(
            "category directory {} does not exist",
            cat.display()
        )));
    }
    let train_dir = spec.image_dir(&cat.join("train").join("good"));
    if !train_dir.is_dir() {
        return Err(Error::Ingestion(format!(
            "missing train/good directory {}",
            train_dir.display()
        )));
    }
    let train_good = sorted_files_with_ext(&train_dir, &IMAGE_EXTENSIONS)?;

    let test_dir = cat.join("test");
    if !test_dir.is_dir() {
        return Err(Error::Ingestion(format!(
            "missing test directory {}",
            test_dir.display()
        )));
    }
    let mut defect_types = Vec::new();
    let mut test_by_class = Vec::new();
    let mut test_good = Vec::new();
    for (name, dir) in sorted_subdirs(&test_dir)? {
        let files = sorted_files_with_ext(&spec.image_dir(&dir), &IMAGE_EXTENSIONS)?;
        if name == "good" {
            test_good = files;
        } else {
            defect_types.push(name);
            test_by_class.push(files);
        }
    }
    if defect_types.len() < 2 {
        return Err(Error::ExcludedCategory {
            category: spec.category.clone(),
            defect_types: defect_types.len(),
        });
    }
    Ok(Splits {
        train_good,
        defect_types,
        test_by_class,
        test_good,
    })
}

/// Support/query split: first `n` files per class (lexicographic) are
/// support, the rest are queries.
#[derive(Debug, Clone)]
pub struct ShotSelection {
    pub support: Vec<Vec<PathBuf>>,
    pub query: Vec<Vec<PathBuf>>,
}

pub fn select_shots(
    test_by_class: &[Vec<PathBuf>],
    class_names: &[String],
    n: usize,
) -> Result<ShotSelection> {
    let mut support = Vec::with_capacity(test_by_class.len());
    let mut query = Vec::with_capacity(test_by_class.len());
    for (class, files) in test_by_class.iter().enumerate() {
        if files.len() <= n {
            let name = class_names
                .get(class)
                .map(String::as_str)
                .unwrap_or("<unnamed>");
            return Err(Error::Protocol(format!(
                "class {name} has {} image(s), needs more than {n} for {n}-shot",
                files.len()
            )));
        }
        support.push(files[..n].to_vec());
        query.push(files[n..].to_vec());
    }
    Ok(ShotSelection { support, query })
}

/// Arithmetic mean.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n-1 denominator); zero for a single value.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64;
    var.sqrt()
}

/// "50.00 ± 7.07" from percent values.
pub fn format_mean_std(mean_pct: f64, std_pct: f64) -> String {
    format!("{mean_pct:.2} \u{b1} {std_pct:.2}")
}

/// One evaluated (category, shot, seed) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedCell {
    pub category: String,
    pub shot: usize,
    pub seed: u64,
    pub model: ModelKind,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub config_hash: String,
}

/// One results-table row: accuracy over seeds for a (category, shot).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub category: String,
    pub shot: usize,
    pub model: ModelKind,
    pub mean_pct: f64,
    pub std_pct: f64,
    pub seeds: Vec<u64>,
    pub per_seed_accuracy: Vec<f64>,
    pub single_seed: bool,
    pub config_hash: String,
}

impl ResultRow {
    pub fn from_cells(cells: &[SeedCell]) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::Argument("no cells to aggregate".into()));
        }
        let accs: Vec<f64> = cells.iter().map(|c| c.accuracy).collect();
        let pcts: Vec<f64> = accs.iter().map(|a| a * 100.0).collect();
        Ok(ResultRow {
            category: cells[0].category.clone(),
            shot: cells[0].shot,
            model: cells[0].model,
            mean_pct: mean(&pcts),
            std_pct: sample_std(&pcts),
            seeds: cells.iter().map(|c| c.seed).collect(),
            per_seed_accuracy: accs,
            single_seed: cells.len() == 1,
            config_hash: cells[0].config_hash.clone(),
        })
    }

    pub fn formatted(&self) -> String {
        format_mean_std(self.mean_pct, self.std_pct)
    }
}

/// Mirror of the dataset layout holding `.anof` feature files.
pub struct FeatureLayout {
    pub category_root: PathBuf,
}

impl FeatureLayout {
    pub fn new(features_root: &Path, category: &str) -> Self {
        FeatureLayout {
            category_root: features_root.join(category),
        }
    }

    pub fn train_good(&self) -> Result<Vec<PathBuf>> {
        let dir = self.category_root.join("train").join("good");
        if !dir.is_dir() {
            return Err(Error::Protocol(format!(
                "no extracted features at {}; run the extract step first",
                dir.display()
            )));
        }
        sorted_files_with_ext(&dir, &["anof"])
    }

    /// Defect-type feature lists in alphabetical order, plus good test
    /// features when present.
    pub fn test_classes(&self) -> Result<(Vec<String>, Vec<Vec<PathBuf>>, Vec<PathBuf>)> {
        let dir = self.category_root.join("test");
        if !dir.is_dir() {
            return Err(Error::Protocol(format!(
                "no extracted features at {}; run the extract step first",
                dir.display()
            )));
        }
        let mut names = Vec::new();
        let mut by_class = Vec::new();
        let mut good = Vec::new();
        for (name, sub) in sorted_subdirs(&dir)? {
            let files = sorted_files_with_ext(&sub, &["anof"])?;
            if name == "good" {
                good = files;
            } else {
                names.push(name);
                by_class.push(files);
            }
        }
        if names.len() < 2 {
            return Err(Error::ExcludedCategory {
                category: self
                    .category_root
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                defect_types: names.len(),
            });
        }
        Ok((names, by_class, good))
    }
}

/// Representation fed to the classifier heads.
enum Representation<'a> {
    Residual(&'a MemoryBank),
    Raw,
}

impl Representation<'_> {
    fn tensor(&self, path: &Path) -> Result<Array3<f32>> {
        let map = read_feature_map(path)?;
        match self {
            Representation::Residual(bank) => Ok(bank.residual_map(&map)?.to_feature_tensor()),
            Representation::Raw => Ok(map.to_feature_tensor()),
        }
    }
}

fn bank_cache_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.paths
        .results
        .join("banks")
        .join(format!("{}_seed{}.anob", cfg.data.category, seed))
}

/// Loads the seeded bank from cache or builds it from the train-good
/// features and caches it.
pub fn bank_for_seed(
    cfg: &ExperimentConfig,
    layout: &FeatureLayout,
    seed: u64,
) -> Result<MemoryBank> {
    let cache = bank_cache_path(cfg, seed);
    if cache.exists() {
        let bank = MemoryBank::read(&cache)?;
        if bank.seed() == seed && bank.p() == cfg.bank.p {
            return Ok(bank);
        }
    }
    let files = layout.train_good()?;
    if files.is_empty() {
        return Err(Error::Protocol(
            "no train-good feature files to build the bank from".into(),
        ));
    }
    let maps: Vec<_> = files
        .iter()
        .map(|f| read_feature_map(f))
        .collect::<Result<Vec<_>>>()?;
    let bank = MemoryBank::build(&maps, cfg.bank.p, seed)?;
    if let Some(parent) = cache.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let sidecar = BankSidecar {
        source_feature_files: files
            .iter()
            .map(|f| f.to_string_lossy().into_owned())
            .collect(),
        source_count: bank.source_count(),
        p: cfg.bank.p,
        seed,
    };
    bank.write(&cache, &sidecar)?;
    Ok(bank)
}

/// Enumerates the generated pseudo-class set as (image path, label) pairs.
pub fn synth_entries(synth_dir: &Path) -> Result<Vec<(PathBuf, u32)>> {
    let mut out = Vec::new();
    for (name, dir) in sorted_subdirs(synth_dir)? {
        let Ok(label) = name.parse::<u32>() else {
            continue; // skip non-class directories such as features/
        };
        for file in sorted_files_with_ext(&dir, &IMAGE_EXTENSIONS)? {
            let stem = file.file_stem().unwrap_or_default().to_string_lossy();
            if stem.ends_with("_mask") {
                continue;
            }
            out.push((file, label));
        }
    }
    if out.is_empty() {
        return Err(Error::Protocol(format!(
            "no generated defect images under {}",
            synth_dir.display()
        )));
    }
    Ok(out)
}

/// Extracts (and caches) feature maps for every generated defect image.
/// Returns (feature path, pseudo-label) pairs.
pub fn extract_synth_features(
    cfg: &ExperimentConfig,
    handle: &BackboneHandle,
) -> Result<Vec<(PathBuf, usize)>> {
    let entries = synth_entries(&cfg.paths.synth)?;
    let feat_root = cfg.paths.synth.join("features");
    let jobs: Vec<(PathBuf, PathBuf, usize)> = entries
        .iter()
        .map(|(img, label)| {
            let stem = img.file_stem().unwrap_or_default().to_string_lossy();
            let out = feat_root.join(label.to_string()).join(format!("{stem}.anof"));
            (img.clone(), out, *label as usize)
        })
        .collect();
    for (_, out, _) in &jobs {
        if let Some(parent) = out.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    jobs.par_iter()
        .map(|(img, out, _)| -> Result<()> {
            if out.exists() {
                return Ok(());
            }
            let tensor = extract_feature_map(
                handle,
                &ImageTensor::open(img)?,
                cfg.backbone.input_size,
                &img.to_string_lossy(),
            )?;
            let sidecar = crate::backbone::FeatureSidecar::new(
                &img.to_string_lossy(),
                handle.id(),
                cfg.backbone.input_size,
            );
            crate::backbone::write_feature_map(out, &tensor, &sidecar)?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(jobs.into_iter().map(|(_, out, label)| (out, label)).collect())
}

fn checkpoint_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    let model = match cfg.protocol.model {
        ModelKind::Contrastive => "contrastive",
        ModelKind::Vanilla => "vanilla",
        ModelKind::Direct => "direct",
    };
    cfg.paths.checkpoints.join(format!(
        "{}_{model}_seed{seed}.anoc",
        cfg.data.category
    ))
}

/// Pretrains the contrastive net for one seed (or loads the cached
/// checkpoint) and returns it.
pub fn pretrained_embedding_for_seed(
    cfg: &ExperimentConfig,
    bank: &MemoryBank,
    feature_dim: usize,
    seed: u64,
) -> Result<EmbeddingNet> {
    let ckpt = checkpoint_path(cfg, seed);
    if ckpt.exists() {
        return EmbeddingNet::load(&ckpt);
    }
    let handle = load_backbone(&cfg.backbone.weights)?;
    let entries = extract_synth_features(cfg, &handle)?;
    let cache_dir = cfg
        .paths
        .results
        .join("residual_cache")
        .join(&cfg.data.category)
        .join(format!("seed{seed}"));
    let bank_opt = cfg.protocol.use_residual.then_some(bank);
    let source = FileFeatures::new(entries, bank_opt, Some(cache_dir))?;

    let mut net = EmbeddingNet::new(embedding_config(cfg, feature_dim));
    let pre_cfg = contrastive::ContrastivePretrainConfig {
        lr: cfg.train.lr,
        episode_classes: cfg.train.pretrain_classes,
        episode_shots: cfg.train.pretrain_shots,
        accuracy_threshold: cfg.train.pretrain_threshold,
        max_iterations: cfg.train.pretrain_max_iters,
        seed,
    };
    contrastive::pretrain(&mut net, &source, &pre_cfg)?;
    if let Some(parent) = ckpt.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    net.save(&ckpt)?;
    Ok(net)
}

/// Pretrains the vanilla head for one seed (or loads the cached checkpoint).
pub fn pretrained_relation_for_seed(
    cfg: &ExperimentConfig,
    bank: &MemoryBank,
    feature_dim: usize,
    seed: u64,
) -> Result<RelationHead> {
    let ckpt = checkpoint_path(cfg, seed);
    if ckpt.exists() {
        return RelationHead::load(&ckpt);
    }
    let handle = load_backbone(&cfg.backbone.weights)?;
    let entries = extract_synth_features(cfg, &handle)?;
    let cache_dir = cfg
        .paths
        .results
        .join("residual_cache")
        .join(&cfg.data.category)
        .join(format!("seed{seed}"));
    let bank_opt = cfg.protocol.use_residual.then_some(bank);
    let source = FileFeatures::new(entries, bank_opt, Some(cache_dir))?;

    let mut head = RelationHead::new(relation_config(cfg, feature_dim));
    let pre_cfg = relation::PretrainConfig {
        lr: cfg.train.lr,
        episode_classes: cfg.train.pretrain_classes,
        accuracy_threshold: cfg.train.pretrain_threshold,
        max_iterations: cfg.train.pretrain_max_iters,
        seed,
    };
    relation::pretrain_vanilla(&mut head, &source, &pre_cfg)?;
    if let Some(parent) = ckpt.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    head.save(&ckpt)?;
    Ok(head)
}

fn embedding_config(cfg: &ExperimentConfig, feature_dim: usize) -> EmbeddingConfig {
    EmbeddingConfig {
        in_channels: feature_dim,
        block_channels: cfg.train.embed_channels.clone(),
        embed_dim: cfg.train.embed_dim,
        temperature: cfg.train.temperature,
        param_seed: cfg.train.param_seed,
    }
}

fn relation_config(cfg: &ExperimentConfig, feature_dim: usize) -> RelationConfig {
    RelationConfig {
        in_channels: 2 * feature_dim,
        block_channels: cfg.train.relation_channels.clone(),
        hidden: cfg.train.relation_hidden,
        param_seed: cfg.train.param_seed,
    }
}

/// Support items (tensor, class), query files (path, class), class names.
struct EpisodeData {
    support: Vec<(Array3<f32>, usize)>,
    query_files: Vec<(PathBuf, usize)>,
    class_names: Vec<String>,
}

fn assemble_episode(
    cfg: &ExperimentConfig,
    layout: &FeatureLayout,
    rep: &Representation,
) -> Result<EpisodeData> {
    let (mut names, by_class, good) = layout.test_classes()?;
    let n = cfg.protocol.shots;
    let selection = select_shots(&by_class, &names, n)?;

    let mut support = Vec::new();
    let mut query_files = Vec::new();
    for (class, files) in selection.support.iter().enumerate() {
        for f in files {
            support.push((rep.tensor(f)?, class));
        }
    }
    for (class, files) in selection.query.iter().enumerate() {
        for f in files {
            query_files.push((f.clone(), class));
        }
    }

    if cfg.protocol.include_good {
        let good_class = names.len();
        let train = layout.train_good()?;
        if train.len() < n {
            return Err(Error::Protocol(format!(
                "include_good needs {n} train-good features, found {}",
                train.len()
            )));
        }
        if good.is_empty() {
            return Err(Error::Protocol(
                "include_good requires extracted test/good features".into(),
            ));
        }
        for f in train.iter().take(n) {
            support.push((rep.tensor(f)?, good_class));
        }
        for f in &good {
            query_files.push((f.clone(), good_class));
        }
        names.push("good".to_string());
    }

    Ok(EpisodeData {
        support,
        query_files,
        class_names: names,
    })
}

/// Evaluates one (category, shot, seed) cell.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedCell> {
    if cfg.protocol.model == ModelKind::Direct {
        let spec = DatasetSpec::from_config(cfg)?;
        let accuracy = direct_baseline(&spec, cfg.protocol.shots, cfg, seed)?;
        return Ok(SeedCell {
            category: cfg.data.category.clone(),
            shot: cfg.protocol.shots,
            seed,
            model: cfg.protocol.model,
            accuracy,
            correct: 0,
            total: 0,
            config_hash: cfg.hash(),
        });
    }

    let layout = FeatureLayout::new(&cfg.paths.features, &cfg.data.category);
    let bank = bank_for_seed(cfg, &layout, seed)?;
    let rep = if cfg.protocol.use_residual {
        Representation::Residual(&bank)
    } else {
        Representation::Raw
    };
    let episode = assemble_episode(cfg, &layout, &rep)?;
    let feature_dim = episode.support[0].0.dim().0;
    let shots = cfg.protocol.shots;

    let (correct, total) = match cfg.protocol.model {
        ModelKind::Contrastive => {
            let mut net = if cfg.protocol.pretrain {
                pretrained_embedding_for_seed(cfg, &bank, feature_dim, seed)?
            } else {
                EmbeddingNet::new(embedding_config(cfg, feature_dim))
            };
            contrastive::finetune(
                &mut net,
                &episode.support,
                shots,
                &contrastive::FinetuneConfig {
                    lr: cfg.train.lr,
                    epochs_override: None,
                },
            )?;
            let mut correct = 0usize;
            for (path, class) in &episode.query_files {
                let tensor = rep.tensor(path)?;
                let predicted = contrastive::classify(&net, &episode.support, &tensor)?;
                correct += usize::from(predicted == *class);
            }
            (correct, episode.query_files.len())
        }
        ModelKind::Vanilla => {
            let mut head = if cfg.protocol.pretrain {
                pretrained_relation_for_seed(cfg, &bank, feature_dim, seed)?
            } else {
                RelationHead::new(relation_config(cfg, feature_dim))
            };
            if shots >= 2 {
                relation::train_vanilla(
                    &mut head,
                    &episode.support,
                    &relation::VanillaTrainConfig {
                        lr: cfg.train.lr,
                        epochs: cfg.train.vanilla_epochs,
                    },
                )?;
            }
            let mut correct = 0usize;
            for (path, class) in &episode.query_files {
                let tensor = rep.tensor(path)?;
                let predicted = relation::classify_vanilla(&head, &episode.support, &tensor)?;
                correct += usize::from(predicted == *class);
            }
            (correct, episode.query_files.len())
        }
        ModelKind::Direct => unreachable!("handled above"),
    };

    let _ = episode.class_names;
    Ok(SeedCell {
        category: cfg.data.category.clone(),
        shot: shots,
        seed,
        model: cfg.protocol.model,
        accuracy: correct as f64 / total.max(1) as f64,
        correct,
        total,
        config_hash: cfg.hash(),
    })
}

fn cell_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    let model = match cfg.protocol.model {
        ModelKind::Contrastive => "contrastive",
        ModelKind::Vanilla => "vanilla",
        ModelKind::Direct => "direct",
    };
    cfg.paths.results.join("cells").join(format!(
        "{}_{model}_shot{}_seed{}.json",
        cfg.data.category, cfg.protocol.shots, seed
    ))
}

/// Runs every configured seed (resuming from persisted cells) and
/// aggregates the row. Each finished cell is written immediately.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultRow> {
    cfg.validate()?;
    let cells_dir = cfg.paths.results.join("cells");
    std::fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;

    let mut cells = Vec::new();
    for &seed in &cfg.protocol.seeds {
        let path = cell_path(cfg, seed);
        let cell = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?
        } else {
            let cell = run_seed(cfg, seed).map_err(|e| {
                Error::Protocol(format!(
                    "category {} seed {seed}: {e}",
                    cfg.data.category
                ))
            })?;
            let text = serde_json::to_string_pretty(&cell)
                .map_err(|e| Error::format(&path, e.to_string()))?;
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            cell
        };
        cells.push(cell);
    }
    let row = ResultRow::from_cells(&cells)?;
    let rows_dir = cfg.paths.results.join("rows");
    std::fs::create_dir_all(&rows_dir).map_err(|e| Error::io(&rows_dir, e))?;
    let row_path = rows_dir.join(format!(
        "{}_shot{}.json",
        cfg.data.category, cfg.protocol.shots
    ));
    let text =
        serde_json::to_string_pretty(&row).map_err(|e| Error::format(&row_path, e.to_string()))?;
    std::fs::write(&row_path, text).map_err(|e| Error::io(&row_path, e))?;
    Ok(row)
}

/// Linear softmax head over frozen pooled backbone features.
pub struct LinearHead {
    pub linear: Linear,
    pub classes: usize,
}

/// Trains a `C`-way linear softmax head with Adam; full-batch steps.
pub fn train_linear_softmax(
    features: &[(Vec<f32>, usize)],
    classes: usize,
    lr: f64,
    epochs: usize,
    param_seed: u64,
) -> Result<LinearHead> {
    if features.is_empty() {
        return Err(Error::Argument("no training features".into()));
    }
    let dim = features[0].0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed);
    let mut linear = Linear::new(dim, classes, &mut rng);
    let mut opt = Adam::new(lr);

    let n = features.len();
    let mut x = ndarray::Array2::<f64>::zeros((n, dim));
    for (i, (f, _)) in features.iter().enumerate() {
        for (j, &v) in f.iter().enumerate() {
            x[(i, j)] = v as f64;
        }
    }

    for _ in 0..epochs {
        linear.weight.zero_grad();
        linear.bias.zero_grad();
        let logits = linear.forward_train(&x);
        // d(mean CE)/d(logits) = (softmax - onehot) / n
        let mut grad = ndarray::Array2::<f64>::zeros((n, classes));
        for i in 0..n {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..classes {
                grad[(i, c)] = (exps[c] / z - f64::from(features[i].1 == c)) / n as f64;
            }
        }
        linear.backward(&grad);
        let mut params: Vec<&mut Param> = vec![&mut linear.weight, &mut linear.bias];
        opt.step(&mut params);
    }
    Ok(LinearHead { linear, classes })
}

/// Argmax class of a pooled feature under the linear head; lowest id wins
/// ties.
pub fn classify_linear(head: &LinearHead, feature: &[f32]) -> usize {
    let mut x = ndarray::Array2::<f64>::zeros((1, feature.len()));
    for (j, &v) in feature.iter().enumerate() {
        x[(0, j)] = v as f64;
    }
    let logits = head.linear.forward_eval(&x);
    let row = logits.row(0);
    let mut best = 0usize;
    for c in 1..head.classes {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

/// Direct fine-tuning baseline: freeze the backbone, train a fresh linear
/// layer on the pooled final-stage features of the support images, and
/// evaluate on the queries.
pub fn direct_baseline(
    spec: &DatasetSpec,
    shots: usize,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<f64> {
    let splits = ingest(spec)?;
    let selection = select_shots(&splits.test_by_class, &splits.defect_types, shots)?;
    let handle = load_backbone(&cfg.backbone.weights)?;
    let classes = splits.defect_types.len();

    let pooled = |path: &Path| -> Result<Vec<f32>> {
        let img = ImageTensor::open(path)?;
        let input = crate::backbone::preprocess(&img, cfg.backbone.input_size)?;
        Ok(handle.net().forward_pooled(&input).to_vec())
    };

    let mut train: Vec<(Vec<f32>, usize)> = Vec::new();
    for (class, files) in selection.support.iter().enumerate() {
        let feats: Vec<Vec<f32>> = files
            .par_iter()
            .map(|f| pooled(f))
            .collect::<Result<Vec<_>>>()?;
        train.extend(feats.into_iter().map(|f| (f, class)));
    }
    let head = train_linear_softmax(
        &train,
        classes,
        cfg.train.lr,
        cfg.train.vanilla_epochs,
        cfg.train.param_seed ^ seed,
    )?;

    let mut correct = 0usize;
    let mut total = 0usize;
    for (class, files) in selection.query.iter().enumerate() {
        let feats: Vec<Vec<f32>> = files
            .par_iter()
            .map(|f| pooled(f))
            .collect::<Result<Vec<_>>>()?;
        for f in feats {
            correct += usize::from(classify_linear(&head, &f) == class);
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Writes the markdown table (categories x shots with an Average row) and
/// the flat CSV.
pub fn report(rows: &[ResultRow], out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if rows.is_empty() {
        return Err(Error::Argument("no result rows to report".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut categories: Vec<String> = rows.iter().map(|r| r.category.clone()).collect();
    categories.sort();
    categories.dedup();
    let mut shots: Vec<usize> = rows.iter().map(|r| r.shot).collect();
    shots.sort_unstable();
    shots.dedup();

    let find = |cat: &str, shot: usize| rows.iter().find(|r| r.category == cat && r.shot == shot);

    let mut md = String::new();
    md.push_str("| category |");
    for s in &shots {
        md.push_str(&format!(" {s}-shot (%) |"));
    }
    md.push('\n');
    md.push_str("|---|");
    for _ in &shots {
        md.push_str("---|");
    }
    md.push('\n');
    for cat in &categories {
        md.push_str(&format!("| {cat} |"));
        for &s in &shots {
            match find(cat, s) {
                Some(r) => md.push_str(&format!(" {} |", r.formatted())),
                None => md.push_str(" - |"),
            }
        }
        md.push('\n');
    }
    // Average row: mean of the category means per shot
    md.push_str("| Average |");
    for &s in &shots {
        let means: Vec<f64> = categories
            .iter()
            .filter_map(|c| find(c, s))
            .map(|r| r.mean_pct)
            .collect();
        if means.is_empty() {
            md.push_str(" - |");
        } else {
            md.push_str(&format!(" {:.2} |", mean(&means)));
        }
    }
    md.push('\n');

    let md_path = out_dir.join("results.md");
    std::fs::write(&md_path, &md).map_err(|e| Error::io(&md_path, e))?;

    let mut csv = String::from("category,shot,mean_pct,std_pct,seeds,config_hash\n");
    for cat in &categories {
        for &s in &shots {
            if let Some(r) = find(cat, s) {
                let seeds = r
                    .seeds
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(" ");
                csv.push_str(&format!(
                    "{},{},{:.4},{:.4},{seeds},{}\n",
                    r.category, r.shot, r.mean_pct, r.std_pct, r.config_hash
                ));
            }
        }
    }
    for &s in &shots {
        let means: Vec<f64> = categories
            .iter()
            .filter_map(|c| find(c, s))
            .map(|r| r.mean_pct)
            .collect();
        if !means.is_empty() {
            csv.push_str(&format!("Average,{s},{:.4},,,\n", mean(&means)));
        }
    }
    let csv_path = out_dir.join("results.csv");
    std::fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok((md_path, csv_path))
}

/// Reads all persisted row files from a results directory.
pub fn load_rows(results_dir: &Path) -> Result<Vec<ResultRow>> {
    let rows_dir = results_dir.join("rows");
    let mut rows = Vec::new();
    for f in sorted_files_with_ext(&rows_dir, &["json"])? {
        let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        rows.push(serde_json::from_str(&text).map_err(|e| Error::format(&f, e.to_string()))?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    fn touch_image(path: &Path) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        RgbImage::from_pixel(64, 64, image::Rgb([100, 100, 100]))
            .save(path)
            .unwrap();
    }

    fn fake_mvtec(root: &Path, category: &str, defect_types: &[(&str, usize)], train: usize) {
        for i in 0..train {
            touch_image(&root.join(category).join(format!("train/good/{i:03}.png")));
        }
        for (name, count) in defect_types {
            for i in 0..*count {
                touch_image(&root.join(category).join(format!("test/{name}/{i:03}.png")));
            }
        }
    }

    #[test]
    fn ingest_orders_defect_types_alphabetically() {
        let dir = tempfile::tempdir().unwrap();
        fake_mvtec(
            dir.path(),
            "widget",
            &[("scratch", 4), ("broken_large", 3), ("good", 5), ("contamination", 6)],
            2,
        );
        let spec = DatasetSpec {
            root: dir.path().to_path_buf(),
            dataset: DatasetKind::MvtecAd,
            category: "widget".into(),
        };
        let splits = ingest(&spec).unwrap();
        assert_eq!(
            splits.defect_types,
            vec!["broken_large", "contamination", "scratch"]
        );
        assert_eq!(splits.test_by_class[0].len(), 3);
        assert_eq!(splits.test_good.len(), 5);
        assert_eq!(splits.train_good.len(), 2);
    }

    #[test]
    fn ingest_excludes_single_type_categories() {
        let dir = tempfile::tempdir().unwrap();
        fake_mvtec(dir.path(), "brush", &[("defective", 4), ("good", 2)], 1);
        let spec = DatasetSpec {
            root: dir.path().to_path_buf(),
            dataset: DatasetKind::MvtecAd,
            category: "brush".into(),
        };
        assert!(matches!(
            ingest(&spec),
            Err(Error::ExcludedCategory { defect_types: 1, .. })
        ));
    }

    #[test]
    fn ingest_missing_root_names_path() {
        let spec = DatasetSpec {
            root: PathBuf::from("/definitely/not/here"),
            dataset: DatasetKind::MvtecAd,
            category: "x".into(),
        };
        let err = ingest(&spec).unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here"), "{err}");
    }

    #[test]
    fn ingest_mvtec3d_uses_rgb_subdir() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        touch_image(&root.join("bagel/train/good/rgb/000.png"));
        touch_image(&root.join("bagel/test/crack/rgb/000.png"));
        touch_image(&root.join("bagel/test/crack/rgb/001.png"));
        touch_image(&root.join("bagel/test/hole/rgb/000.png"));
        touch_image(&root.join("bagel/test/hole/rgb/001.png"));
        let spec = DatasetSpec {
            root: root.to_path_buf(),
            dataset: DatasetKind::Mvtec3dAd,
            category: "bagel".into(),
        };
        let splits = ingest(&spec).unwrap();
        assert_eq!(splits.defect_types, vec!["crack", "hole"]);
        assert_eq!(splits.train_good.len(), 1);
    }

    #[test]
    fn select_shots_first_n_lexicographic() {
        let files: Vec<PathBuf> = ["000.png", "001.png", "002.png"]
            .iter()
            .map(PathBuf::from)
            .collect();
        let sel = select_shots(&[files], &["t".into()], 2).unwrap();
        assert_eq!(sel.support[0].len(), 2);
        assert_eq!(sel.query[0], vec![PathBuf::from("002.png")]);
        // disjoint
        for s in &sel.support[0] {
            assert!(!sel.query[0].contains(s));
        }
    }

    #[test]
    fn select_shots_errors_on_small_class() {
        let files: Vec<PathBuf> = (0..4).map(|i| PathBuf::from(format!("{i}.png"))).collect();
        let err = select_shots(&[files], &["tiny_class".into()], 5).unwrap_err();
        assert!(err.to_string().contains("tiny_class"), "{err}");
    }

    #[test]
    fn stats_hand_computation() {
        let accs = [0.4, 0.5, 0.6, 0.5, 0.5];
        let pcts: Vec<f64> = accs.iter().map(|a| a * 100.0).collect();
        let m = mean(&pcts);
        let s = sample_std(&pcts);
        assert!((m - 50.0).abs() < 1e-12);
        assert!((s - 7.0710678118654755).abs() < 1e-10);
        assert_eq!(format_mean_std(m, s), "50.00 \u{b1} 7.07");
    }

    #[test]
    fn single_seed_std_is_zero_and_flagged() {
        let cell = SeedCell {
            category: "c".into(),
            shot: 2,
            seed: 1,
            model: ModelKind::Contrastive,
            accuracy: 0.5,
            correct: 5,
            total: 10,
            config_hash: "h".into(),
        };
        let row = ResultRow::from_cells(&[cell]).unwrap();
        assert_eq!(row.std_pct, 0.0);
        assert!(row.single_seed);
    }

    #[test]
    fn report_average_is_mean_of_means() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<ResultRow> = (0..14)
            .map(|i| ResultRow {
                category: format!("cat{i:02}"),
                shot: 2,
                model: ModelKind::Contrastive,
                mean_pct: 30.0 + i as f64,
                std_pct: 1.0,
                seeds: vec![1, 2],
                per_seed_accuracy: vec![0.3, 0.3],
                single_seed: false,
                config_hash: "h".into(),
            })
            .collect();
        let (md_path, csv_path) = report(&rows, dir.path()).unwrap();
        let md = std::fs::read_to_string(&md_path).unwrap();
        assert_eq!(md.lines().count(), 2 + 14 + 1); // header, separator, 14 cats, Average
        let want = mean(&rows.iter().map(|r| r.mean_pct).collect::<Vec<_>>());
        let avg_line = md.lines().last().unwrap();
        assert!(avg_line.starts_with("| Average |"));
        assert!(avg_line.contains(&format!("{want:.2}")));

        let csv = std::fs::read_to_string(&csv_path).unwrap();
        assert!(csv.starts_with("category,shot,mean_pct,std_pct,seeds,config_hash\n"));
        let avg_csv = csv.lines().last().unwrap();
        assert!(avg_csv.starts_with("Average,2,"));
        let got: f64 = avg_csv.split(',').nth(2).unwrap().parse().unwrap();
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn linear_head_learns_separable_data() {
        let mut train = Vec::new();
        for i in 0..10 {
            train.push((vec![1.0f32, 0.0, i as f32 * 0.01], 0usize));
            train.push((vec![0.0f32, 1.0, i as f32 * 0.01], 1usize));
        }
        let head = train_linear_softmax(&train, 2, 0.05, 200, 3).unwrap();
        assert_eq!(classify_linear(&head, &[1.0, 0.0, 0.05]), 0);
        assert_eq!(classify_linear(&head, &[0.0, 1.0, 0.05]), 1);
    }

    #[test]
    fn untrained_linear_head_is_chance_level() {
        // 0 epochs, balanced random queries: accuracy sits near 1/C
        let train = vec![(vec![0.0f32; 8], 0usize), (vec![0.0f32; 8], 1)];
        let head = train_linear_softmax(&train, 4, 1e-4, 0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        let mut correct = 0usize;
        let total = 400;
        for i in 0..total {
            let q: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let label = i % 4;
            correct += usize::from(classify_linear(&head, &q) == label);
        }
        let acc = correct as f64 / total as f64;
        assert!((acc - 0.25).abs() < 0.15, "accuracy {acc}");
    }
}
