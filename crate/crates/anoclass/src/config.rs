//! Experiment configuration: one TOML file covering every stage, with
//! command-line overrides layered on top. Every field is serialized into the
//! results manifest so a run can be reproduced from its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::MaskKind;

pub const DATA_ROOT_ENV: &str = "ANOCLASS_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    MvtecAd,
    Mvtec3dAd,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvtec_ad" => Ok(DatasetKind::MvtecAd),
            "mvtec3d_ad" => Ok(DatasetKind::Mvtec3dAd),
            other => Err(Error::Config(format!(
                "unknown dataset {other:?}, expected mvtec_ad or mvtec3d_ad"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Contrastive,
    Vanilla,
    Direct,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(ModelKind::Contrastive),
            "vanilla" => Ok(ModelKind::Vanilla),
            "direct" => Ok(ModelKind::Direct),
            other => Err(Error::Config(format!(
                "unknown model {other:?}, expected contrastive, vanilla or direct"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Dataset root; falls back to the ANOCLASS_DATA_ROOT environment
    /// variable when empty.
    pub root: PathBuf,
    pub dataset: DatasetKind,
    pub category: String,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: PathBuf::new(),
            dataset: DatasetKind::MvtecAd,
            category: String::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolSection {
    /// Labeled defect images per class in the support set (1..=5).
    pub shots: usize,
    /// Coreset seeds; one evaluation per seed.
    pub seeds: Vec<u64>,
    pub model: ModelKind,
    /// Feed residual maps (true) or raw feature maps (false).
    pub use_residual: bool,
    /// Pretrain on the generated pseudo-class set before fine-tuning.
    pub pretrain: bool,
    pub gen_kind: MaskKind,
    /// Add the good class (support from train/good, queries from test/good).
    pub include_good: bool,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        ProtocolSection {
            shots: 2,
            seeds: vec![1, 2, 3, 4, 5],
            model: ModelKind::Contrastive,
            use_residual: true,
            pretrain: true,
            gen_kind: MaskKind::Poisson,
            include_good: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSection {
    pub weights: PathBuf,
    pub input_size: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            weights: PathBuf::new(),
            input_size: 224,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BankSection {
    /// Coreset fraction of the pooled patch count.
    pub p: f64,
}

impl Default for BankSection {
    fn default() -> Self {
        BankSection { p: 0.10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub fg_tolerance: u8,
    pub lambda: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub coverage_min: f64,
    pub coverage_max: f64,
    pub per_class: usize,
    pub polygon_scale: f64,
    pub polygon_jitter: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = crate::synth::SynthConfig::default();
        SynthSection {
            fg_tolerance: d.fg_tolerance,
            lambda: d.lambda,
            beta_min: d.beta_range.0,
            beta_max: d.beta_range.1,
            coverage_min: d.coverage_range.0,
            coverage_max: d.coverage_range.1,
            per_class: 20,
            polygon_scale: d.polygon_scale,
            polygon_jitter: d.polygon_jitter,
        }
    }
}

impl SynthSection {
    pub fn to_synth_config(&self) -> crate::synth::SynthConfig {
        crate::synth::SynthConfig {
            fg_tolerance: self.fg_tolerance,
            lambda: self.lambda,
            beta_range: (self.beta_min, self.beta_max),
            coverage_range: (self.coverage_min, self.coverage_max),
            polygon_scale: self.polygon_scale,
            polygon_jitter: self.polygon_jitter,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub lr: f64,
    pub pretrain_threshold: f64,
    pub pretrain_max_iters: usize,
    /// Pseudo-classes sampled per pretraining episode.
    pub pretrain_classes: usize,
    /// Support candidates per class per pretraining episode.
    pub pretrain_shots: usize,
    /// Fine-tune traversals for the vanilla baseline and the direct head.
    pub vanilla_epochs: usize,
    pub param_seed: u64,
    pub temperature: f64,
    pub embed_dim: usize,
    /// Conv block widths of the embedding network.
    pub embed_channels: Vec<usize>,
    /// Conv block widths of the relation scorer.
    pub relation_channels: Vec<usize>,
    /// Hidden width of the relation scoring MLP.
    pub relation_hidden: usize,
    pub maml_inner_lr: f64,
    pub maml_outer_lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-4,
            pretrain_threshold: 0.4,
            pretrain_max_iters: 2000,
            pretrain_classes: 10,
            pretrain_shots: 2,
            vanilla_epochs: 45,
            param_seed: 0,
            temperature: 1.0,
            embed_dim: 256,
            embed_channels: vec![256, 128, 64, 64],
            relation_channels: vec![128, 64],
            relation_hidden: 8,
            maml_inner_lr: 1e-4,
            maml_outer_lr: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneSection {
    pub perplexity: f64,
    pub iterations: usize,
}

impl Default for TsneSection {
    fn default() -> Self {
        TsneSection {
            perplexity: 30.0,
            iterations: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    /// Root of extracted feature caches (one subtree per category).
    pub features: PathBuf,
    /// Generated pseudo-class defect set.
    pub synth: PathBuf,
    /// Model checkpoints.
    pub checkpoints: PathBuf,
    /// Result cells, rows and reports.
    pub results: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            features: PathBuf::from("out/features"),
            synth: PathBuf::from("out/synth"),
            checkpoints: PathBuf::from("out/ckpts"),
            results: PathBuf::from("out/results"),
        }
    }
}

/// Complete experiment configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub protocol: ProtocolSection,
    pub backbone: BackboneSection,
    pub bank: BankSection,
    pub synth: SynthSection,
    pub train: TrainSection,
    pub tsne: TsneSection,
    pub paths: PathsSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.protocol.shots) {
            return Err(Error::Config(format!(
                "shots = {} must be in 1..=5",
                self.protocol.shots
            )));
        }
        if self.protocol.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.bank.p > 0.0 && self.bank.p <= 1.0) {
            return Err(Error::Config(format!("bank.p = {} must be in (0, 1]", self.bank.p)));
        }
        if !(self.train.temperature > 0.0) {
            return Err(Error::Config("train.temperature must be positive".into()));
        }
        Ok(())
    }

    /// Dataset root, falling back to the environment variable.
    pub fn data_root(&self) -> Result<PathBuf> {
        if !self.data.root.as_os_str().is_empty() {
            return Ok(self.data.root.clone());
        }
        match std::env::var(DATA_ROOT_ENV) {
            Ok(v) if !v.is_empty() => Ok(PathBuf::from(v)),
            _ => Err(Error::Config(format!(
                "no data root: set [data].root or {DATA_ROOT_ENV}"
            ))),
        }
    }

    /// Stable hash of the full configuration (FNV-1a over canonical JSON).
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in canon.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.protocol.seeds, vec![1, 2, 3, 4, 5]);
        assert_eq!(cfg.bank.p, 0.10);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.pretrain_threshold, 0.4);
        assert_eq!(cfg.train.vanilla_epochs, 45);
        assert_eq!(cfg.backbone.input_size, 224);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(
            &path,
            r#"
[data]
category = "bottle"

[protocol]
shots = 3
model = "vanilla"
"#,
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.data.category, "bottle");
        assert_eq!(cfg.protocol.shots, 3);
        assert_eq!(cfg.protocol.model, ModelKind::Vanilla);
        // untouched sections keep defaults
        assert_eq!(cfg.bank.p, 0.10);
    }

    #[test]
    fn invalid_shots_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.protocol.shots = 9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_changes_with_any_field() {
        let base = ExperimentConfig::default();
        let h0 = base.hash();

        let mut a = base.clone();
        a.protocol.shots = 3;
        assert_ne!(h0, a.hash());

        let mut b = base.clone();
        b.bank.p = 0.25;
        assert_ne!(h0, b.hash());

        let mut c = base.clone();
        c.train.temperature = 0.5;
        assert_ne!(h0, c.hash());

        assert_eq!(h0, base.hash());
    }
}
