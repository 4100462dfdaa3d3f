use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pdettc_core::euler::{DatasetSpec, Family, GridSpec, SolverConfig, SplitFractions};
use pdettc_core::nn::LrSchedule;
use pdettc_core::rewards::{PrmConfig, PrmTrainConfig};
use pdettc_core::surrogate::{parse_model_name, ModelConfig, SizePreset, TrainConfig};
use pdettc_core::ttc::RewardKind;

use crate::CliError;

/// Everything a command needs, as one JSON document. Missing sections take
/// their defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: OptimSection,
    pub finetune: FinetuneSection,
    pub prm: PrmSection,
    pub ttc: TtcSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: OptimSection::default(),
            finetune: FinetuneSection::default(),
            prm: PrmSection::default(),
            ttc: TtcSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub families: Vec<Family>,
    pub n_per_family: usize,
    /// Cells per side.
    pub grid: usize,
    pub splits: SplitFractions,
    pub solver: SolverConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            families: vec![Family::Rp],
            n_per_family: 128,
            grid: 32,
            splits: SplitFractions::default(),
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `vit3`, `vit5` or `vit7`.
    pub name: String,
    pub size: SizePreset,
    pub embed_dim: Option<usize>,
    pub depth: Option<usize>,
    pub n_heads: Option<usize>,
    pub dropout_p: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            name: "vit5".into(),
            size: SizePreset::Desk,
            embed_dim: None,
            depth: None,
            n_heads: None,
            dropout_p: None,
        }
    }
}

/// Overrides on top of the size preset's optimizer settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub schedule: Option<LrSchedule>,
    pub grad_clip: Option<f64>,
}

impl OptimSection {
    fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        cfg.lr = self.lr.unwrap_or(cfg.lr);
        cfg.weight_decay = self.weight_decay.unwrap_or(cfg.weight_decay);
        cfg.batch_size = self.batch_size.unwrap_or(cfg.batch_size);
        cfg.epochs = self.epochs.unwrap_or(cfg.epochs);
        if let Some(s) = self.schedule {
            cfg.schedule = s;
        }
        if self.grad_clip.is_some() {
            cfg.grad_clip = self.grad_clip;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub n_trajectories: usize,
    pub optim: OptimSection,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            n_trajectories: 16,
            optim: OptimSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrmSection {
    pub k: usize,
    pub alpha: f64,
    pub max_trajectories: Option<usize>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
}

impl Default for PrmSection {
    fn default() -> Self {
        Self {
            k: 100,
            alpha: 0.1,
            max_trajectories: None,
            lr: None,
            epochs: None,
            batch_size: None,
            patience: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtcSection {
    pub b_list: Vec<usize>,
    pub rewards: Vec<RewardKind>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    /// Evaluate only the first this-many test trajectories.
    pub max_cases: Option<usize>,
}

impl Default for TtcSection {
    fn default() -> Self {
        Self {
            b_list: vec![1, 4, 16, 64],
            rewards: vec![RewardKind::Prm, RewardKind::ArmMass],
            seeds: vec![1],
            steps: 20,
            max_cases: None,
        }
    }
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    CliError::Config(msg.into()).into()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Schema checks that need no data on disk.
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.data.families.is_empty() {
            return Err(config_error("data.families must not be empty"));
        }
        self.data
            .splits
            .validate()
            .map_err(|e| config_error(e.to_string()))?;
        self.model_config()?
            .validate()
            .map_err(|e| config_error(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| config_error(e.to_string()))?;
        self.finetune_config()
            .validate()
            .map_err(|e| config_error(e.to_string()))?;
        self.prm_config()?
            .validate()
            .map_err(|e| config_error(e.to_string()))?;
        if self.ttc.b_list.is_empty() || self.ttc.b_list.contains(&0) {
            return Err(config_error("ttc.b_list needs positive branching factors"));
        }
        if self.ttc.seeds.is_empty() {
            return Err(config_error("ttc.seeds must not be empty"));
        }
        if self.ttc.steps == 0 || self.ttc.steps + 1 > self.data.solver.n_times {
            return Err(config_error(format!(
                "ttc.steps must lie in 1..={}",
                self.data.solver.n_times.saturating_sub(1)
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> anyhow::Result<GridSpec> {
        GridSpec::square(self.data.grid).map_err(|e| config_error(e.to_string()))
    }

    pub fn dataset_spec(&self) -> anyhow::Result<DatasetSpec> {
        Ok(DatasetSpec {
            families: self.data.families.clone(),
            n_per_family: self.data.n_per_family,
            grid: self.grid()?,
            seed: self.seed,
            splits: self.data.splits,
            solver: self.data.solver,
        })
    }

    pub fn model_config(&self) -> anyhow::Result<ModelConfig> {
        let patch = parse_model_name(&self.model.name).map_err(config_error)?;
        let m = &self.model;
        let base = ModelConfig::preset(m.size, patch);
        Ok(ModelConfig {
            embed_dim: m.embed_dim.unwrap_or(base.embed_dim),
            depth: m.depth.unwrap_or(base.depth),
            n_heads: m.n_heads.unwrap_or(base.n_heads),
            dropout_p: m.dropout_p.unwrap_or(base.dropout_p),
            height: self.data.grid,
            width: self.data.grid,
            ..base
        })
    }

    fn stage_seed(&self, stage: u64) -> u64 {
        pdettc_core::rng::derive_seed(self.seed, &[stage])
    }

    pub fn train_config(&self) -> TrainConfig {
        let base = TrainConfig {
            seed: self.stage_seed(1),
            ..TrainConfig::pretrain(self.model.size)
        };
        self.train.apply(base)
    }

    pub fn finetune_config(&self) -> TrainConfig {
        let base = TrainConfig {
            seed: self.stage_seed(2),
            ..TrainConfig::finetune(self.model.size)
        };
        self.finetune.optim.apply(base)
    }

    /// Seed for building triplets.
    pub fn triplet_seed(&self) -> u64 {
        self.stage_seed(3)
    }

    pub fn prm_config(&self) -> anyhow::Result<PrmConfig> {
        let p = &self.prm;
        let defaults = PrmTrainConfig::default();
        let mut cfg = PrmConfig::new(self.model_config()?);
        cfg.k = p.k;
        cfg.alpha = p.alpha;
        cfg.max_trajectories = p.max_trajectories;
        cfg.train = PrmTrainConfig {
            lr: p.lr.unwrap_or(defaults.lr),
            epochs: p.epochs.unwrap_or(defaults.epochs),
            batch_size: p.batch_size.unwrap_or(defaults.batch_size),
            patience: p.patience.unwrap_or(defaults.patience),
            seed: self.stage_seed(4),
            ..defaults
        };
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let c: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"prm": {"K": 3}}"#).is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn prm_defaults() {
        let p = ExperimentConfig::default().prm_config().unwrap();
        assert_eq!((p.k, p.alpha), (100, 0.1));
    }

    #[test]
    fn model_follows_the_data_grid() {
        let mut c = ExperimentConfig::default();
        c.data.grid = 40;
        c.model.name = "vit3".into();
        let m = c.model_config().unwrap();
        assert_eq!((m.height, m.width, m.patch_size), (40, 40, 3));
        c.model.name = "vit4".into();
        assert!(c.validate().is_err());
    }
}
