//! Experiment configuration: a TOML file with documented sections whose
//! resolution materializes every default, so manifests carry the complete
//! effective configuration.

use crate::attack::{AttackBnMode, AttackInit, AttackNorm, PerturbBudget};
use crate::data::{load_dataset, AugmentConfig, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, FinetuneMode};
use crate::model::EncoderConfig;
use crate::pretrain::{PretrainConfig, ViewRecipe};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Fully resolved experiment configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSection {
    pub seed: u64,
    /// Root directory for run artifacts; the `ADVCL_ARTIFACTS` environment
    /// variable overrides it.
    pub artifact_root: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            artifact_root: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSection {
    pub name: String,
    pub root: PathBuf,
    /// Synthetic generator keys (ignored for file-backed datasets).
    pub n: usize,
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise: f64,
    pub texture: f64,
    /// Keep only these classes (relabelled in order); empty keeps all.
    pub keep_classes: Vec<usize>,
    /// Truncate the train/test splits (0 keeps everything).
    pub limit_train: usize,
    pub limit_test: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            name: "synthetic".into(),
            root: PathBuf::from("data"),
            n: 512,
            classes: 2,
            image_size: 32,
            channels: 3,
            noise: 0.05,
            texture: 0.06,
            keep_classes: Vec::new(),
            limit_train: 0,
            limit_test: 0,
        }
    }
}

impl DatasetSection {
    pub fn synthetic_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n: self.n,
            classes: self.classes,
            image_size: self.image_size,
            channels: self.channels,
            seed,
            noise: self.noise,
            texture: self.texture,
        }
    }

    /// Loads a split with class filtering and truncation applied.
    pub fn load(&self, split: Split, seed: u64) -> Result<Dataset> {
        let spec = self.synthetic_spec(seed);
        let mut data = load_dataset(&self.name, split, &self.root, Some(&spec))?;
        if !self.keep_classes.is_empty() {
            data = data.filter_classes(&self.keep_classes);
        }
        let limit = match split {
            Split::Train => self.limit_train,
            Split::Test => self.limit_test,
        };
        if limit > 0 {
            data = data.take(limit);
        }
        Ok(data)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BudgetSection {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub init: AttackInit,
}

impl BudgetSection {
    pub fn to_budget(&self) -> PerturbBudget {
        PerturbBudget {
            epsilon: self.epsilon,
            steps: self.steps,
            step_size: self.step_size,
            init: self.init,
            norm: AttackNorm::LInf,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_from: f64,
    pub warmup_epochs: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub views: ViewRecipe,
    pub k_list: Vec<usize>,
    pub freq_radius: f64,
    pub clamp_frequency_views: bool,
    pub attack_bn_mode: AttackBnMode,
    pub checkpoint_every: usize,
    pub budget: BudgetSection,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        PretrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            warmup_from: d.warmup_from,
            warmup_epochs: d.warmup_epochs,
            temperature: d.temperature,
            lambda: d.lambda,
            views: d.views,
            k_list: d.k_list,
            freq_radius: d.freq_radius,
            clamp_frequency_views: d.clamp_frequency_views,
            attack_bn_mode: d.attack_bn_mode,
            checkpoint_every: d.checkpoint_every,
            budget: BudgetSection {
                epsilon: 8.0 / 255.0,
                steps: 5,
                step_size: 2.0 / 255.0,
                init: AttackInit::UniformRandom,
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneSection {
    pub mode: FinetuneMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub drop_epochs: Vec<usize>,
    pub drop_factor: f64,
    pub trades_beta: f64,
    pub val_limit: usize,
    pub budget: BudgetSection,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let d = FinetuneConfig::standard(FinetuneMode::Slf);
        FinetuneSection {
            mode: FinetuneMode::Slf,
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            drop_epochs: d.drop_epochs,
            drop_factor: d.drop_factor,
            trades_beta: d.trades_beta,
            val_limit: d.val_limit,
            budget: BudgetSection {
                epsilon: 8.0 / 255.0,
                steps: 10,
                step_size: 2.0 / 255.0,
                init: AttackInit::Zero,
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSection {
    pub batch_size: usize,
    pub eps_list: Vec<f64>,
    pub steps_list: Vec<usize>,
    pub budget: BudgetSection,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            batch_size: 64,
            eps_list: vec![0.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0],
            steps_list: vec![1, 5, 10, 20],
            budget: BudgetSection {
                epsilon: 8.0 / 255.0,
                steps: 20,
                step_size: 2.0 / 255.0,
                init: AttackInit::Zero,
            },
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run: RunSection::default(),
            dataset: DatasetSection::default(),
            encoder: EncoderConfig::default(),
            augment: AugmentConfig::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Partially specified file form; every missing key falls back to the
/// documented default during resolution.
#[derive(Default, Deserialize)]
struct PartialConfig {
    run: Option<toml::Value>,
    dataset: Option<toml::Value>,
    encoder: Option<toml::Value>,
    augment: Option<toml::Value>,
    pretrain: Option<toml::Value>,
    finetune: Option<toml::Value>,
    eval: Option<toml::Value>,
}

fn merge_section<T: Serialize + serde::de::DeserializeOwned>(
    base: T,
    patch: Option<toml::Value>,
    section: &str,
) -> Result<T> {
    let Some(patch) = patch else { return Ok(base) };
    let mut value = toml::Value::try_from(&base)
        .map_err(|e| Error::Config(format!("serializing defaults for [{section}]: {e}")))?;
    let (toml::Value::Table(dst), toml::Value::Table(src)) = (&mut value, patch) else {
        return Err(Error::Config(format!("[{section}] must be a table")));
    };
    for (k, v) in src {
        if !dst.contains_key(&k) {
            return Err(Error::Config(format!("unknown key {k:?} in [{section}]")));
        }
        // one level of nested tables (budget sections) merges recursively
        match (dst.get_mut(&k), &v) {
            (Some(toml::Value::Table(inner_dst)), toml::Value::Table(inner_src)) => {
                for (ik, iv) in inner_src {
                    if !inner_dst.contains_key(ik) {
                        return Err(Error::Config(format!(
                            "unknown key {ik:?} in [{section}.{k}]"
                        )));
                    }
                    inner_dst.insert(ik.clone(), iv.clone());
                }
            }
            _ => {
                dst.insert(k, v);
            }
        }
    }
    value
        .try_into()
        .map_err(|e| Error::Config(format!("invalid [{section}]: {e}")))
}

impl ExperimentConfig {
    /// Parses a TOML config file, materializing defaults for every key the
    /// file leaves unset. Unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let partial: PartialConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        let cfg = ExperimentConfig {
            run: merge_section(RunSection::default(), partial.run, "run")?,
            dataset: merge_section(DatasetSection::default(), partial.dataset, "dataset")?,
            encoder: merge_section(EncoderConfig::default(), partial.encoder, "encoder")?,
            augment: merge_section(AugmentConfig::default(), partial.augment, "augment")?,
            pretrain: merge_section(PretrainSection::default(), partial.pretrain, "pretrain")?,
            finetune: merge_section(FinetuneSection::default(), partial.finetune, "finetune")?,
            eval: merge_section(EvalSection::default(), partial.eval, "eval")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.to_pretrain_config().validate()?;
        // encoder must match the dataset geometry
        let ds_channels = match self.dataset.name.as_str() {
            "cifar10" | "cifar100" => 3,
            _ => self.dataset.channels,
        };
        if self.encoder.input_channels != ds_channels {
            return Err(Error::Config(format!(
                "encoder expects {} channels, dataset provides {ds_channels}",
                self.encoder.input_channels
            )));
        }
        let ds_size = match self.dataset.name.as_str() {
            "cifar10" | "cifar100" => 32,
            _ => self.dataset.image_size,
        };
        if self.encoder.input_size != ds_size {
            return Err(Error::Config(format!(
                "encoder expects {}x{0} inputs, dataset provides {ds_size}x{ds_size}",
                self.encoder.input_size
            )));
        }
        Ok(())
    }

    /// Effective pretraining configuration.
    pub fn to_pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            momentum: p.momentum,
            weight_decay: p.weight_decay,
            warmup_from: p.warmup_from,
            warmup_epochs: p.warmup_epochs,
            temperature: p.temperature,
            lambda: p.lambda,
            budget: p.budget.to_budget(),
            views: p.views,
            k_list: p.k_list.clone(),
            seed: self.run.seed,
            freq_radius: p.freq_radius,
            clamp_frequency_views: p.clamp_frequency_views,
            attack_bn_mode: p.attack_bn_mode,
            augment: self.augment.clone(),
            encoder: self.encoder.clone(),
            checkpoint_every: p.checkpoint_every,
        }
    }

    /// Effective finetuning configuration.
    pub fn to_finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            mode: f.mode,
            epochs: f.epochs,
            batch_size: f.batch_size,
            lr: f.lr,
            momentum: f.momentum,
            weight_decay: f.weight_decay,
            drop_epochs: f.drop_epochs.clone(),
            drop_factor: f.drop_factor,
            budget: f.budget.to_budget(),
            trades_beta: f.trades_beta,
            seed: self.run.seed,
            val_limit: f.val_limit,
        }
    }

    /// Artifact root, honoring the `ADVCL_ARTIFACTS` override.
    pub fn artifact_root(&self) -> PathBuf {
        std::env::var_os("ADVCL_ARTIFACTS")
            .map(PathBuf::from)
            .unwrap_or_else(|| self.run.artifact_root.clone())
    }

    /// SHA-256 over the canonical JSON of the resolved configuration.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("config serialization");
        format!("{:x}", Sha256::digest(bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.run.seed, 0);
        assert_eq!(cfg.pretrain.epochs, 20);
        assert_eq!(cfg.pretrain.lambda, 0.2);
        assert_eq!(cfg.pretrain.k_list, vec![2, 10, 50, 100, 500]);
        assert_eq!(cfg.finetune.epochs, 25);
        assert_eq!(cfg.finetune.drop_epochs, vec![15, 20]);
        assert!((cfg.pretrain.budget.epsilon - 8.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn partial_overrides_merge_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
[run]
seed = 7

[pretrain]
epochs = 3
lambda = 0.0

[pretrain.budget]
steps = 2
"#,
        )
        .unwrap();
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.pretrain.epochs, 3);
        assert_eq!(cfg.pretrain.lambda, 0.0);
        assert_eq!(cfg.pretrain.budget.steps, 2);
        // untouched keys keep defaults
        assert_eq!(cfg.pretrain.batch_size, 64);
        assert!((cfg.pretrain.budget.step_size - 2.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("[pretrain]\nepoks = 3\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml_str("[pretrain.budget]\nepsilonn = 0.1\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn content_hash_tracks_values() {
        let a = ExperimentConfig::from_toml_str("").unwrap();
        let b = ExperimentConfig::from_toml_str("[run]\nseed = 1\n").unwrap();
        assert_ne!(a.content_hash(), b.content_hash());
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let err = ExperimentConfig::from_toml_str(
            "[dataset]\nname = \"cifar10\"\n[encoder]\ninput_channels = 1\n",
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
