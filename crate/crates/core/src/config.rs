//! Experiment configuration: one TOML document drives data generation,
//! training, evaluation, and probes. Unknown keys are rejected so a config
//! file says exactly what runs.

use crate::dataset::{AugmentationPolicy, SplitStrategy, SyntheticWorldConfig};
use crate::error::{Error, Result};
use crate::eval::{OverrideSpec, ProbeConfig};
use crate::model::Variant;
use crate::ssl::DistillationCriterion;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub ssl: SslSection,
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Dataset directory holding `manifest.csv` and `dataset.json`.
    pub dir: PathBuf,
    /// When present, `generate-data` materializes this world under `dir`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticWorldConfig>,
    /// Leading fraction of the manifest used for training; the rest is the
    /// held-out test split.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Labeled/unlabeled partition of the training portion.
    pub split: SplitStrategy,
    /// Weak/strong policy; absent means the built-in default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<AugmentationPolicy>,
}

fn default_train_fraction() -> f64 {
    0.8
}

/// Backbone dimensions shared by teacher and student. Image size, class
/// count, and task mode come from the dataset sidecar at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default = "default_day_fill")]
    pub day_fill: f64,
    #[serde(default)]
    pub cyclic_day: bool,
}

fn default_mlp_ratio() -> f64 {
    4.0
}
fn default_day_fill() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslSection {
    /// `fixmatch` or `defixmatch`.
    pub algorithm: String,
    /// Confidence threshold for hard pseudo-labeling.
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub total_steps: u64,
    pub base_lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Labeled samples per batch.
    pub n_l: usize,
    /// Unlabeled samples per batch.
    pub n_u: usize,
    /// Allow drawing with replacement when a pool is smaller than its
    /// per-batch count.
    #[serde(default)]
    pub replacement: bool,
    /// Unsupervised weight; absent adopts the algorithm's proposed value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_u: Option<f64>,
    /// Distillation weight.
    #[serde(default = "default_lambda_d")]
    pub lambda_d: f64,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    pub seed: u64,
    #[serde(default = "default_log_interval")]
    pub log_interval: u64,
    /// Evaluation hook period in steps; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_interval: u64,
    #[serde(default)]
    pub ablation: AblationSwitches,
}

fn default_weight_decay() -> f64 {
    5e-4
}
fn default_lambda_d() -> f64 {
    1.0
}
fn default_ema_decay() -> f64 {
    0.999
}
fn default_log_interval() -> u64 {
    25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSwitches {
    /// Mask the geolocation input of the teacher.
    #[serde(default)]
    pub no_geo: bool,
    /// Mask the acquisition-time input of the teacher.
    #[serde(default)]
    pub no_time: bool,
    /// Add encoded metadata to the final embedding instead of the metatoken.
    #[serde(default)]
    pub late_fusion: bool,
    /// Train one network instead of the teacher-student pair.
    #[serde(default)]
    pub single_model: bool,
    /// Architecture of the single model (`teacher` self-trains with
    /// metadata; `plain` is the metadata-free baseline).
    #[serde(default = "default_single_variant")]
    pub single_variant: Variant,
    /// Drop the distillation term entirely (forces λ_D = 0).
    #[serde(default)]
    pub no_distill: bool,
    #[serde(default = "default_criterion")]
    pub distill_criterion: DistillationCriterion,
    /// Distill from the teacher's classification token instead of the
    /// metatoken.
    #[serde(default)]
    pub distill_on_cls_token: bool,
    /// Let distillation gradients flow into the teacher.
    #[serde(default)]
    pub no_stop_grad: bool,
}

fn default_single_variant() -> Variant {
    Variant::Teacher
}
fn default_criterion() -> DistillationCriterion {
    DistillationCriterion::Mse
}

impl Default for AblationSwitches {
    fn default() -> Self {
        AblationSwitches {
            no_geo: false,
            no_time: false,
            late_fusion: false,
            single_model: false,
            single_variant: Variant::Teacher,
            no_distill: false,
            distill_criterion: DistillationCriterion::Mse,
            distill_on_cls_token: false,
            no_stop_grad: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Fixed metadata substitutions for the OOD evaluation.
    #[serde(default)]
    pub ood_overrides: Vec<OverrideSpec>,
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.dataset.train_fraction && self.dataset.train_fraction <= 1.0) {
            return Err(Error::InvalidConfig("train_fraction outside (0, 1]".into()));
        }
        if let Some(aug) = &self.dataset.augmentation {
            aug.validate()?;
        }
        if let Some(syn) = &self.dataset.synthetic {
            syn.validate()?;
        }
        if self.train.total_steps == 0 {
            return Err(Error::InvalidConfig("total_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.train.ema_decay) {
            return Err(Error::InvalidConfig("ema_decay outside [0, 1)".into()));
        }
        if self.train.n_l == 0 || self.train.n_u == 0 {
            return Err(Error::InvalidConfig("n_l and n_u must be positive".into()));
        }
        if self.train.base_lr <= 0.0 {
            return Err(Error::InvalidConfig("base_lr must be positive".into()));
        }
        if let Some(l) = self.train.lambda_u {
            if l < 0.0 {
                return Err(Error::InvalidConfig("lambda_u must be non-negative".into()));
            }
        }
        if self.train.lambda_d < 0.0 {
            return Err(Error::InvalidConfig("lambda_d must be non-negative".into()));
        }
        // Algorithm name and tau validate on instantiation.
        crate::ssl::algorithm_by_name(&self.ssl.algorithm, self.ssl.tau)?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical TOML serialization; embedded in every
    /// output so artifacts trace back to their exact config.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        let digest = h.finalize();
        let mut out = String::with_capacity(16);
        for b in &digest[..8] {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

fn synthetic_world(seed: u64) -> SyntheticWorldConfig {
    SyntheticWorldConfig {
        num_classes: 10,
        num_regions: 12,
        image_size: 16,
        samples_total: 10_000,
        spatial_dependence_strength: 0.8,
        seasonal_dependence_strength: 0.8,
        sampling_bias: None,
        label_noise: 0.0,
        seed,
    }
}

/// The desk-scale two-model run on the synthetic world.
fn synthetic_base() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSection {
            dir: PathBuf::from("data/synthetic"),
            synthetic: Some(synthetic_world(0)),
            train_fraction: 0.8,
            split: SplitStrategy::Stratified { labeled_fraction: 0.01 },
            augmentation: None,
        },
        model: ModelSection {
            patch_size: 4,
            embed_dim: 48,
            depth: 2,
            num_heads: 4,
            mlp_ratio: 2.0,
            day_fill: 0.5,
            cyclic_day: false,
        },
        ssl: SslSection { algorithm: "fixmatch".into(), tau: 0.8 },
        train: TrainSection {
            total_steps: 2000,
            base_lr: 1e-3,
            weight_decay: 5e-4,
            n_l: 8,
            n_u: 16,
            replacement: false,
            lambda_u: None,
            lambda_d: 0.05,
            ema_decay: 0.99,
            seed: 0,
            log_interval: 25,
            eval_interval: 500,
            ablation: AblationSwitches::default(),
        },
        eval: EvalSection {
            ood_overrides: vec![
                OverrideSpec::Location { lat: -60.0, lon: 120.0 },
                OverrideSpec::Location { lat: 75.0, lon: -150.0 },
                OverrideSpec::Location { lat: -20.0, lon: -60.0 },
                OverrideSpec::Location { lat: 10.0, lon: 100.0 },
                OverrideSpec::Location { lat: 65.0, lon: 170.0 },
            ],
            probe: Some(ProbeConfig::default()),
        },
    }
}

/// ViT-S dimensions used by the full-scale presets.
fn vit_s(patch_size: usize) -> ModelSection {
    ModelSection {
        patch_size,
        embed_dim: 384,
        depth: 12,
        num_heads: 6,
        mlp_ratio: 4.0,
        day_fill: 0.5,
        cyclic_day: false,
    }
}

/// Named presets. The synthetic family runs on a CPU in minutes; the
/// bigearthnet/eurosat entries document the full-scale hyperparameters and
/// expect externally prepared datasets under their `dir`.
pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let config = match name {
        "synthetic-default" | "fixmatch-stssl-synthetic" => synthetic_base(),
        "defixmatch-stssl-synthetic" => {
            let mut c = synthetic_base();
            c.ssl.algorithm = "defixmatch".into();
            c
        }
        "fixmatch-synthetic" => {
            let mut c = synthetic_base();
            c.train.ablation.single_model = true;
            c.train.ablation.single_variant = Variant::Plain;
            c
        }
        "supervised-synthetic" => {
            let mut c = synthetic_base();
            c.train.ablation.single_model = true;
            c.train.ablation.single_variant = Variant::Plain;
            c.train.lambda_u = Some(0.0);
            c.train.lambda_d = 0.0;
            c
        }
        "ablation-b-no-time" => {
            let mut c = synthetic_base();
            c.train.ablation.no_time = true;
            c
        }
        "ablation-c-no-geo" => {
            let mut c = synthetic_base();
            c.train.ablation.no_geo = true;
            c
        }
        "ablation-d-late-fusion" => {
            let mut c = synthetic_base();
            c.train.ablation.late_fusion = true;
            c
        }
        "ablation-e-single-model" => {
            let mut c = synthetic_base();
            c.train.ablation.single_model = true;
            c.train.ablation.single_variant = Variant::Teacher;
            c
        }
        "ablation-f-no-distill" => {
            let mut c = synthetic_base();
            c.train.ablation.no_distill = true;
            c
        }
        "ablation-g-mae-distill" => {
            let mut c = synthetic_base();
            c.train.ablation.distill_criterion = DistillationCriterion::Mae;
            c
        }
        "ablation-h-cosine-distill" => {
            let mut c = synthetic_base();
            c.train.ablation.distill_criterion = DistillationCriterion::Cosine;
            c
        }
        "ablation-i-cls-distill" => {
            let mut c = synthetic_base();
            c.train.ablation.distill_on_cls_token = true;
            c
        }
        "ablation-j-no-stop-grad" => {
            let mut c = synthetic_base();
            c.train.ablation.no_stop_grad = true;
            c
        }
        "ablation-k-lambda-0.1" => {
            let mut c = synthetic_base();
            c.train.lambda_d = 0.1;
            c
        }
        "ablation-l-lambda-0.5" => {
            let mut c = synthetic_base();
            c.train.lambda_d = 0.5;
            c
        }
        "ablation-m-lambda-2.0" => {
            let mut c = synthetic_base();
            c.train.lambda_d = 2.0;
            c
        }
        "bigearthnet-1pct" => ExperimentConfig {
            dataset: DatasetSection {
                dir: PathBuf::from("data/bigearthnet"),
                synthetic: None,
                train_fraction: 0.8,
                split: SplitStrategy::Stratified { labeled_fraction: 0.01 },
                augmentation: None,
            },
            model: vit_s(16),
            ssl: SslSection { algorithm: "fixmatch".into(), tau: 0.95 },
            train: TrainSection {
                total_steps: 64_000,
                base_lr: 1e-4,
                weight_decay: 5e-4,
                n_l: 64,
                n_u: 448,
                replacement: false,
                lambda_u: None,
                lambda_d: 1.0,
                ema_decay: 0.999,
                seed: 0,
                log_interval: 100,
                eval_interval: 4000,
                ablation: AblationSwitches::default(),
            },
            eval: EvalSection::default(),
        },
        n if n.starts_with("eurosat-n") => {
            let labels: usize = n.strip_prefix("eurosat-n")?.parse().ok()?;
            if ![10, 20, 40, 80].contains(&labels) {
                return None;
            }
            ExperimentConfig {
                dataset: DatasetSection {
                    dir: PathBuf::from("data/eurosat"),
                    synthetic: None,
                    train_fraction: 0.8,
                    // Total labels spread evenly over the 10 classes.
                    split: SplitStrategy::ExactPerClass { n: labels / 10 },
                    augmentation: None,
                },
                model: vit_s(2),
                ssl: SslSection { algorithm: "fixmatch".into(), tau: 0.95 },
                train: TrainSection {
                    total_steps: 204_800,
                    base_lr: 5e-5,
                    weight_decay: 5e-4,
                    n_l: 8,
                    n_u: 8,
                    replacement: true,
                    lambda_u: None,
                    lambda_d: 0.01,
                    ema_decay: 0.999,
                    seed: 0,
                    log_interval: 100,
                    eval_interval: 10_000,
                    ablation: AblationSwitches::default(),
                },
                eval: EvalSection::default(),
            }
        }
        _ => return None,
    };
    Some(config)
}

pub fn preset_names() -> Vec<&'static str> {
    vec![
        "synthetic-default",
        "fixmatch-stssl-synthetic",
        "defixmatch-stssl-synthetic",
        "fixmatch-synthetic",
        "supervised-synthetic",
        "ablation-b-no-time",
        "ablation-c-no-geo",
        "ablation-d-late-fusion",
        "ablation-e-single-model",
        "ablation-f-no-distill",
        "ablation-g-mae-distill",
        "ablation-h-cosine-distill",
        "ablation-i-cls-distill",
        "ablation-j-no-stop-grad",
        "ablation-k-lambda-0.1",
        "ablation-l-lambda-0.5",
        "ablation-m-lambda-2.0",
        "bigearthnet-1pct",
        "eurosat-n10",
        "eurosat-n20",
        "eurosat-n40",
        "eurosat-n80",
    ]
}
