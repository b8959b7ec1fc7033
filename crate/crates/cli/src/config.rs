//! Flat, commented TOML run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use semcons::contrastive::ContrastiveConfig;
use semcons::model::{CropConfig, LossWeights, ModelConfig, TrainConfig};
use semcons::nn::AdamConfig;
use semcons::rsmi::RsmiConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DatasetSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error(transparent)]
    Syntax(#[from] toml::de::Error),
    #[error(transparent)]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data_dir: String,
    pub image_size: usize,
    pub train_images: usize,
    pub eval_images: usize,
    pub source_disk: f64,
    pub source_stripe: f64,
    pub target_disk: f64,
    pub target_stripe: f64,
    pub target_shift: [i32; 3],
    pub texture_amplitude: u8,
    pub data_seed: u64,

    pub widths: Vec<usize>,
    pub res_blocks: usize,
    pub embed_dim: usize,
    pub disc_width: usize,
    pub attention_hidden: usize,

    pub tau: f64,
    pub beta: f64,
    pub rho: f64,
    pub ridge: f64,
    pub max_basis: usize,
    pub patch_count: usize,
    pub lambda_gan: f64,
    pub lambda_hdce: f64,
    pub lambda_ts: f64,

    pub global_h: usize,
    pub global_w: usize,
    pub local_h: usize,
    pub local_w: usize,
    pub infer_stride: usize,
    pub global_min_fraction: f64,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    pub seed: u64,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub precision: Precision,
    pub ablate_lambda_ts: Vec<f64>,
    pub ablate_seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let d = DatasetSpec::default();
        let t = TrainConfig::default();
        Self {
            data_dir: "data".into(),
            image_size: d.size,
            train_images: d.train_count,
            eval_images: d.eval_count,
            source_disk: d.source_freq[0],
            source_stripe: d.source_freq[1],
            target_disk: d.target_freq[0],
            target_stripe: d.target_freq[1],
            target_shift: d.target_shift,
            texture_amplitude: d.texture_amplitude,
            data_seed: d.seed,
            widths: t.model.widths,
            res_blocks: t.model.res_blocks,
            embed_dim: t.model.embed_dim,
            disc_width: t.model.disc_width,
            attention_hidden: t.model.attention_hidden,
            tau: t.contrastive.tau,
            beta: t.contrastive.beta,
            rho: t.rsmi.mix,
            ridge: t.rsmi.ridge,
            max_basis: t.rsmi.max_basis,
            patch_count: t.patch_count,
            lambda_gan: t.weights.gan,
            lambda_hdce: t.weights.hdce,
            lambda_ts: t.weights.ts,
            global_h: t.crop.global_h,
            global_w: t.crop.global_w,
            local_h: t.crop.local_h,
            local_w: t.crop.local_w,
            infer_stride: t.crop.infer_stride,
            global_min_fraction: t.crop.global_min_fraction,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            seed: 0,
            steps: 2000,
            checkpoint_every: 500,
            precision: Precision::F32,
            ablate_lambda_ts: vec![0.0, 1.0, 2.0],
            ablate_seeds: vec![0, 1, 2],
        }
    }
}

/// One comment line per key, in field order.
const COMMENTS: &[(&str, &str)] = &[
    ("data_dir", "dataset directory, relative to the config file unless absolute"),
    ("image_size", "side of the square synthetic images"),
    ("train_images", "training images per domain"),
    ("eval_images", "held-out labelled source images"),
    ("source_disk", "disk pixel fraction in the source domain"),
    ("source_stripe", "stripe pixel fraction in the source domain"),
    ("target_disk", "disk pixel fraction in the target domain"),
    ("target_stripe", "stripe pixel fraction in the target domain"),
    ("target_shift", "RGB offset from source colors to target colors"),
    ("texture_amplitude", "peak 8-bit amplitude of the target textures"),
    ("data_seed", "seed of the synthetic dataset"),
    ("widths", "channel widths of the stride-2 encoder blocks"),
    ("res_blocks", "residual blocks at the bottleneck"),
    ("embed_dim", "projection head output dimension"),
    ("disc_width", "first-layer width of the patch discriminators"),
    ("attention_hidden", "hidden channels of the scale-attention head"),
    ("tau", "contrastive temperature"),
    ("beta", "hard-negative concentration; 0 weights negatives uniformly"),
    ("rho", "mixing weight of the relative divergence"),
    ("ridge", "ridge penalty of the kernel fit"),
    ("max_basis", "maximum kernel centers"),
    ("patch_count", "patches sampled per encoder layer"),
    ("lambda_gan", "adversarial loss weight"),
    ("lambda_hdce", "hard-negative contrastive loss weight"),
    ("lambda_ts", "texture-structure dependence loss weight"),
    ("global_h", "global crop height after resizing"),
    ("global_w", "global crop width after resizing"),
    ("local_h", "local crop height"),
    ("local_w", "local crop width"),
    ("infer_stride", "tile stride of local inference"),
    ("global_min_fraction", "smallest global rect side as a fraction of the image side"),
    ("lr", "Adam learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator epsilon"),
    ("seed", "training seed"),
    ("steps", "training steps"),
    ("checkpoint_every", "steps between checkpoints; the final one is always written"),
    ("precision", "\"f32\" or \"f64\""),
    ("ablate_lambda_ts", "lambda_ts values swept by ablate"),
    ("ablate_seeds", "seeds swept by ablate"),
];

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        let body = toml::to_string(self)?;
        let mut out = String::new();
        for line in body.lines() {
            let key = line.split(" = ").next().unwrap_or_default();
            if let Some((_, c)) = COMMENTS.iter().find(|(k, _)| *k == key) {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("# {c}\n"));
            }
            out.push_str(line);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn dataset(&self) -> DatasetSpec {
        DatasetSpec {
            size: self.image_size,
            train_count: self.train_images,
            eval_count: self.eval_images,
            source_freq: [self.source_disk, self.source_stripe],
            target_freq: [self.target_disk, self.target_stripe],
            target_shift: self.target_shift,
            texture_amplitude: self.texture_amplitude,
            seed: self.data_seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                widths: self.widths.clone(),
                res_blocks: self.res_blocks,
                embed_dim: self.embed_dim,
                disc_width: self.disc_width,
                attention_hidden: self.attention_hidden,
            },
            weights: LossWeights {
                gan: self.lambda_gan,
                hdce: self.lambda_hdce,
                ts: self.lambda_ts,
            },
            contrastive: ContrastiveConfig {
                tau: self.tau,
                beta: self.beta,
                n_mult: None,
            },
            rsmi: RsmiConfig {
                ridge: self.ridge,
                mix: self.rho,
                max_basis: self.max_basis,
            },
            patch_count: self.patch_count,
            crop: CropConfig {
                global_h: self.global_h,
                global_w: self.global_w,
                local_h: self.local_h,
                local_w: self.local_w,
                infer_stride: self.infer_stride,
                global_min_fraction: self.global_min_fraction,
            },
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.dataset().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let train = self.train();
        train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        train
            .check_image(self.image_size, self.image_size)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.checkpoint_every == 0 {
            return invalid("checkpoint_every must be positive".into());
        }
        if self.ablate_lambda_ts.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return invalid(format!("ablate_lambda_ts must be finite and >= 0: {:?}", self.ablate_lambda_ts));
        }
        Ok(())
    }

    /// `data_dir` resolved against the directory of the config file.
    pub fn resolve_data_dir(&self, config_path: Option<&Path>) -> PathBuf {
        let p = PathBuf::from(&self.data_dir);
        match config_path.and_then(Path::parent) {
            Some(base) if p.is_relative() => base.join(p),
            _ => p,
        }
    }
}
