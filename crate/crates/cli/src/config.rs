//! Run configuration: a flat JSON file whose keys flags can override.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use gmn_core::eval::ClassifyMethod;
use gmn_core::model::{GmnConfig, PriorMode, Variant};
use gmn_core::train::TrainConfig;
use gmn_core::{GmnError, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 200-d embeddings, full filter counts, T = 20, two classes.
    Full,
    /// Halved filters, 100-d embeddings, T = 10, one class, 16 latents.
    Reduced,
    /// Smallest working network, for smoke runs.
    Tiny,
}

impl Preset {
    pub fn model(self) -> GmnConfig {
        match self {
            Preset::Full => GmnConfig::default(),
            Preset::Reduced => GmnConfig::reduced(),
            Preset::Tiny => GmnConfig::tiny(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum VariantArg {
    Full,
    NoAttention,
    Vae,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoAttention => Variant::NoAttention,
            VariantArg::Vae => Variant::Vae,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PriorArg {
    DataDependent,
    StandardNormal,
}

impl From<PriorArg> for PriorMode {
    fn from(p: PriorArg) -> Self {
        match p {
            PriorArg::DataDependent => PriorMode::DataDependent,
            PriorArg::StandardNormal => PriorMode::StandardNormal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Likelihood,
    Cosine,
}

impl From<MethodArg> for ClassifyMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Likelihood => ClassifyMethod::Likelihood,
            MethodArg::Cosine => ClassifyMethod::Cosine,
        }
    }
}

/// Every configurable key. In a JSON file all keys are optional; a flag with
/// the same name (dashes for underscores) wins over the file.
#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Model size preset the other model keys modify [default: full].
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Episode length T used for training.
    #[arg(long)]
    pub episode_len: Option<usize>,
    /// Maximum classes per training episode (C_train).
    #[arg(long)]
    pub max_classes: Option<usize>,
    #[arg(long)]
    pub shared_steps: Option<usize>,
    #[arg(long)]
    pub prior_steps: Option<usize>,
    #[arg(long)]
    pub pseudo_count: Option<usize>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    pub prior_mode: Option<PriorArg>,

    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_episodes: Option<usize>,
    #[arg(long)]
    pub total_steps: Option<u64>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    #[arg(long)]
    pub log_interval: Option<u64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub ema_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep wall-clock times out of the metrics log [default: true].
    #[arg(long)]
    pub deterministic: Option<bool>,

    /// Maximum classes per evaluation episode (C_test) [default: 1].
    #[arg(long)]
    pub ctest: Option<usize>,
    /// Evaluation episode length [default: the model's T].
    #[arg(long)]
    pub eval_len: Option<usize>,
    /// Evaluation episodes or trials [default: 1000 full preset, 100 otherwise].
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Importance samples per estimate [default: 1000].
    #[arg(long)]
    pub is_samples: Option<usize>,
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,

    /// Parallel episode workers [default: all cores].
    #[arg(long)]
    pub workers: Option<usize>,
    /// Dataset cache directory [default: $GMN_DATA_ROOT, else ./data].
    #[arg(long)]
    pub data_root: Option<PathBuf>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($f:ident),* $(,)?) => {
        Settings { $($f: $top.$f.clone().or_else(|| $base.$f.clone()),)* }
    };
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| GmnError::Config(format!("{}: {e}", path.display())))
    }

    /// `top` wins wherever it sets a key.
    pub fn overlay(&self, top: &Settings) -> Settings {
        overlay!(
            self, top, preset, latent_dim, episode_len, max_classes, shared_steps, prior_steps, pseudo_count, variant,
            prior_mode, learning_rate, batch_episodes, total_steps, checkpoint_interval, log_interval, clip_norm,
            ema_decay, seed, deterministic, ctest, eval_len, episodes, is_samples, ways, shots, method, workers, data_root,
        )
    }

    pub fn sets_model(&self) -> bool {
        self.preset.is_some()
            || self.latent_dim.is_some()
            || self.episode_len.is_some()
            || self.max_classes.is_some()
            || self.shared_steps.is_some()
            || self.prior_steps.is_some()
            || self.pseudo_count.is_some()
            || self.variant.is_some()
            || self.prior_mode.is_some()
    }

    pub fn model(&self) -> GmnConfig {
        let mut m = self.preset.unwrap_or(Preset::Full).model();
        if let Some(v) = self.latent_dim {
            m.latent_dim = v;
        }
        if let Some(v) = self.episode_len {
            m.episode_len = v;
        }
        if let Some(v) = self.max_classes {
            m.max_classes = v;
        }
        if let Some(v) = self.shared_steps {
            m.shared_steps = v;
        }
        if let Some(v) = self.prior_steps {
            m.prior_steps = v;
        }
        if let Some(v) = self.pseudo_count {
            m.pseudo_count = v;
        }
        if let Some(v) = self.variant {
            m.variant = v.into();
            if m.variant == Variant::Vae && self.prior_mode.is_none() {
                m.prior_mode = PriorMode::StandardNormal;
            }
        }
        if let Some(v) = self.prior_mode {
            m.prior_mode = v.into();
        }
        m
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            model: self.model(),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            beta1: d.beta1,
            beta2: d.beta2,
            epsilon: d.epsilon,
            batch_episodes: self.batch_episodes.unwrap_or(d.batch_episodes),
            total_steps: self.total_steps.unwrap_or(d.total_steps),
            checkpoint_interval: self.checkpoint_interval.unwrap_or(d.checkpoint_interval),
            log_interval: self.log_interval.unwrap_or(d.log_interval),
            clip_norm: self.clip_norm.unwrap_or(d.clip_norm),
            ema_decay: self.ema_decay.unwrap_or(d.ema_decay),
            seed: self.seed.unwrap_or(d.seed),
            deterministic: self.deterministic.unwrap_or(true),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Evaluation parameters for a model trained with `model`.
    pub fn eval(&self, model: &GmnConfig) -> Result<EvalParams> {
        let full = model.arch == gmn_core::Architecture::full();
        let p = EvalParams {
            ctest: self.ctest.unwrap_or(1),
            eval_len: self.eval_len.unwrap_or(model.episode_len),
            episodes: self.episodes.unwrap_or(if full { 1000 } else { 100 }),
            is_samples: self.is_samples.unwrap_or(1000),
            ways: self.ways.unwrap_or(5),
            shots: self.shots.unwrap_or(1),
            method: self.method.map(Into::into).unwrap_or(ClassifyMethod::Likelihood),
            seed: self.seed.unwrap_or(0),
        };
        if p.ctest == 0 || p.eval_len == 0 || p.episodes == 0 || p.is_samples == 0 || p.ways == 0 || p.shots == 0 {
            return Err(GmnError::Config("ctest, eval_len, episodes, is_samples, ways and shots must be positive".into()));
        }
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub ctest: usize,
    pub eval_len: usize,
    pub episodes: usize,
    pub is_samples: usize,
    pub ways: usize,
    pub shots: usize,
    pub method: ClassifyMethod,
    pub seed: u64,
}
