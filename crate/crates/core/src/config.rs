//! Run configuration: a TOML tree layered over a named preset.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::adversary::DiscriminatorConfig;
use crate::distortion::{FilterMode, LossWeights};
use crate::filter::{FilterConfig, InitMode};
use crate::nn::LrSchedule;
use crate::surrogate::SurrogateConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    DeskScale,
    PaperScale,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "desk_scale" | "desk" => Ok(Preset::DeskScale),
            "paper_scale" | "paper" => Ok(Preset::PaperScale),
            other => Err(Error::Config(format!("unknown preset `{other}` (desk_scale | paper_scale)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Directory of training images; synthetic dead-leaves images when absent.
    pub corpus: Option<PathBuf>,
    pub synthetic_count: usize,
    pub synthetic_size: usize,
    /// Side of the square training crops.
    pub crop: usize,
    /// Random resize of the shorter side into this range before cropping.
    pub resize_short_side: Option<[usize; 2]>,
    /// Largest upscaling factor the random resize may apply.
    pub max_upscale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub batch_size: usize,
    /// `(iterations, learning rate)` stages, run back to back.
    pub stages: Vec<(u64, f64)>,
    /// Rescale gradients whose global L2 norm exceeds this.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl ScheduleConfig {
    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule { stages: self.stages.clone() }
    }

    pub fn total_iterations(&self) -> u64 {
        self.stages.iter().map(|s| s.0).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSection {
    pub mode: FilterMode,
    pub network: FilterConfig,
    /// Overrides the `500 * lambda_S` derivation in MS-SSIM retargeting.
    pub lambda_t: Option<f64>,
    /// Overrides the per-mode default weights entirely.
    pub weights: Option<LossWeights>,
    /// Classifier checkpoint whose activations feed the GAN-mode perceptual
    /// term; a fixed randomly initialized stack when absent.
    #[serde(default)]
    pub perceptual: Option<PathBuf>,
    /// Largest random offset of the window the surrogate sees during
    /// retargeting, so the filter cannot exploit its fixed 16 px grid.
    /// Zero disables it.
    #[serde(default = "default_shift_jitter")]
    pub shift_jitter: usize,
}

fn default_shift_jitter() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub codec: String,
    pub quality: i32,
    /// Frozen classifier checkpoint; trained on the task data when absent.
    pub classifier: Option<PathBuf>,
    /// Directory with one subdirectory of images per class (sorted names
    /// give the labels); synthetic gratings when absent.
    #[serde(default)]
    pub labeled_corpus: Option<PathBuf>,
    pub image_size: usize,
    pub train_images: usize,
    pub classifier_iterations: u64,
    pub classifier_lr: f64,
    /// Attempts per codec call before task training halts.
    pub codec_attempts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub data: DataConfig,
    pub surrogate: SurrogateConfig,
    pub surrogate_schedule: ScheduleConfig,
    /// Surrogate checkpoint used by filter training.
    pub surrogate_checkpoint: Option<PathBuf>,
    pub filter: FilterSection,
    pub filter_schedule: ScheduleConfig,
    pub adversary: DiscriminatorConfig,
    pub task: TaskConfig,
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::PaperScale => {
                let schedule = ScheduleConfig { batch_size: 8, stages: vec![(400_000, 1e-4), (100_000, 1e-5)], clip_norm: Some(1.0) };
                TrainConfig {
                    preset,
                    seed: 0,
                    checkpoint_every: 10_000,
                    data: DataConfig {
                        corpus: None,
                        synthetic_count: 1024,
                        synthetic_size: 512,
                        crop: 256,
                        resize_short_side: Some([512, 1024]),
                        max_upscale: 2.0,
                    },
                    surrogate: SurrogateConfig::paper_scale(0.2),
                    surrogate_schedule: schedule.clone(),
                    surrogate_checkpoint: None,
                    filter: FilterSection {
                        mode: FilterMode::MsssimRetarget,
                        network: FilterConfig::default(),
                        lambda_t: None,
                        weights: None,
                        perceptual: None,
                        shift_jitter: default_shift_jitter(),
                    },
                    filter_schedule: schedule,
                    adversary: DiscriminatorConfig::default(),
                    task: TaskConfig {
                        codec: "jpeg".into(),
                        quality: 30,
                        classifier: None,
                        labeled_corpus: None,
                        image_size: 224,
                        train_images: 100_000,
                        classifier_iterations: 100_000,
                        classifier_lr: 1e-3,
                        codec_attempts: 2,
                    },
                }
            }
            Preset::DeskScale => TrainConfig {
                preset,
                seed: 0,
                checkpoint_every: 1000,
                data: DataConfig {
                    corpus: None,
                    synthetic_count: 64,
                    synthetic_size: 256,
                    crop: 96,
                    resize_short_side: None,
                    max_upscale: 2.0,
                },
                surrogate: SurrogateConfig::desk_scale(0.2),
                surrogate_schedule: ScheduleConfig { batch_size: 8, stages: vec![(4000, 1e-3), (1000, 1e-4)], clip_norm: Some(1.0) },
                surrogate_checkpoint: None,
                filter: FilterSection {
                    mode: FilterMode::MsssimRetarget,
                    network: FilterConfig::desk_scale(),
                    lambda_t: None,
                    weights: None,
                    perceptual: None,
                    shift_jitter: default_shift_jitter(),
                },
                filter_schedule: ScheduleConfig { batch_size: 8, stages: vec![(4000, 1e-4), (1000, 1e-5)], clip_norm: Some(1.0) },
                adversary: DiscriminatorConfig::desk_scale(),
                task: TaskConfig {
                    codec: "jpeg".into(),
                    quality: 30,
                    classifier: None,
                    labeled_corpus: None,
                    image_size: 64,
                    train_images: 512,
                    classifier_iterations: 1000,
                    classifier_lr: 2e-3,
                    codec_attempts: 2,
                },
            },
        }
    }

    /// Parses `text` as overrides on top of its `preset` key (or `fallback`).
    pub fn from_toml_str(text: &str, fallback: Preset) -> Result<Self> {
        let overrides: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let preset = match overrides.get("preset") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => fallback,
        };
        Self::layered(preset, overrides)
    }

    /// The preset with `overrides` merged in key by key.
    pub fn layered(preset: Preset, overrides: toml::Table) -> Result<Self> {
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, overrides);
        base.insert("preset".into(), toml::Value::String(preset_name(preset).into()));
        let cfg: TrainConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.surrogate.validate()?;
        self.filter.network.validate()?;
        for (name, s) in [("surrogate_schedule", &self.surrogate_schedule), ("filter_schedule", &self.filter_schedule)] {
            if s.batch_size == 0 || s.stages.is_empty() {
                return Err(Error::Config(format!("{name} needs a positive batch size and at least one stage")));
            }
            if s.stages.iter().any(|&(_, lr)| !(lr >= 0.0 && lr.is_finite())) {
                return Err(Error::Config(format!("{name} has an invalid learning rate")));
            }
            if s.clip_norm.is_some_and(|c| !(c > 0.0)) {
                return Err(Error::Config(format!("{name}.clip_norm must be positive")));
            }
        }
        if self.data.crop < 16 {
            return Err(Error::Config("training crops must be at least 16 px".into()));
        }
        if let Some([lo, hi]) = self.data.resize_short_side {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("invalid resize range [{lo}, {hi}]")));
            }
        }
        if let Some(l) = self.filter.lambda_t {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda_t must be positive, got {l}")));
            }
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    /// Filter loss weights for the configured mode.
    pub fn loss_weights(&self) -> LossWeights {
        if let Some(w) = self.filter.weights {
            return w;
        }
        match self.filter.mode {
            FilterMode::MsssimRetarget => {
                let mut w = LossWeights::retarget(self.surrogate.lambda);
                if let Some(l) = self.filter.lambda_t {
                    w.lambda_t = l;
                }
                w
            }
            FilterMode::Gan => LossWeights::gan_preset(),
            FilterMode::Task => LossWeights::task_default(),
        }
    }

    /// Filter network config, with the low-variance init task mode requires.
    pub fn filter_network(&self) -> FilterConfig {
        let mut net = self.filter.network.clone();
        if self.filter.mode == FilterMode::Task && net.init_mode != InitMode::LowVariance {
            log::warn!("task mode requires low_variance init; overriding `{:?}`", net.init_mode);
            net.init_mode = InitMode::LowVariance;
        }
        net
    }
}

pub fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::DeskScale => "desk_scale",
        Preset::PaperScale => "paper_scale",
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Invocation record of one CLI run, written next to its outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub subcommand: String,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub adapters: Option<PathBuf>,
    pub preset: Option<String>,
    pub codec: Option<String>,
    pub qualities: Option<Vec<i32>>,
    pub metric: Option<String>,
    pub filter_checkpoint: Option<PathBuf>,
    pub surrogate_checkpoint: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_schedule() {
        let c = TrainConfig::preset(Preset::PaperScale);
        assert_eq!(c.filter_schedule.batch_size, 8);
        assert_eq!(c.filter_schedule.stages, vec![(400_000, 1e-4), (100_000, 1e-5)]);
        assert_eq!(c.surrogate.latent_channels, 320);
        let lr = c.filter_schedule.lr_schedule();
        assert_eq!(lr.lr_at(399_999), 1e-4);
        assert_eq!(lr.lr_at(400_000), 1e-5);
    }

    #[test]
    fn lambda_t_is_derived_from_lambda_s() {
        for (s, t) in [(0.1, 50.0), (0.2, 100.0), (0.4, 200.0)] {
            let c = TrainConfig::from_toml_str(&format!("[surrogate]\nlambda = {s}\n"), Preset::DeskScale).unwrap();
            assert_eq!(c.loss_weights().lambda_t, t);
        }
    }

    #[test]
    fn overrides_layer_on_the_named_preset() {
        let c = TrainConfig::from_toml_str("preset = \"paper_scale\"\nseed = 7\n[filter_schedule]\nbatch_size = 2\n", Preset::DeskScale)
            .unwrap();
        assert_eq!(c.preset, Preset::PaperScale);
        assert_eq!((c.seed, c.filter_schedule.batch_size), (7, 2));
        assert_eq!(c.filter_schedule.stages.len(), 2);
        let back = TrainConfig::from_toml_str(&c.to_toml(), Preset::DeskScale).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(TrainConfig::from_toml_str("[surrogate]\nlambda = -1.0\n", Preset::DeskScale).is_err());
        assert!(TrainConfig::from_toml_str("preset = \"huge\"\n", Preset::DeskScale).is_err());
        assert!(TrainConfig::from_toml_str("[filter]\nmode = \"nope\"\n", Preset::DeskScale).is_err());
    }

    #[test]
    fn task_mode_forces_low_variance() {
        let c = TrainConfig::from_toml_str("[filter]\nmode = \"task\"\n", Preset::DeskScale).unwrap();
        assert_eq!(c.filter_network().init_mode, InitMode::LowVariance);
        assert_eq!(c.loss_weights(), LossWeights::task_default());
    }
}
