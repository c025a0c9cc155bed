//! TOML run configuration.
//!
//! ```toml
//! output_dir = "runs/arousal-audio"
//!
//! [task]
//! kind = "regression"
//! dimension = "arousal"
//!
//! [objective]
//! target = "audio"
//! alpha = 0.5
//! beta = 0.01
//! lambda = 1e-4
//!
//! [train]
//! max_epochs = 30
//! seed = 7
//!
//! [model]
//! encoder_units = [16]
//! head_units = []
//!
//! [data]
//! frame_rate_hz = 25.0
//! train_audio = ["train_audio.csv"]
//! train_video = ["train_video.csv"]
//! dev_audio = ["dev_audio.csv"]
//!
//! [sweep]
//! alpha_values = [0.0, 0.5]
//! beta_values = [0.0, 0.01]
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use emobed::encoders::{HeadLayerKind, ModelConfig};
use emobed::losses::{ObjectiveConfig, RegressionLoss, Task};
use emobed::postprocess::PostprocessGrid;
use emobed::training::{SweepGrid, TrainConfig};
use emobed::triplet::TripletForm;
use emobed::Modality;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    pub target: Modality,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_lambda() -> f64 {
    1e-4
}

/// Optional overrides of the training defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub seed: Option<u64>,
    pub delay_seconds: Option<f64>,
    pub window_frames: Option<usize>,
    pub regression_loss: Option<RegressionLoss>,
    pub triplet_form: Option<TripletForm>,
    pub triplet_threshold: Option<f64>,
    pub triplet_stride: Option<usize>,
    pub max_resamples: Option<usize>,
    pub batches_per_epoch: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Needed only when no data of that modality is configured.
    pub audio_dim: Option<usize>,
    pub video_dim: Option<usize>,
    pub encoder_units: Option<Vec<usize>>,
    pub head_units: Option<Vec<usize>>,
    pub head_layer: Option<HeadLayerKind>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub frame_rate_hz: Option<f64>,
    #[serde(default)]
    pub train_audio: Vec<PathBuf>,
    #[serde(default)]
    pub train_video: Vec<PathBuf>,
    #[serde(default)]
    pub dev_audio: Vec<PathBuf>,
    #[serde(default)]
    pub dev_video: Vec<PathBuf>,
}

impl DataSection {
    pub fn frame_rate(&self) -> f64 {
        self.frame_rate_hz.unwrap_or(25.0)
    }

    fn paths_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        self.train_audio
            .iter_mut()
            .chain(&mut self.train_video)
            .chain(&mut self.dev_audio)
            .chain(&mut self.dev_video)
    }
}

/// Post-processing search grid in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostprocessSection {
    pub windows: Vec<f64>,
    pub shifts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub output_dir: Option<PathBuf>,
    pub task: Task,
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub model: ModelSection,
    pub data: DataSection,
    pub sweep: Option<SweepGrid>,
    pub postprocess: Option<PostprocessSection>,
}

impl RunConfigFile {
    /// Parses, resolves relative paths and checks that every referenced
    /// file exists.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfigFile =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in cfg.data.paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(out) = cfg.output_dir.as_mut() {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        for p in cfg.data.paths_mut() {
            if !p.is_file() {
                return Err(CliError::Config(format!("dataset file not found: {}", p.display())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.objective().validate().map_err(CliError::config)?;
        self.train_config().validate().map_err(CliError::config)?;
        if let Some(grid) = &self.sweep {
            grid.validate().map_err(CliError::config)?;
        }
        let target = self.objective.target;
        let (train, dev) = match target {
            Modality::Audio => (&self.data.train_audio, &self.data.dev_audio),
            Modality::Video => (&self.data.train_video, &self.data.dev_video),
        };
        if train.is_empty() || dev.is_empty() {
            return Err(CliError::Config(format!("[data] needs train_{target} and dev_{target} files")));
        }
        if let Some(pp) = &self.postprocess {
            if pp.windows.is_empty() || pp.shifts.is_empty() {
                return Err(CliError::Config("[postprocess] windows and shifts must be non-empty".into()));
            }
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        let o = &self.objective;
        ObjectiveConfig { target: o.target, alpha: o.alpha, beta: o.beta, lambda: o.lambda, task: self.task }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let mut cfg = TrainConfig::new(self.objective());
        cfg.frame_rate_hz = self.data.frame_rate();
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = t.$field.clone() { cfg.$field = v; })*
            };
        }
        apply!(
            learning_rate,
            batch_size,
            max_epochs,
            seed,
            delay_seconds,
            window_frames,
            regression_loss,
            triplet_form,
            triplet_threshold,
            triplet_stride,
            max_resamples
        );
        if t.batches_per_epoch.is_some() {
            cfg.batches_per_epoch = t.batches_per_epoch;
        }
        cfg
    }

    pub fn model_config(&self, audio_dim: usize, video_dim: usize) -> ModelConfig {
        let mut m = match self.task {
            Task::Regression { .. } => ModelConfig::continuous_default(audio_dim, video_dim, self.task),
            Task::Classification { classes } => ModelConfig::categorical_default(audio_dim, video_dim, classes),
        };
        if let Some(u) = &self.model.encoder_units {
            m.encoder_units = u.clone();
        }
        if let Some(u) = &self.model.head_units {
            m.head_units = u.clone();
        }
        if let Some(k) = self.model.head_layer {
            m.head_layer = k;
        }
        m
    }

    pub fn postprocess_grid(&self) -> PostprocessGrid {
        match &self.postprocess {
            Some(p) => PostprocessGrid { windows: p.windows.clone(), shifts: p.shifts.clone() },
            None => PostprocessGrid::default(),
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialise config: {e}")))
    }
}
