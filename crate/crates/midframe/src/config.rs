//! Model/training configuration, validation, presets, and the flat
//! `key = value` config file format.

use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("missing config key `{0}`")]
    MissingKey(&'static str),
    #[error("unsupported config version {0} (expected {CONFIG_VERSION})")]
    UnsupportedVersion(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Training stage selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Stage 1: train flow estimation through the composition only (no residual).
    FlowOnly,
    /// Stage 2: full model including the refinement residual.
    Full,
    /// Short fine-tune with the downscaled-flow inference path mixed in.
    HdFinetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::FlowOnly => "flow_only",
            Stage::Full => "full",
            Stage::HdFinetune => "hd_finetune",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "flow_only" => Ok(Stage::FlowOnly),
            "full" => Ok(Stage::Full),
            "hd_finetune" => Ok(Stage::HdFinetune),
            other => Err(format!("unknown stage `{other}` (flow_only | full | hd_finetune)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Base feature width C; the pyramid uses [C, 2C, 4C, 8C, 16C].
    pub base_width: usize,
    pub level_channels: [usize; 5],
    /// Cross-frame attention blocks per attention level (levels 3 and 4).
    pub attention_blocks: usize,
    /// Depth-wise kernel size per high-resolution decoder, in order l = 2, 1, 0.
    pub highres_kernels: [usize; 3],
    /// Number of refinement levels, counted down to full resolution.
    pub refinement_levels: usize,
    /// Internal width of each refinement block, coarsest first.
    pub refinement_channels: Vec<usize>,
    /// Interpolation instant; this model family is trained for the midpoint.
    pub timestep: f64,
}

impl ModelConfig {
    /// Preset with C = 16 and two attention blocks per level.
    pub fn small() -> Self {
        Self::with_base_width(16, 2)
    }

    /// Preset with C = 32 and four attention blocks per level.
    pub fn large() -> Self {
        Self::with_base_width(32, 4)
    }

    /// The published family shape at an arbitrary base width (used for
    /// desk-scale runs; presets are `small`/`large`).
    pub fn with_base_width(c: usize, attention_blocks: usize) -> Self {
        ModelConfig {
            base_width: c,
            level_channels: [c, 2 * c, 4 * c, 8 * c, 16 * c],
            attention_blocks,
            highres_kernels: [7, 15, 15],
            refinement_levels: 3,
            refinement_channels: vec![8 * c, 4 * c, 2 * c],
            timestep: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = self.base_width;
        if c == 0 {
            return Err(ConfigError::Invalid("base width must be positive".into()));
        }
        if self.level_channels != [c, 2 * c, 4 * c, 8 * c, 16 * c] {
            return Err(ConfigError::Invalid(format!(
                "level_channels {:?} must equal [C,2C,4C,8C,16C] for C={c}",
                self.level_channels
            )));
        }
        if self.attention_blocks == 0 {
            return Err(ConfigError::Invalid("attention_blocks must be positive".into()));
        }
        for &k in &self.highres_kernels {
            if k % 2 == 0 {
                return Err(ConfigError::Invalid(format!("kernels must be odd, got {k}")));
            }
            if k < 3 {
                return Err(ConfigError::Invalid(format!("kernels must be >= 3, got {k}")));
            }
        }
        if !(2..=5).contains(&self.refinement_levels) {
            return Err(ConfigError::Invalid(format!(
                "refinement_levels {} outside [2,5]",
                self.refinement_levels
            )));
        }
        if self.refinement_channels.len() != self.refinement_levels {
            return Err(ConfigError::Invalid(format!(
                "refinement_channels has {} entries for {} levels",
                self.refinement_channels.len(),
                self.refinement_levels
            )));
        }
        if self.refinement_channels.iter().any(|&w| w == 0) {
            return Err(ConfigError::Invalid("refinement widths must be positive".into()));
        }
        if self.timestep != 0.5 {
            return Err(ConfigError::Invalid(format!(
                "timestep {} unsupported; the model interpolates the midpoint",
                self.timestep
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub crop_size: usize,
    pub stage: Stage,
    pub hd_aug_probability: f64,
    pub hd_downscale: f64,
    /// Charbonnier supervision on the coarse warp states (off by default;
    /// two-stage training was found superior).
    pub aux_supervision: bool,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            lr_start: 2e-4,
            lr_end: 2e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            crop_size: 256,
            stage: Stage::Full,
            hd_aug_probability: 0.5,
            hd_downscale: 0.5,
            aux_supervision: false,
            epochs: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(ConfigError::Invalid("learning rates must be positive".into()));
        }
        if self.lr_end >= self.lr_start {
            return Err(ConfigError::Invalid(format!(
                "lr_end {} must be below lr_start {}",
                self.lr_end, self.lr_start
            )));
        }
        if self.weight_decay <= 0.0 {
            return Err(ConfigError::Invalid("weight_decay must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(ConfigError::Invalid(format!("{name} {b} outside (0,1)")));
            }
        }
        if self.crop_size == 0 || self.crop_size % 32 != 0 {
            return Err(ConfigError::Invalid(format!(
                "crop_size {} must be a positive multiple of 32 (five exact halvings)",
                self.crop_size
            )));
        }
        if !(0.0..=1.0).contains(&self.hd_aug_probability) {
            return Err(ConfigError::Invalid("hd_aug_probability outside [0,1]".into()));
        }
        if !(0.0 < self.hd_downscale && self.hd_downscale < 1.0) {
            return Err(ConfigError::Invalid("hd_downscale must lie in (0,1)".into()));
        }
        if self.epochs == 0 {
            return Err(ConfigError::Invalid("epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ch: f64,
    pub lambda_lap: f64,
    pub lambda_f: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_ch: 1.0, lambda_lap: 1.0, lambda_f: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let ws = [self.lambda_ch, self.lambda_lap, self.lambda_f];
        if ws.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(ConfigError::Invalid("loss weights must be nonnegative".into()));
        }
        if ws.iter().all(|w| *w == 0.0) {
            return Err(ConfigError::Invalid("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a training run needs, as stored in one config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::small(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_file(&self, path: &Path) -> Result<(), ConfigError> {
        Ok(std::fs::write(path, self.render())?)
    }

    pub fn render(&self) -> String {
        let list = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let m = &self.model;
        let t = &self.train;
        let l = &self.loss;
        format!(
            "# midframe run configuration\n\
             version = {CONFIG_VERSION}\n\
             \n\
             # model\n\
             base_width = {}\n\
             attention_blocks = {}\n\
             highres_kernels = {}\n\
             refinement_levels = {}\n\
             refinement_channels = {}\n\
             timestep = {}\n\
             \n\
             # training\n\
             batch_size = {}\n\
             lr_start = {}\n\
             lr_end = {}\n\
             weight_decay = {}\n\
             beta1 = {}\n\
             beta2 = {}\n\
             crop_size = {}\n\
             stage = {}\n\
             hd_aug_probability = {}\n\
             hd_downscale = {}\n\
             aux_supervision = {}\n\
             epochs = {}\n\
             seed = {}\n\
             \n\
             # loss weights\n\
             lambda_ch = {}\n\
             lambda_lap = {}\n\
             lambda_f = {}\n",
            m.base_width,
            m.attention_blocks,
            list(&m.highres_kernels),
            m.refinement_levels,
            list(&m.refinement_channels),
            m.timestep,
            t.batch_size,
            t.lr_start,
            t.lr_end,
            t.weight_decay,
            t.beta1,
            t.beta2,
            t.crop_size,
            t.stage.as_str(),
            t.hd_aug_probability,
            t.hd_downscale,
            t.aux_supervision,
            t.epochs,
            t.seed,
            l.lambda_ch,
            l.lambda_lap,
            l.lambda_f,
        )
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut version_seen = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: lineno,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |msg: String| ConfigError::Parse { line: lineno, msg };
            let as_usize =
                |v: &str| v.parse::<usize>().map_err(|e| bad(format!("bad integer `{v}`: {e}")));
            let as_f64 =
                |v: &str| v.parse::<f64>().map_err(|e| bad(format!("bad number `{v}`: {e}")));
            let as_list = |v: &str| -> Result<Vec<usize>, ConfigError> {
                v.split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| bad(format!("bad integer list `{v}`: {e}")))
            };
            match key {
                "version" => {
                    let v = value
                        .parse::<u64>()
                        .map_err(|e| bad(format!("bad version `{value}`: {e}")))?;
                    if v != CONFIG_VERSION as u64 {
                        return Err(ConfigError::UnsupportedVersion(v));
                    }
                    version_seen = true;
                }
                "base_width" => {
                    let c = as_usize(value)?;
                    cfg.model.base_width = c;
                    cfg.model.level_channels = [c, 2 * c, 4 * c, 8 * c, 16 * c];
                }
                "attention_blocks" => cfg.model.attention_blocks = as_usize(value)?,
                "highres_kernels" => {
                    let ks = as_list(value)?;
                    if ks.len() != 3 {
                        return Err(bad(format!("highres_kernels needs 3 entries, got {}", ks.len())));
                    }
                    cfg.model.highres_kernels = [ks[0], ks[1], ks[2]];
                }
                "refinement_levels" => cfg.model.refinement_levels = as_usize(value)?,
                "refinement_channels" => cfg.model.refinement_channels = as_list(value)?,
                "timestep" => cfg.model.timestep = as_f64(value)?,
                "batch_size" => cfg.train.batch_size = as_usize(value)?,
                "lr_start" => cfg.train.lr_start = as_f64(value)?,
                "lr_end" => cfg.train.lr_end = as_f64(value)?,
                "weight_decay" => cfg.train.weight_decay = as_f64(value)?,
                "beta1" => cfg.train.beta1 = as_f64(value)?,
                "beta2" => cfg.train.beta2 = as_f64(value)?,
                "crop_size" => cfg.train.crop_size = as_usize(value)?,
                "stage" => cfg.train.stage = value.parse().map_err(bad)?,
                "hd_aug_probability" => cfg.train.hd_aug_probability = as_f64(value)?,
                "hd_downscale" => cfg.train.hd_downscale = as_f64(value)?,
                "aux_supervision" => {
                    cfg.train.aux_supervision = value
                        .parse::<bool>()
                        .map_err(|e| bad(format!("bad boolean `{value}`: {e}")))?
                }
                "epochs" => cfg.train.epochs = as_usize(value)?,
                "seed" => {
                    cfg.train.seed =
                        value.parse::<u64>().map_err(|e| bad(format!("bad seed `{value}`: {e}")))?
                }
                "lambda_ch" => cfg.loss.lambda_ch = as_f64(value)?,
                "lambda_lap" => cfg.loss.lambda_lap = as_f64(value)?,
                "lambda_f" => cfg.loss.lambda_f = as_f64(value)?,
                other => return Err(ConfigError::UnknownKey(other.to_string())),
            }
        }
        if !version_seen {
            return Err(ConfigError::MissingKey("version"));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
