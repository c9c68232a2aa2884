//! The pipeline configuration document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use srus_core::clutterfilt::FilterConfig;
use srus_core::fieldsim::{default_snr_levels, DatasetConfig, DatasetSplit, GridSpec, RenderConfig, SceneConfig};
use srus_core::network::NetConfig;
use srus_core::registry::StrategySpec;
use srus_core::srusform::{FormConfig, WindowPlan};
use srus_core::training::{LossWeights, OptimConfig, TrainConfig};
use srus_core::{Result, SrusError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub count: usize,
    pub hflip_fraction: f64,
    pub crop_margin_px: usize,
    pub allow_any_snr: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            count: d.count,
            hflip_fraction: d.hflip_fraction,
            crop_margin_px: d.crop_margin_px,
            allow_any_snr: d.allow_any_snr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub w_detect: f64,
    pub w_x: f64,
    pub w_z: f64,
    pub pos_weight: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            w_detect: w.w_detect,
            w_x: w.w_x,
            w_z: w.w_z,
            pos_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    pub threshold: f64,
    pub log_compress: bool,
    pub enhancer: StrategySpec,
}

impl Default for InferSection {
    fn default() -> Self {
        let f = FormConfig::default();
        Self {
            threshold: f.threshold,
            log_compress: f.log_compress,
            enhancer: f.enhancer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Largest distance counted as a true positive.
    pub radius_um: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            radius_um: GridSpec::default().pitch_um,
        }
    }
}

/// Fallback locations used when a command-line path is omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    pub scene: SceneConfig,
    pub render: RenderConfig,
    pub snr_levels: Vec<f64>,
    pub dataset: DatasetSection,
    pub net: NetConfig,
    pub optim: OptimConfig,
    pub loss: LossSection,
    pub window: WindowPlan,
    pub filter: FilterConfig,
    pub infer: InferSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
    pub master_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            scene: SceneConfig::default(),
            render: RenderConfig::default(),
            snr_levels: default_snr_levels(),
            dataset: DatasetSection::default(),
            net: NetConfig::default(),
            optim: OptimConfig::default(),
            loss: LossSection::default(),
            window: WindowPlan::default(),
            filter: FilterConfig::default(),
            infer: InferSection::default(),
            eval: EvalSection::default(),
            paths: PathsSection::default(),
            master_seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Read and validate a config file. Unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SrusError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            SrusError::Config(msg) => SrusError::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| SrusError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.scene.validate()?;
        self.net.validate()?;
        self.window.validate()?;
        if self.window.m != self.net.m {
            return Err(SrusError::config(format!(
                "window.m={} but net.m={}",
                self.window.m, self.net.m
            )));
        }
        if self.grid.upsample_k != self.net.k_bins {
            return Err(SrusError::config(format!(
                "grid.upsample_k={} but net.k_bins={}",
                self.grid.upsample_k, self.net.k_bins
            )));
        }
        if !(self.eval.radius_um > 0.0 && self.eval.radius_um.is_finite()) {
            return Err(SrusError::config("eval.radius_um must be positive"));
        }
        if !(0.0..=1.0).contains(&self.infer.threshold) {
            return Err(SrusError::config("infer.threshold must be in [0, 1]"));
        }
        self.dataset_config(DatasetSplit::Train).validate()?;
        self.train_config().validate()
    }

    pub fn dataset_config(&self, split: DatasetSplit) -> DatasetConfig {
        DatasetConfig {
            grid: self.grid,
            scene: self.scene.clone(),
            render: self.render.clone(),
            snr_levels: self.snr_levels.clone(),
            count: self.dataset.count,
            seed: self.master_seed,
            split,
            hflip_fraction: self.dataset.hflip_fraction,
            crop_margin_px: self.dataset.crop_margin_px,
            allow_any_snr: self.dataset.allow_any_snr,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optim: OptimConfig {
                seed: self.master_seed,
                ..self.optim
            },
            loss: LossWeights {
                w_detect: self.loss.w_detect,
                w_x: self.loss.w_x,
                w_z: self.loss.w_z,
            },
            pos_weight: self.loss.pos_weight,
        }
    }

    pub fn form_config(&self) -> FormConfig {
        FormConfig {
            window: self.window,
            threshold: self.infer.threshold,
            apply_filter: true,
            filter: self.filter.clone(),
            log_compress: self.infer.log_compress,
            enhancer: self.infer.enhancer.clone(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
