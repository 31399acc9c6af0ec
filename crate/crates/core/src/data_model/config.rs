use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Functional form mapping an accumulated point distance `w` to a score factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum DistanceForm {
    /// `σ(1/w)^d`, 1 at `w = 0`.
    Sigmoid,
    /// `min(1, scale · e^{d/w})`, 1 at `w = 0`.
    Exponential { scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub pdg: bool,
    pub prm: bool,
    pub pnpg: bool,
    pub bms: bool,
    pub mps: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all(true)
    }
}

impl Toggles {
    pub const fn all(on: bool) -> Self {
        Self {
            pdg: on,
            prm: on,
            pnpg: on,
            bms: on,
            mps: on,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 100,
            hidden: 64,
            seed: 42,
        }
    }
}

/// Every tunable of the pipeline. `Default` is the published preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Exponent of the point-distance score.
    pub d: f64,
    pub distance_form: DistanceForm,
    /// Jitter scale of positive box augmentation.
    pub v: f64,
    /// Number of augmented positives per object (1..=4).
    pub ppg_boxes: usize,
    /// Weight of the positive bag loss inside the refinement loss.
    pub alpha: f64,
    /// Weight of the selection loss in the combined loss diagnostic.
    pub lambda: f64,
    /// Auxiliary-mask weight of the segmentation loss; recorded, never trained here.
    pub gamma: f64,
    pub focal_gamma: f64,
    pub t_neg1: f64,
    pub t_neg2: f64,
    pub t_min1: f64,
    pub t_min2: f64,
    pub k: usize,
    pub background_budget: usize,
    pub part_budget: usize,
    pub train: TrainConfig,
    pub toggles: Toggles,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::paper_defaults()
    }
}

pub const PRESET_KEY: &str = "preset";
pub const PAPER_PRESET: &str = "paper_defaults";

impl PipelineConfig {
    pub fn paper_defaults() -> Self {
        Self {
            d: 0.015,
            distance_form: DistanceForm::Sigmoid,
            v: 0.1,
            ppg_boxes: 4,
            alpha: 0.25,
            lambda: 0.25,
            gamma: 0.25,
            focal_gamma: 2.0,
            t_neg1: 0.3,
            t_neg2: 0.5,
            t_min1: 0.6,
            t_min2: 0.3,
            k: 3,
            background_budget: 16,
            part_budget: 8,
            train: TrainConfig::default(),
            toggles: Toggles::default(),
        }
    }

    /// Same config with every module switched off: the single-stage baseline.
    pub fn baseline(&self) -> Self {
        Self {
            toggles: Toggles::all(false),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("alpha", self.alpha),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("t_neg1", self.t_neg1),
            ("t_neg2", self.t_neg2),
            ("t_min1", self.t_min1),
            ("t_min2", self.t_min2),
        ];
        for (field, value) in unit {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::config(field, format!("must lie in [0, 1], got {value}")));
            }
        }
        let positive = [
            ("d", self.d),
            ("v", self.v),
            ("train.learning_rate", self.train.learning_rate),
        ];
        for (field, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::config(field, format!("must be > 0, got {value}")));
            }
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::config("focal_gamma", "must be >= 0"));
        }
        if let DistanceForm::Exponential { scale } = self.distance_form {
            if !(scale > 0.0 && scale <= 1.0) {
                return Err(Error::config("distance_form.scale", "must lie in (0, 1]"));
            }
        }
        if self.k == 0 {
            return Err(Error::config("k", "must be >= 1"));
        }
        if !(1..=4).contains(&self.ppg_boxes) {
            return Err(Error::config("ppg_boxes", "must lie in 1..=4"));
        }
        if self.train.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.train.hidden == 0 {
            return Err(Error::config("train.hidden", "must be >= 1"));
        }
        Ok(())
    }

    /// Parses a config document. An optional `"preset": "paper_defaults"`
    /// key selects the base; every other key overrides it.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        if let Some(obj) = value.as_object_mut() {
            if let Some(preset) = obj.remove(PRESET_KEY) {
                if preset.as_str() != Some(PAPER_PRESET) {
                    return Err(Error::config(PRESET_KEY, format!("unknown preset {preset}")));
                }
            }
        }
        let cfg: PipelineConfig =
            serde_json::from_value(value).map_err(|e| Error::config("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
