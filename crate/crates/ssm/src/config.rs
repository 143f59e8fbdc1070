//! Experiment configuration: strict JSON with every default
//! materialized, so a saved resolved config reproduces a run exactly.

use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::data::SyntheticWorldSpec;
use crate::dpm::{DpmInit, DpmMode};
use crate::error::{Error, Result};
use crate::tsp::PromptStyle;

/// Which pieces of the full model are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    /// Single-task learning: one linear-head model per task, trained on
    /// its own dataset only, with its own trunk.
    Stl,
    /// Joint training with plain linear heads.
    Baseline,
    /// Joint training with textual semantic prototypes.
    Tsp,
    /// Prototypes plus dynamic prior mapping.
    TspDpm,
}

/// Named learning-rate pairs (encoder, heads). The desk preset keeps
/// the usual 100:1 head/encoder ratio of full-scale fine-tuning but
/// scaled up, since a tiny randomly initialized trunk cannot move at
/// 1e-6 in 30 epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatePreset {
    DeskRates,
    FullScaleRates,
}

impl RatePreset {
    pub fn rates(self) -> (f64, f64) {
        match self {
            RatePreset::DeskRates => (1e-3, 1e-2),
            RatePreset::FullScaleRates => (1e-6, 1e-4),
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub arch: Arch,
    pub dpm_mode: DpmMode,
    pub dpm_init: DpmInit,
    pub prompt_style: PromptStyle,
    pub context_length: usize,
    pub lambda: f64,
    pub tau: f64,
    pub tau_m: f64,
    pub alpha0: f64,
    pub beta0: f64,
    /// When set, overrides `lr_encoder`/`lr_heads`.
    pub preset: Option<RatePreset>,
    pub lr_encoder: f64,
    pub lr_heads: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_dfer: usize,
    pub batch_au: usize,
    pub data_fraction_fe: f64,
    pub data_fraction_au: f64,
    pub d_tok: usize,
    pub backbone: BackboneConfig,
    pub world: SyntheticWorldSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let (lr_encoder, lr_heads) = RatePreset::DeskRates.rates();
        ExperimentConfig {
            seed: 0,
            arch: Arch::TspDpm,
            dpm_mode: DpmMode::LearnableDual,
            dpm_init: DpmInit::Prior,
            prompt_style: PromptStyle::Compound,
            context_length: 8,
            lambda: 2.0,
            tau: 0.01,
            tau_m: 0.01,
            alpha0: 0.4,
            beta0: 0.4,
            preset: None,
            lr_encoder,
            lr_heads,
            weight_decay: 1e-4,
            epochs: 30,
            batch_dfer: 8,
            batch_au: 8,
            data_fraction_fe: 0.2,
            data_fraction_au: 0.05,
            d_tok: 16,
            backbone: BackboneConfig::default(),
            world: SyntheticWorldSpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// Applies the preset (if any) and checks every invariant. Returns
    /// the fully resolved config.
    pub fn resolve(mut self) -> Result<ExperimentConfig> {
        if let Some(p) = self.preset {
            let (e, h) = p.rates();
            self.lr_encoder = e;
            self.lr_heads = h;
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("tau", self.tau),
            ("tau_m", self.tau_m),
            ("lr_encoder", self.lr_encoder),
            ("lr_heads", self.lr_heads),
        ] {
            let must_be_positive = name != "lambda";
            if !v.is_finite() || v < 0.0 || (must_be_positive && v == 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_dfer == 0 || self.batch_au == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        for (name, f) in [
            ("data_fraction_fe", self.data_fraction_fe),
            ("data_fraction_au", self.data_fraction_au),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {f}")));
            }
        }
        if self.d_tok == 0 {
            return Err(Error::Config("d_tok must be positive".into()));
        }
        self.world.validate()?;
        if self.world.d_raw != self.backbone.d_raw {
            return Err(Error::Config(format!(
                "world d_raw {} does not match backbone d_raw {}",
                self.world.d_raw, self.backbone.d_raw
            )));
        }
        Ok(self)
    }

    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve()
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn num_expressions(&self) -> usize {
        self.world.expressions.len()
    }

    pub fn num_aus(&self) -> usize {
        self.world.au_ids.len()
    }
}
