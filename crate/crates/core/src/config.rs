//! Pipeline hyperparameters and dataset presets.

use serde::{Deserialize, Serialize};

use crate::clustering::{ClusteringConfig, Metric};
use crate::error::{Error, Result};
use crate::lpcam::LpcamMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Voc,
    Coco,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voc" => Ok(Preset::Voc),
            "coco" => Ok(Preset::Coco),
            other => Err(Error::InvalidParameter(format!("unknown preset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub k: usize,
    pub tau: f64,
    pub mu_f: f64,
    pub mu_b: f64,
    pub bg_threshold: f64,
    pub sample_cap: Option<usize>,
    pub metric: Metric,
    pub max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
    pub mode: LpcamMode,
}

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        let voc = Self {
            k: 12,
            tau: 0.1,
            mu_f: 0.9,
            mu_b: 0.9,
            bg_threshold: 0.3,
            sample_cap: None,
            metric: Metric::Cosine,
            max_iters: 100,
            tol: 1e-5,
            restarts: 3,
            seed: 0,
            mode: LpcamMode::Full,
        };
        match preset {
            Preset::Voc => voc,
            Preset::Coco => Self {
                k: 20,
                tau: 0.25,
                mu_b: 0.5,
                sample_cap: Some(100),
                ..voc
            },
        }
    }

    pub fn clustering(&self) -> ClusteringConfig {
        ClusteringConfig {
            k: self.k,
            metric: self.metric,
            max_iters: self.max_iters,
            tol: self.tol,
            restarts: self.restarts,
            seed: self.seed,
            sample_cap: self.sample_cap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.clustering().validate()?;
        for (name, v) in [("tau", self.tau), ("mu_f", self.mu_f), ("mu_b", self.mu_b)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidParameter(format!("{name} must be in (0, 1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.bg_threshold) {
            return Err(Error::InvalidParameter(format!(
                "bg_threshold must be in [0, 1], got {}",
                self.bg_threshold
            )));
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &ConfigOverrides) {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = o.$field.clone() {
                    self.$field = v;
                }
            )*};
        }
        set!(k, tau, mu_f, mu_b, bg_threshold, metric, max_iters, tol, restarts, seed, mode);
        if let Some(cap) = o.sample_cap {
            self.sample_cap = (cap > 0).then_some(cap);
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::preset(Preset::Voc)
    }
}

/// Partial configuration, as read from a TOML file or assembled from flags.
/// A `sample_cap` of 0 means "no cap".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub preset: Option<Preset>,
    pub k: Option<usize>,
    pub tau: Option<f64>,
    pub mu_f: Option<f64>,
    pub mu_b: Option<f64>,
    pub bg_threshold: Option<f64>,
    pub sample_cap: Option<usize>,
    pub metric: Option<Metric>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub restarts: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<LpcamMode>,
}

/// Resolves presets and overrides: flags beat the file, the file beats the
/// preset, and the VOC preset is the base.
pub fn resolve(file: &ConfigOverrides, flags: &ConfigOverrides) -> Result<PipelineConfig> {
    let preset = flags.preset.or(file.preset).unwrap_or(Preset::Voc);
    let mut config = PipelineConfig::preset(preset);
    config.apply(file);
    config.apply(flags);
    config.validate()?;
    Ok(config)
}
