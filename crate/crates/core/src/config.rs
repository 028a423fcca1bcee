//! Run-wide configuration.
//!
//! Every field has a default that reproduces the evaluated setup, so an
//! empty file is a valid configuration. Unknown top-level keys are rejected.

use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::evalrunner::EndpointConfig;
use crate::medmetrics::MatcherConfig;
use crate::slidegrid::SlideConfig;
use crate::volgrid::VolumeConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Corrects known spelling slips in template text at render time.
    pub fix_typos: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub seed: u64,
    /// `error`, `warn`, `info`, `debug` or `trace`.
    pub log_level: String,
    pub volume: VolumeConfig,
    pub slide: SlideConfig,
    pub prompt: PromptConfig,
    pub matcher: MatcherConfig,
    pub endpoint: EndpointConfig,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            log_level: "warn".into(),
            volume: VolumeConfig::default(),
            slide: SlideConfig::default(),
            prompt: PromptConfig::default(),
            matcher: MatcherConfig::default(),
            endpoint: EndpointConfig::default(),
        }
    }
}

impl GlobalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !matches!(self.log_level.as_str(), "error" | "warn" | "info" | "debug" | "trace" | "off") {
            return Err(format!("log_level {:?} is not a log level", self.log_level));
        }
        for w in &self.volume.windows {
            if !(w.lo_hu < w.hi_hu) {
                return Err(format!("window ({}, {}) must have lo_hu < hi_hu", w.lo_hu, w.hi_hu));
            }
        }
        if self.volume.cap == 0 || self.slide.cap == 0 {
            return Err("caps must be at least 1".into());
        }
        let t = &self.slide.tissue;
        if t.morph_size % 2 == 0 {
            return Err(format!("slide.tissue.morph_size must be odd, got {}", t.morph_size));
        }
        if !(0.0..=1.0).contains(&self.slide.grid_tissue_fraction) {
            return Err("slide.grid_tissue_fraction must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.matcher.fuzzy_threshold) {
            return Err("matcher.fuzzy_threshold must lie in [0, 1]".into());
        }
        if !(self.matcher.numeric_rel_tol >= 0.0) {
            return Err("matcher.numeric_rel_tol must be non-negative".into());
        }
        self.slide.magnification.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: GlobalConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_json().to_string().as_bytes())
    }
}
