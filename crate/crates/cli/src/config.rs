//! `--config` file: TOML with every section optional.
//!
//! ```toml
//! catalog = "catalog.json"
//!
//! [limits]
//! step_limit = 40
//! max_unparsed = 3
//! max_turns = 80
//!
//! [detours]
//! min = 1
//! max = 5
//! allow_observe = true
//!
//! [generation]
//! tasks_per_scene = 10
//! correction_share = 0.5
//!
//! [transitions.after_action]
//! spatial_reasoning = 0.42
//! # ...the row must sum to 1
//!
//! [external]
//! base_url = "http://localhost:8000/v1"
//! model = "my-model"
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use homesim_core::corpus::GenConfig;
use homesim_core::harness::Limits;
use homesim_core::thought::{TransitionModel, TransitionTable};
use homesim_core::Catalog;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub catalog: Option<PathBuf>,
    #[serde(default)]
    pub limits: LimitsSection,
    pub detours: Option<Detours>,
    #[serde(default)]
    pub generation: Generation,
    pub transitions: Option<TransitionTable>,
    #[serde(default)]
    pub external: ExternalSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsSection {
    pub step_limit: Option<u32>,
    pub max_unparsed: Option<u32>,
    pub max_turns: Option<u32>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detours {
    pub min: usize,
    pub max: usize,
    #[serde(default = "yes")]
    pub allow_observe: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generation {
    pub tasks_per_scene: Option<usize>,
    pub receptacles: Option<(usize, usize)>,
    pub items: Option<(usize, usize)>,
    pub correction_share: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSection {
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub timeout_secs: Option<u64>,
    pub attempts: Option<u32>,
    pub backoff_ms: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read { path: p.clone(), message: e.to_string() })?;
        let cfg: Config = toml::from_str(&text).map_err(|e| ConfigError::Invalid { path: p.clone(), message: e.to_string() })?;
        if let Some(d) = cfg.detours {
            if d.min > d.max {
                return Err(ConfigError::Invalid { path: p, message: format!("detours.min {} exceeds detours.max {}", d.min, d.max) });
            }
        }
        cfg.model().map_err(|message| ConfigError::Invalid { path: p, message })?;
        Ok(cfg)
    }

    pub fn catalog(&self) -> Result<Catalog, ConfigError> {
        let Some(path) = &self.catalog else { return Ok(Catalog::bundled()) };
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read { path: p.clone(), message: e.to_string() })?;
        Catalog::from_json(&text).map_err(|e| ConfigError::Invalid { path: p, message: e.to_string() })
    }

    pub fn limits(&self) -> Limits {
        let d = Limits::default();
        let step_limit = self.limits.step_limit.unwrap_or(d.step_limit);
        Limits {
            step_limit,
            max_unparsed: self.limits.max_unparsed.unwrap_or(d.max_unparsed),
            max_turns: self.limits.max_turns.unwrap_or(2 * step_limit),
        }
    }

    pub fn model(&self) -> Result<TransitionModel, String> {
        let mut m = TransitionModel::default();
        if let Some(t) = &self.transitions {
            m.apply_overrides(t).map_err(|e| e.to_string())?;
        }
        Ok(m)
    }

    /// Detour range and Observe policy for plans built outside a stage run.
    pub fn detour_policy(&self) -> ((usize, usize), bool) {
        match self.detours {
            Some(d) => ((d.min, d.max), d.allow_observe),
            None => ((0, 0), true),
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        let d = GenConfig::default();
        GenConfig {
            tasks_per_scene: self.generation.tasks_per_scene.unwrap_or(d.tasks_per_scene),
            receptacles: self.generation.receptacles.unwrap_or(d.receptacles),
            items: self.generation.items.unwrap_or(d.items),
            correction_share: self.generation.correction_share.unwrap_or(d.correction_share),
            detours: self.detours.map(|x| (x.min, x.max)),
            allow_observe: self.detours.map_or(d.allow_observe, |x| x.allow_observe),
            transitions: self.transitions.clone(),
            ..d
        }
    }

    pub fn external_timeout(&self) -> Duration {
        Duration::from_secs(self.external.timeout_secs.unwrap_or(60))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Config, toml::de::Error> {
        toml::from_str(text)
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.limits(), Limits::default());
        assert_eq!(c.detour_policy(), ((0, 0), true));
        assert_eq!(c.gen_config(), GenConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let c = parse(
            "[limits]\nstep_limit = 12\n[detours]\nmin = 2\nmax = 3\nallow_observe = false\n[generation]\ncorrection_share = 1.0\n",
        )
        .unwrap();
        assert_eq!(c.limits().step_limit, 12);
        assert_eq!(c.limits().max_turns, 24);
        let g = c.gen_config();
        assert_eq!(g.detours, Some((2, 3)));
        assert!(!g.allow_observe);
        assert_eq!(g.correction_share, 1.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse("stepz = 3").is_err());
        assert!(parse("[limits]\nsteps = 3").is_err());
    }

    #[test]
    fn transition_rows_are_validated() {
        let ok = parse(
            "[transitions.start]\ntask_planning = 0.5\nspatial_reasoning = 0.5\nsituation_analysis = 0.0\n\
             self_reflection = 0.0\ndouble_verification = 0.0\nact = 0.0\n",
        )
        .unwrap();
        assert!(ok.model().is_ok());
        let bad = parse("[transitions.start]\ntask_planning = 0.9\n").unwrap();
        assert!(bad.model().is_err());
    }
}
