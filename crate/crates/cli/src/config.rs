//! Run configuration files (YAML or JSON). Every field is optional in the
//! file; command-line flags override file values, and whatever is still
//! missing falls back to defaults or is reported as a configuration error
//! by the subcommand that needs it.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use serde::Deserialize;

use bpmap_core::llm::LlmConfig;
use bpmap_core::pipeline::LevelConfig;
use bpmap_core::sim::BackendChoice;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub blueprint: Option<PathBuf>,
    pub items: Option<PathBuf>,
    pub exemplars: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Reference paths powering the mock backend.
    pub truth: Option<PathBuf>,
    pub levels: Option<Vec<LevelConfig>>,
    pub backend: Option<BackendChoice>,
    pub concurrency: Option<usize>,
    pub seed: Option<u64>,
    pub noise_rate: Option<f64>,
    pub noise_levels: Option<Vec<u64>>,
    pub llm: Option<LlmFileConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmFileConfig {
    pub base_url: Option<String>,
    pub api_key: Option<String>,
    pub organization_id: Option<String>,
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub timeout_secs: Option<u64>,
    pub max_retries: Option<u32>,
    pub max_in_flight: Option<usize>,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_yaml::from_str(&content)
            .with_context(|| format!("parsing config {}", path.display()))
    }
}

impl LlmFileConfig {
    /// Environment-seeded defaults, overlaid with the file's values.
    pub fn apply_to(&self, mut cfg: LlmConfig) -> LlmConfig {
        if let Some(url) = &self.base_url {
            cfg.base_url = url.clone();
        }
        if let Some(key) = &self.api_key {
            cfg.api_key = key.clone();
        }
        if let Some(org) = &self.organization_id {
            cfg.organization_id = Some(org.clone());
        }
        if let Some(model) = &self.model {
            cfg.model = model.clone();
        }
        if let Some(temperature) = self.temperature {
            cfg.temperature = temperature;
        }
        if let Some(secs) = self.timeout_secs {
            cfg.timeout = Duration::from_secs(secs);
        }
        if let Some(retries) = self.max_retries {
            cfg.max_retries = retries;
        }
        if let Some(in_flight) = self.max_in_flight {
            cfg.max_in_flight = in_flight;
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bpmap_core::classify::Mode;

    #[test]
    fn loads_yaml_config_with_levels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.yaml");
        std::fs::write(
            &path,
            "blueprint: bp.yaml\nitems: items.csv\noutput: out.csv\nbackend: mock\nseed: 7\nlevels:\n  - level: 1\n    mode: few_shot\n  - level: 2\n    mode: zero_shot\n",
        )
        .unwrap();
        let cfg = RunConfigFile::load(&path).unwrap();
        assert_eq!(cfg.backend, Some(BackendChoice::Mock));
        assert_eq!(cfg.seed, Some(7));
        let levels = cfg.levels.unwrap();
        assert_eq!(levels[0], LevelConfig { level: 1, mode: Mode::FewShot });
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.yaml");
        std::fs::write(&path, "blueprnt: oops.yaml\n").unwrap();
        assert!(RunConfigFile::load(&path).is_err());
    }

    #[test]
    fn llm_overrides_apply_over_defaults() {
        let file = LlmFileConfig {
            model: Some("other-model".into()),
            timeout_secs: Some(5),
            ..LlmFileConfig::default()
        };
        let cfg = file.apply_to(LlmConfig::default());
        assert_eq!(cfg.model, "other-model");
        assert_eq!(cfg.timeout, Duration::from_secs(5));
    }
}
