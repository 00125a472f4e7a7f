use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use deepcmc::channel::{ArrayConfig, SceneConfig};
use deepcmc::codec::CodecConfig;
use deepcmc::harness::Manifest;
use deepcmc::trainer::TrainConfig;

/// Everything a run depends on, loaded from one TOML file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub scene: SceneConfig,
    pub array: ArrayConfig,
    pub codec: CodecConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Reads `path` (or the defaults) and applies a seed override to the scene and trainer.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed.or(cfg.seed) {
            cfg.seed = Some(s);
            cfg.scene.rng_seed = s;
            cfg.train.seed = s;
        }
        Ok(cfg)
    }

    /// Manifest whose hash covers the fully resolved configuration.
    pub fn manifest(&self, command: &str, outputs: Vec<String>) -> Manifest {
        let text = toml::to_string(self).unwrap_or_default();
        Manifest::new(command, &text, self.train.seed, outputs)
    }
}
