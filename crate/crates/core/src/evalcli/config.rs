//! TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arbitration::VoteConfig;
use crate::backbone::BackboneConfig;
use crate::dataset::synth::GenConfig;
use crate::error::{Error, Result};
use crate::training::{Stage1Config, Stage2Config};

pub const SEED_ENV: &str = "FAILSENSE_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Manifest directory written by `gen-data` (holds `smf/` and `control/`).
    pub data: Option<PathBuf>,
    /// Stage-1 backbone checkpoint.
    pub backbone: Option<PathBuf>,
    /// Stage-2 FS-head checkpoint.
    pub fs: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces the seed of every section.
    pub seed: Option<u64>,
    pub data: GenConfig,
    pub backbone: BackboneConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub vote: VoteConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies the `FAILSENSE_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_toml(&text)?;
        if let Some(seed) = seed_from_env()? {
            cfg.seed = Some(seed);
            cfg.apply_seed();
        }
        Ok(cfg)
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.data.seed = s;
            self.backbone.seed = s;
        }
    }

    /// Seed for shuffling and head initialization.
    pub fn train_seed(&self) -> u64 {
        self.seed.unwrap_or(self.backbone.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.vote.validate()?;
        if self.vote.k != self.stage2.k {
            return Err(Error::Config(format!(
                "vote.k = {} but stage2.k = {}",
                self.vote.k, self.stage2.k
            )));
        }
        if self.stage2.fs.d_model != self.backbone.d_model {
            return Err(Error::Config(format!(
                "stage2.fs.d_model = {} but backbone.d_model = {}",
                self.stage2.fs.d_model, self.backbone.d_model
            )));
        }
        self.stage2.fs.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// The `FAILSENSE_SEED` value, if set.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Annotated defaults: every key that a config file may set.
pub fn schema() -> String {
    let mut out = String::from(
        "# failsense run configuration (TOML). Every key is optional; the values\n\
         # below are the defaults. Unknown keys are rejected.\n\
         #\n\
         # seed                 replaces data.seed and backbone.seed; also seeds training\n\
         #                      (the FAILSENSE_SEED environment variable overrides it)\n\
         # [data]               synthetic world and dataset generation (gen-data)\n\
         # [data.world]         tabletop geometry and expert-script limits\n\
         # [backbone]           toy multimodal backbone shape and LoRA settings\n\
         # [stage1]             projector + LoRA training\n\
         # [stage2]             FS-head training; stage2.fs holds the head shape\n\
         # [vote]               head weights and backbone weight of the final vote\n\
         # [paths]              data, backbone and fs locations (command-line flags win)\n\
         #\n\
         # stage2.fs.d_model must equal backbone.d_model and vote.k must equal stage2.k.\n\n",
    );
    let mut cfg = RunConfig::default();
    cfg.seed = Some(0);
    out.push_str(&cfg.to_toml());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_parses_back_to_defaults() {
        let text = schema();
        let cfg = RunConfig::from_toml(&text).unwrap();
        let mut want = RunConfig::default();
        want.seed = Some(0);
        assert_eq!(cfg, want);
    }

    #[test]
    fn top_level_seed_reaches_every_section() {
        let cfg = RunConfig::from_toml("seed = 42\n[data]\nseed = 3\n").unwrap();
        assert_eq!(cfg.data.seed, 42);
        assert_eq!(cfg.backbone.seed, 42);
        assert_eq!(cfg.train_seed(), 42);
    }

    #[test]
    fn unknown_keys_and_inconsistent_sections_are_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[stage1]\nlr = 0.1").is_err());
        assert!(RunConfig::from_toml("[vote]\nk = 2\nweights = [1.0, 1.0]").is_err());
        assert!(RunConfig::from_toml("[backbone]\nd_model = 64\nn_heads = 4").is_err());
    }
}
