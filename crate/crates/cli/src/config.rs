//! Run configuration: a JSON file merged under command-line flags.

use std::path::{Path, PathBuf};

use maskflow::dit::DiTConfig;
use maskflow::edit::{EditConfig, SweepConfig};
use maskflow::flow::demo2d::Demo2dConfig;
use maskflow::pasl::{PaslConfig, PaslMode, TrainConfig};
use maskflow::rng::derive_seed;
use maskflow::synth::DatasetConfig;
use maskflow::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stage seed below is derived from it.
    pub seed: u64,
    pub dit: DiTConfig,
    pub pasl_mode: PaslMode,
    pub pasl: Option<PaslConfig>,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub edit: EditConfig,
    pub sweep: SweepConfig,
    pub demo2d: Demo2dConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dit: DiTConfig::default(),
            pasl_mode: PaslMode::Toy,
            pasl: None,
            train: TrainConfig::default(),
            dataset: DatasetConfig::default(),
            edit: EditConfig::default(),
            sweep: SweepConfig::default(),
            demo2d: Demo2dConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Format {
                    path: p.to_path_buf(),
                    msg: e.to_string(),
                })
            }
        }
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    /// Writes derived stage seeds into the sub-configs.
    pub fn resolve(mut self) -> Self {
        self.dataset.seed = self.stage_seed("dataset");
        self.dit.seed = self.stage_seed("dit");
        self.edit.seed = self.stage_seed("edit");
        self.sweep.seed = self.stage_seed("sweep");
        let mut pasl = self.pasl.take().unwrap_or_else(|| PaslConfig::for_mode(self.pasl_mode));
        pasl.seed = self.stage_seed("pasl/init");
        self.pasl = Some(pasl);
        self
    }

    pub fn pasl_config(&self) -> PaslConfig {
        self.pasl.clone().unwrap_or_else(|| PaslConfig::for_mode(self.pasl_mode))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 1, "bogus": 2}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"edit": {"n": 10, "x": 1}}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"seed": 4, "edit": {"t": 5}}"#).unwrap();
        assert_eq!((c.seed, c.edit.t, c.edit.n), (4, 5, 30));
    }

    #[test]
    fn stage_seeds_follow_the_master_seed() {
        let a = RunConfig { seed: 1, ..Default::default() }.resolve();
        let b = RunConfig { seed: 2, ..Default::default() }.resolve();
        assert_ne!(a.dit.seed, b.dit.seed);
        assert_eq!(a.dit.seed, derive_seed(1, "dit"));
        assert_eq!(a.clone().resolve(), a);
    }
}
