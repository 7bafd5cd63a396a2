use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use talkhead::condstream::FilterbankConfig;
use talkhead::denoiser::DenoiserConfig;
use talkhead::headfield::SmoothingKernel;
use talkhead::mesher::GridSpec;
use talkhead::rigidfit::TemplateFitConfig;
use talkhead::sampler::SampleConfig;
use talkhead::schedule::COSINE_OFFSET;
use talkhead::seqfit::FitConfig;
use talkhead::synth::SynthConfig;
use talkhead::trainer::TrainConfig;

use crate::CliError;

pub const SEED_VAR: &str = "FACETALK_SEED";

/// Every tunable of every command. Missing keys take their defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides the seed of every stage when set.
    pub seed: Option<u64>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub model: DenoiserConfig,
    pub schedule_offset: f64,
    pub filterbank: FilterbankConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub fit: FitConfig,
    pub template_fit: TemplateFitConfig,
    pub grid: GridSpec,
    /// Mouth-region smoothing for meshing; `null` disables it.
    pub smoothing: Option<SmoothingKernel>,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            manifest: None,
            checkpoint: None,
            model: DenoiserConfig::default(),
            schedule_offset: COSINE_OFFSET,
            filterbank: FilterbankConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            fit: FitConfig::default(),
            template_fit: TemplateFitConfig::default(),
            grid: GridSpec::default(),
            smoothing: Some(SmoothingKernel::default()),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// Config file (or defaults), with the seed resolved from the flag,
    /// then the environment, then the file.
    pub fn load(path: Option<&Path>, seed_flag: Option<u64>) -> Result<Self, CliError> {
        let mut config = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        let env = match std::env::var(SEED_VAR) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| CliError::Config(format!("{SEED_VAR}={v:?} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        if let Some(seed) = seed_flag.or(env).or(config.seed) {
            config.apply_seed(seed);
        }
        Ok(config)
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.train.seed = seed;
        self.sample.seed = seed;
        self.fit.seed = seed;
        self.synth.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"steps": 3}}"#).is_ok());
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"stepz": 3}}"#).is_err());
    }

    #[test]
    fn defaults_roundtrip() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn seed_reaches_every_stage() {
        let mut c = RunConfig::default();
        c.apply_seed(17);
        assert_eq!((c.train.seed, c.sample.seed, c.fit.seed, c.synth.seed), (17, 17, 17, 17));
    }
}
