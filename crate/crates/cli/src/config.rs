use std::fs;
use std::path::{Path, PathBuf};

use fairfader_core::data::SynthConfig;
use fairfader_core::training::{hash_json, ClassifierConfig, Sampling, TrainConfig};
use fairfader_core::ArchSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Where the images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SynthConfig),
    /// A directory of `age_gender_race_id.ext` images.
    Utk {
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default = "rgb")]
        channels: usize,
    },
}

fn rgb() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub n_test_per_race: usize,
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_test_per_race: 474,
            val_fraction: 0.1,
        }
    }
}

/// Everything one experiment needs. The top-level `seed` drives data
/// generation, splitting, initialization and batch order; section seeds may
/// be omitted and otherwise must repeat it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub arch: ArchSpec,
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitConfig,
    /// Shared by the fader and the plain autoencoder; the latter ignores λ.
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    /// Settings of the race probe trained on frozen latents.
    pub probe: ClassifierConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

const SEEDED_SECTIONS: [&str; 3] = ["train", "classifier", "probe"];

impl ExperimentConfig {
    /// The single-channel 32×32 synthetic experiment.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            arch: ArchSpec::desk(),
            data: DataSource::Synthetic(SynthConfig {
                confound_contrast: 0.5,
                ..SynthConfig::default()
            }),
            split: SplitConfig {
                n_test_per_race: 40,
                val_fraction: 0.1,
            },
            train: TrainConfig {
                lambda_e: 0.1,
                lambda_warmup: None,
                eta: 0.05,
                batch_size: 32,
                epochs: 12,
                seed: 0,
                eval_every: 25,
                sampling: Sampling::RaceBalanced,
                hflip: false,
                selection_gate: 0.25,
            },
            classifier: ClassifierConfig {
                eta: 0.05,
                batch_size: 32,
                epochs: 30,
                seed: 0,
                sampling: Sampling::Shuffle,
            },
            probe: ClassifierConfig {
                eta: 0.05,
                batch_size: 32,
                epochs: 10,
                seed: 0,
                sampling: Sampling::RaceBalanced,
            },
            out: None,
        }
        .resolved()
    }

    /// Parses and validates a config; `seed` overrides the file's seed.
    pub fn from_json(text: &str, seed: Option<u64>) -> Result<Self, CliError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
        let top = value.get("seed").cloned();
        let pointers = SEEDED_SECTIONS.map(|s| format!("/{s}/seed"));
        for pointer in pointers.iter().map(String::as_str).chain(["/data/synthetic/seed"]) {
            if let Some(v) = value.pointer(pointer) {
                if Some(v) != top.as_ref() {
                    return Err(CliError::Config(format!(
                        "{} differs from the top-level seed; set only the top-level seed",
                        pointer[1..].replace('/', ".")
                    )));
                }
            }
        }
        let mut cfg: Self =
            serde_json::from_value(value).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, seed: Option<u64>) -> Result<(Self, String), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Ok((Self::from_json(&text, seed)?, text))
    }

    fn resolved(mut self) -> Self {
        self.train.seed = self.seed;
        self.classifier.seed = self.seed;
        self.probe.seed = self.seed;
        if let DataSource::Synthetic(s) = &mut self.data {
            s.seed = self.seed;
        }
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: fairfader_core::Error| CliError::Config(e.to_string());
        self.arch.validate().map_err(cfg)?;
        self.arch.classifier_trace().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.classifier.validate().map_err(cfg)?;
        self.probe.validate().map_err(cfg)?;
        match &self.data {
            DataSource::Synthetic(s) => {
                s.validate().map_err(cfg)?;
                let shape_ok = s.image_size == self.arch.input_size && s.channels == self.arch.input_channels;
                let races_ok = s.num_races == self.arch.num_attrs;
                if !(shape_ok && races_ok) {
                    return Err(CliError::Config(format!(
                        "synthetic data ({} races, {}x{}x{}) does not fit the architecture ({} races, {}x{}x{})",
                        s.num_races,
                        s.channels,
                        s.image_size,
                        s.image_size,
                        self.arch.num_attrs,
                        self.arch.input_channels,
                        self.arch.input_size,
                        self.arch.input_size
                    )));
                }
            }
            DataSource::Utk { channels, .. } => {
                if *channels != self.arch.input_channels {
                    return Err(CliError::Config(format!(
                        "data.utk.channels {channels} differs from arch.input_channels {}",
                        self.arch.input_channels
                    )));
                }
            }
        }
        if !(0.0..1.0).contains(&self.split.val_fraction) {
            return Err(CliError::Config(format!(
                "split.val_fraction {} must lie in [0, 1)",
                self.split.val_fraction
            )));
        }
        Ok(())
    }

    /// Content hash of the resolved config; the output directory is not
    /// part of it.
    pub fn hash(&self) -> String {
        hash_json(&Self { out: None, ..self.clone() })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}
