//! Experiment configuration file.
//!
//! Precedence, lowest to highest: built-in defaults, the `--config` file,
//! command-line flags. Every key has a default and unknown keys are
//! rejected, so an empty file is a complete desk-scale experiment.

use std::path::{Path, PathBuf};

use codecalign::align::AlignConfig;
use codecalign::ar::ArConfig;
use codecalign::nar::NarConfig;
use codecalign::rng::mix64;
use codecalign::self_improve::{EvalPlan, IterationPlan};
use codecalign::train::TrainConfig;
use codecalign::WorldConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed. Every data, training and evaluation seed below is mixed
    /// with it; the world is fixed by `world.world_seed` alone.
    pub seed: u64,
    pub world: WorldConfig,
    pub ar: ArConfig,
    pub nar: NarConfig,
    /// Supervised fine-tuning of the AR policy.
    pub sft: TrainConfig,
    pub nar_train: TrainConfig,
    pub align: AlignConfig,
    pub data: DataConfig,
    pub iterate: IterateConfig,
    pub eval: EvalPlan,
    pub paths: PathsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Golden pairs the SFT policy is trained on.
    pub sft_n: usize,
    /// Fresh preference triples per dataset build or iteration.
    pub pref_n: usize,
    /// Reserved evaluation items.
    pub eval_n: usize,
    /// Utterances the NAR model is trained on.
    pub nar_n: usize,
    /// Sampling temperature of synthetic responses.
    pub temperature: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            sft_n: 5000,
            pref_n: 500,
            eval_n: 1000,
            nar_n: 2000,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterateConfig {
    pub iterations: usize,
}

impl Default for IterateConfig {
    fn default() -> Self {
        IterateConfig { iterations: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory all artifacts are read from and written to.
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { out: PathBuf::from("runs/default") }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            world: WorldConfig::default(),
            ar: ArConfig::default(),
            nar: NarConfig::default(),
            sft: TrainConfig {
                epochs: 10,
                lr: 3e-3,
                batch_size: 32,
                ..TrainConfig::default()
            },
            nar_train: TrainConfig {
                epochs: 3,
                lr: 3e-3,
                batch_size: 32,
                ..TrainConfig::default()
            },
            align: AlignConfig::default(),
            data: DataConfig::default(),
            iterate: IterateConfig::default(),
            eval: EvalPlan::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Why a configuration was rejected.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Invalid(#[from] codecalign::Error),
    #[error("{0}")]
    Other(String),
}

impl ExperimentConfig {
    /// Parses a configuration file. Keys the file leaves out keep the
    /// experiment defaults at every nesting level.
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        let user: toml::Table = text.parse()?;
        let mut merged = toml::Table::try_from(ExperimentConfig::default()).expect("defaults serialize");
        overlay(&mut merged, user);
        merged.try_into()
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Other(format!("cannot serialize configuration: {e}")))
    }

    /// Checks every section and that the output directory can be created.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.world.validate()?;
        self.align.validate()?;
        self.eval.validate()?;
        for (field, v) in [
            ("data.sft_n", self.data.sft_n),
            ("data.pref_n", self.data.pref_n),
            ("data.eval_n", self.data.eval_n),
            ("data.nar_n", self.data.nar_n),
        ] {
            if v == 0 {
                return Err(codecalign::Error::Config {
                    field: field.into(),
                    reason: "must be at least 1".into(),
                }
                .into());
            }
        }
        if self.data.eval_n < 3 {
            return Err(codecalign::Error::Config {
                field: "data.eval_n".into(),
                reason: "the gap statistics need at least 3 items".into(),
            }
            .into());
        }
        if !(self.data.temperature >= 0.0 && self.data.temperature.is_finite()) {
            return Err(codecalign::Error::Config {
                field: "data.temperature".into(),
                reason: "must be non-negative".into(),
            }
            .into());
        }
        if i64::try_from(self.seed).is_err() {
            return Err(ConfigError::Other(format!("seed {} does not fit a TOML integer", self.seed)));
        }
        creatable(&self.paths.out)
    }

    /// Seed of the golden corpus. SFT examples and preference triples share
    /// it, so iteration `t` pairs golden responses the policy was trained on
    /// with its own samples.
    pub fn corpus_seed(&self) -> u64 {
        mix64(self.seed, 0xC0)
    }

    pub fn nar_corpus_seed(&self) -> u64 {
        mix64(self.seed, 0xC1)
    }

    fn mixed(&self, t: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: mix64(t.seed, self.seed),
            ..t.clone()
        }
    }

    pub fn sft_train(&self) -> TrainConfig {
        self.mixed(&self.sft)
    }

    pub fn nar_training(&self) -> TrainConfig {
        self.mixed(&self.nar_train)
    }

    pub fn ar_model(&self) -> ArConfig {
        ArConfig {
            param_seed: mix64(self.ar.param_seed, self.seed),
            ..self.ar.clone()
        }
    }

    pub fn nar_model(&self) -> NarConfig {
        NarConfig {
            param_seed: mix64(self.nar.param_seed, self.seed),
            ..self.nar.clone()
        }
    }

    pub fn align_settings(&self) -> AlignConfig {
        let mut a = self.align.clone();
        a.train = self.mixed(&a.train);
        a.rm = self.mixed(&a.rm);
        a.ppo.seed = mix64(a.ppo.seed, self.seed);
        a
    }

    pub fn eval_plan(&self) -> EvalPlan {
        EvalPlan {
            seed: mix64(self.eval.seed, self.seed),
            ..self.eval
        }
    }

    pub fn iteration_plan(&self) -> IterationPlan {
        IterationPlan {
            iterations: self.iterate.iterations,
            n: self.data.pref_n,
            align: self.align_settings(),
            base_seed: self.corpus_seed(),
            temperature: self.data.temperature,
            eval: self.eval_plan(),
        }
    }
}

fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn creatable(dir: &Path) -> Result<(), ConfigError> {
    let mut p = dir;
    loop {
        if p.exists() {
            return if p.is_dir() {
                Ok(())
            } else {
                Err(ConfigError::Other(format!("paths.out: {} is not a directory", p.display())))
            };
        }
        match p.parent() {
            Some(parent) if !parent.as_os_str().is_empty() => p = parent,
            _ => return Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig::default();
        c.data.pref_n = 123;
        c.align.method = codecalign::align::Method::Coh;
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("[data]\nsft_n = 10\nsft_m = 3").is_err());
        assert!(ExperimentConfig::from_toml("[world]\nk_ar = 8\nkar = 2").is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = ExperimentConfig::from_toml("[sft]\nepochs = 2\n[align]\nmethod = \"continue-sft\"").unwrap();
        assert_eq!(c.sft.epochs, 2);
        assert_eq!(c.sft.lr, 3e-3);
        assert_eq!(c.align.method, codecalign::align::Method::ContinueSft);
        let c = ExperimentConfig::from_toml("[align.train]\nepochs = 1").unwrap();
        assert_eq!(c.align.train.lr, ExperimentConfig::default().align.train.lr);
    }

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_sections_fail_validation() {
        let mut c = ExperimentConfig::default();
        c.world.tau_oracle = 0.0;
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));
        let mut c = ExperimentConfig::default();
        c.data.eval_n = 2;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.seed = u64::MAX;
        assert!(c.validate().is_err());
    }

    #[test]
    fn out_must_not_be_a_file() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let mut c = ExperimentConfig::default();
        c.paths.out = f.path().join("sub");
        assert!(c.validate().is_err());
    }

    #[test]
    fn master_seed_reaches_every_component() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 2, ..a.clone() };
        assert_ne!(a.corpus_seed(), b.corpus_seed());
        assert_ne!(a.sft_train().seed, b.sft_train().seed);
        assert_ne!(a.ar_model().param_seed, b.ar_model().param_seed);
        assert_ne!(a.align_settings().ppo.seed, b.align_settings().ppo.seed);
        assert_ne!(a.eval_plan().seed, b.eval_plan().seed);
        assert_eq!(a.iteration_plan().base_seed, a.corpus_seed());
    }
}
