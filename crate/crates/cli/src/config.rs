//! Run configuration: one TOML file, overridden by command-line flags,
//! validated as a whole before any work starts.

use std::path::Path;

use amd_core::data::{Split, SyntheticTaskSpec};
use amd_core::model::{Hyper, TrainConfig};
use amd_core::search::DecoderKind;
use amd_core::{BlockScheduleSpec, SearchConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// drives corpus generation, model init and batch order
    pub seed: u64,
    /// 0 uses every core
    pub workers: usize,
    pub data: SyntheticTaskSpec,
    /// `vocab` and `feat_dim` are taken from the corpus
    pub model: Hyper,
    pub train: TrainConfig,
    pub decode: DecodeSection,
    pub search: SearchConfig,
    pub bench: BenchSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub decoder: DecoderKind,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub schedules: Vec<BlockScheduleSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            workers: 0,
            data: SyntheticTaskSpec::default(),
            model: Hyper::default(),
            train: TrainConfig::toy(),
            decode: DecodeSection::default(),
            search: SearchConfig::greedy(),
            bench: BenchSection::default(),
        }
    }
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            decoder: DecoderKind::Tripartite,
            split: Split::Test,
        }
    }
}

impl Default for BenchSection {
    fn default() -> Self {
        let schedules = ["1", "2", "4", "8", "16", "1-8-4", "1-8-8"];
        Self {
            schedules: schedules
                .iter()
                .map(|s| s.parse().expect("valid schedule"))
                .collect(),
        }
    }
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub schedule: Option<BlockScheduleSpec>,
    pub k_main: Option<usize>,
    pub k1: Option<usize>,
    pub k2: Option<usize>,
    pub weights: Option<amd_core::FusionWeights>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::read(p, e))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        cfg.apply(ov);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, ov: &Overrides) {
        if let Some(s) = ov.seed {
            self.seed = s;
        }
        if let Some(w) = ov.workers {
            self.workers = w;
        }
        if let Some(s) = ov.schedule {
            self.search.schedule = s;
        }
        if let Some(k) = ov.k_main {
            self.search.k_main = k;
        }
        if let Some(k) = ov.k1 {
            self.search.k1 = k;
        }
        if let Some(k) = ov.k2 {
            self.search.k2 = k;
        }
        if let Some(w) = ov.weights {
            self.search.weights = w;
        }
        self.data.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.search.validate()?;
        let hyper = Hyper {
            vocab: self.data.vocab_size + 3,
            feat_dim: self.data.feat_dim,
            ..self.model
        };
        hyper.validate()?;
        if self.search.l_max + 1 > self.model.max_len {
            return Err(CliError::Config(format!(
                "search.l_max {} needs model.max_len of at least {}",
                self.search.l_max,
                self.search.l_max + 1
            )));
        }
        if self.bench.schedules.is_empty() {
            return Err(CliError::Config("bench.schedules must not be empty".into()));
        }
        for s in &self.bench.schedules {
            s.validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot render config: {e}")))
    }
}
