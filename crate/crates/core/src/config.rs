//! Run configuration read from TOML or JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SplitFractions;
use crate::error::{OtcError, Result};
use crate::model::ModelConfig;
use crate::ontology::OntologyDag;
use crate::synthetic::SyntheticSpec;
use crate::train::TrainSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Ontology JSON; the bundled toy hierarchy when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ontology: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainSchedule,
    pub split: SplitFractions,
    pub split_seed: u64,
    /// Duplicate the minority event class in the training split.
    pub balance: bool,
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            ontology: None,
            model: ModelConfig::default(),
            train: TrainSchedule::default(),
            split: SplitFractions::default(),
            split_seed: 0,
            balance: true,
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| OtcError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| OtcError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses by extension: `.json` as JSON, anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            _ => Self::from_toml(&text),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.split.validate()
    }

    pub fn ontology(&self) -> Result<OntologyDag> {
        match &self.ontology {
            Some(p) => OntologyDag::load(p),
            None => Ok(OntologyDag::toy()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_documents_give_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.warmup_epochs = 3;
        cfg.model.contrast.window = 3.0;
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn nested_overrides_apply() {
        let cfg = RunConfig::from_toml(
            "[train]\nbatch_size = 8\n[train.weights]\nloglik = 1.0\nranking = 0.0\nsupwcon = 0.0\nmse = 0.0\n",
        )
        .unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.weights.ranking, 0.0);
        assert_eq!(cfg.train.warmup_epochs, 20);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(OtcError::Config(_))));
        assert!(RunConfig::from_toml("[model]\nt_max = 0").is_err());
        assert!(RunConfig::from_toml("[model.encoder]\nmodel_dim = 30\nheads = 4").is_err());
        assert!(RunConfig::from_toml("[split]\ntrain = 0.5\nval = 0.1\ntest = 0.1").is_err());
        assert!(RunConfig::from_json(r#"{"train": {"batch_size": 1}}"#).is_err());
    }
}
