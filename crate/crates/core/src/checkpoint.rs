//! Versioned inference checkpoints.
//!
//! A checkpoint embeds the model configuration, the ontology and every
//! inference parameter. The projection head is left out.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrast::PROJECTION_PREFIX;
use crate::error::{OtcError, Result};
use crate::model::{DemoNorm, Model, ModelConfig};
use crate::ontology::{OntologyDag, OntologyFile};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    /// SHA-256 over the model configuration and ontology.
    pub config_hash: String,
    pub config: ModelConfig,
    pub ontology: OntologyFile,
    pub demo_norm: DemoNorm,
    pub params: BTreeMap<String, Tensor>,
    pub best_epoch: Option<usize>,
    pub best_val_ctd: Option<f64>,
}

pub fn config_hash(cfg: &ModelConfig, ontology: &OntologyFile) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.update(serde_json::to_vec(ontology).expect("ontology serializes"));
    hex::encode(h.finalize())
}

fn inference_param(name: &str) -> bool {
    !name.starts_with(PROJECTION_PREFIX)
}

impl Checkpoint {
    pub fn from_model(model: &Model, best_epoch: Option<usize>, best_val_ctd: Option<f64>) -> Self {
        let ontology = model.dag.to_file();
        Self {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash(&model.cfg, &ontology),
            config: model.cfg.clone(),
            ontology,
            demo_norm: model.demo_norm.clone(),
            params: model.store.snapshot(inference_param),
            best_epoch,
            best_val_ctd,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
        }
        let header: Header = serde_json::from_str(text)
            .map_err(|e| OtcError::Compatibility(format!("unreadable checkpoint: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(OtcError::Compatibility(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let ck: Self = serde_json::from_str(text)
            .map_err(|e| OtcError::Compatibility(format!("malformed checkpoint: {e}")))?;
        let expect = config_hash(&ck.config, &ck.ontology);
        if ck.config_hash != expect {
            return Err(OtcError::Compatibility(format!(
                "config hash {} does not match contents ({expect})",
                ck.config_hash
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Rebuilds the model. The parameter set must match the architecture
    /// exactly; the projection head is freshly initialized.
    pub fn into_model(self) -> Result<Model> {
        let dag = OntologyDag::from_file(self.ontology)?;
        let mut model = Model::new(&self.config, dag, 0)?;
        let expected = model.store.snapshot(inference_param);
        let missing: Vec<&String> = expected.keys().filter(|k| !self.params.contains_key(*k)).collect();
        if !missing.is_empty() {
            return Err(OtcError::Compatibility(format!("checkpoint lacks parameters {missing:?}")));
        }
        let rejected = model.store.restore(&self.params);
        if !rejected.is_empty() {
            return Err(OtcError::Compatibility(format!(
                "unknown or mis-shaped parameters {rejected:?}"
            )));
        }
        if self.demo_norm.mean.len() != self.config.encoder.demo_dim
            || self.demo_norm.std.len() != self.config.encoder.demo_dim
        {
            return Err(OtcError::Compatibility("demographic normalizer has wrong width".into()));
        }
        model.demo_norm = self.demo_norm;
        Ok(model)
    }
}
