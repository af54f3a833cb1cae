//! Discrete-time survival analysis over sequences of coded hospital visits.
//!
//! The pipeline embeds medical codes through their ontology ancestors,
//! pools codes into visits and visits into a patient representation with
//! attention, and predicts per-interval hazard complements. Training mixes
//! a likelihood term, a pairwise ranking hinge, a duration MSE and a
//! censoring-aware weighted contrastive loss.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod contrast;
pub mod data;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ontology;
pub mod survival;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use contrast::Outcome;
pub use data::PatientRecord;
pub use error::{OtcError, Result};
pub use metrics::{EvalRecord, KmCurve};
pub use model::{Model, ModelConfig};
pub use ontology::OntologyDag;
pub use survival::SurvivalOutput;
pub use tensor::Tensor;
