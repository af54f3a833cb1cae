//! Fixtures shared by the benchmarks.

use otcsurv::data::PatientRecord;
use otcsurv::synthetic::{generate_synthetic, SyntheticSpec};
use otcsurv::{Model, ModelConfig, OntologyDag};

/// A default-sized model and `n` synthetic patients.
pub fn fixture(n: usize) -> (Model, Vec<PatientRecord>) {
    let cfg = ModelConfig::default();
    let dag = OntologyDag::toy();
    let spec = SyntheticSpec {
        n_patients: n,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec, &dag, &cfg.limits()).expect("default spec is valid");
    let model = Model::new(&cfg, dag, 1).expect("default config is valid");
    (model, data.records)
}
