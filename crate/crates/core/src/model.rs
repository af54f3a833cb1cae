//! The full network: ontology embedder, sequence encoder, survival head and
//! the training-only projection head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{stack_rows, Bound, ParamStore, Tape, Var};
use crate::contrast::{ContrastConfig, ProjectionHead};
use crate::data::{PatientRecord, RecordLimits};
use crate::encoder::{
    export_attention, integrate_demographics, AttentionRecord, EncoderConfig, SequenceEncoder,
};
use crate::error::{OtcError, Result};
use crate::ontology::{CodeEmbedder, LeafEmbeddings, OntologyDag};
use crate::survival::{SurvivalHead, SurvivalHeadConfig, SurvivalOutput, SurvivalVars};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub t_max: u32,
    pub onto_attn_dim: usize,
    pub encoder: EncoderConfig,
    pub head: SurvivalHeadConfig,
    pub contrast: ContrastConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t_max: 9,
            onto_attn_dim: 16,
            encoder: EncoderConfig::default(),
            head: SurvivalHeadConfig::default(),
            contrast: ContrastConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(OtcError::Config("t_max must be at least 1".into()));
        }
        if self.onto_attn_dim == 0 {
            return Err(OtcError::Config("onto_attn_dim must be positive".into()));
        }
        self.encoder.validate()?;
        self.contrast.validate()
    }

    pub fn limits(&self) -> RecordLimits {
        RecordLimits {
            t_max: self.t_max,
            max_visits: self.encoder.max_visits,
            max_codes: self.encoder.max_codes,
            demo_dim: self.encoder.demo_dim,
        }
    }
}

/// Per-feature standardization of the demographic vector, fit on training
/// data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DemoNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(records: &[PatientRecord], dim: usize) -> Self {
        if records.is_empty() {
            return Self::identity(dim);
        }
        let n = records.len() as f64;
        let mean: Vec<f64> = (0..dim)
            .map(|d| records.iter().map(|r| r.demo[d]).sum::<f64>() / n)
            .collect();
        let std = (0..dim)
            .map(|d| {
                let var = records.iter().map(|r| (r.demo[d] - mean[d]).powi(2)).sum::<f64>() / n;
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, demo: &[f64]) -> Vec<f64> {
        demo.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub dag: OntologyDag,
    pub store: ParamStore,
    pub demo_norm: DemoNorm,
    embedder: CodeEmbedder,
    encoder: SequenceEncoder,
    head: SurvivalHead,
    projection: ProjectionHead,
}

/// One patient's differentiable outputs.
pub struct PatientForward<'t> {
    pub u: Var<'t>,
    pub surv: SurvivalVars<'t>,
    pub visit_weights: Vec<f64>,
    pub code_weights: Vec<Vec<f64>>,
}

/// Parameters and leaf embeddings bound onto one tape.
pub struct BatchContext<'t> {
    pub params: Bound<'t>,
    pub leaves: LeafEmbeddings<'t>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, dag: OntologyDag, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedder = CodeEmbedder::new(&dag, cfg.encoder.code_dim, cfg.onto_attn_dim, &mut store, &mut rng);
        let encoder = SequenceEncoder::new(&cfg.encoder, &mut store, &mut rng)?;
        let d = cfg.encoder.model_dim;
        let head = SurvivalHead::new(d, &cfg.head, cfg.t_max as usize, &mut store, &mut rng)?;
        let projection = ProjectionHead::new(d, &cfg.contrast, &mut store, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            demo_norm: DemoNorm::identity(cfg.encoder.demo_dim),
            dag,
            store,
            embedder,
            encoder,
            head,
            projection,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<BatchContext<'t>> {
        let params = Bound::new(tape, &self.store);
        let leaves = self.embedder.encode_leaves(&params, &self.dag)?;
        Ok(BatchContext { params, leaves })
    }

    pub fn forward<'t>(&self, ctx: &BatchContext<'t>, rec: &PatientRecord) -> Result<PatientForward<'t>> {
        let p = &ctx.params;
        if rec.visits.is_empty() {
            return Err(OtcError::InvalidInstance(format!("{} has no visits", rec.id)));
        }
        let mut pooled = Vec::with_capacity(rec.visits.len());
        let mut code_weights = Vec::with_capacity(rec.visits.len());
        for visit in &rec.visits {
            let idx = visit
                .iter()
                .map(|c| self.dag.leaf_index(c))
                .collect::<Result<Vec<_>>>()?;
            let rows = ctx.leaves.table.gather_rows(&idx)?;
            let (v, w) = self.encoder.pool_visit(p, rows, &vec![true; idx.len()])?;
            pooled.push(v);
            code_weights.push(w);
        }
        let visits = stack_rows(&pooled)?;
        let demo = self.demo_norm.apply(&rec.demo);
        let features = integrate_demographics(visits, &demo)?;
        let mask = vec![true; rec.visits.len()];
        let seq = self.encoder.encode_sequence(p, features, &mask)?;
        let (u, visit_weights) = self.encoder.pool_instance(p, seq.hidden, &mask)?;
        let surv = self.head.predict(p, u)?;
        Ok(PatientForward {
            u,
            surv,
            visit_weights,
            code_weights,
        })
    }

    /// Unit-norm contrastive embedding of a patient vector.
    pub fn project<'t>(&self, ctx: &BatchContext<'t>, u: Var<'t>) -> Result<Var<'t>> {
        self.projection.project(&ctx.params, u)
    }

    /// Survival predictions, evaluated in chunks to bound tape size.
    pub fn predict(&self, records: &[PatientRecord]) -> Result<Vec<SurvivalOutput>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(64) {
            let tape = Tape::new();
            let ctx = self.bind(&tape)?;
            for rec in chunk {
                out.push(self.forward(&ctx, rec)?.surv.output());
            }
        }
        Ok(out)
    }

    pub fn explain(&self, rec: &PatientRecord) -> Result<AttentionRecord> {
        let tape = Tape::new();
        let ctx = self.bind(&tape)?;
        let f = self.forward(&ctx, rec)?;
        export_attention(
            &rec.id,
            &rec.visits,
            &f.visit_weights,
            &f.code_weights,
            &self.dag,
            |code| Ok(ctx.leaves.weights[self.dag.leaf_index(code)?].clone()),
        )
    }

    /// Ancestor attention of a code in closure order.
    pub fn code_attention(&self, code: &str) -> Result<Vec<(String, f64)>> {
        self.embedder.export_code_attention(&self.store, &self.dag, code)
    }
}
