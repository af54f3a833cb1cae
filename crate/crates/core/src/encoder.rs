//! Visit sequence → patient representation.
//!
//! Codes in a visit are attention-pooled into a visit vector, static
//! demographics are appended to every visit, a pre-norm transformer encoder
//! with sinusoidal positions mixes the visits, and a second attention pool
//! collapses the sequence into one vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, Bound, ParamStore, Var};
use crate::error::{OtcError, Result};
use crate::layers::{AttentionPool, LayerNorm, Linear};
use crate::ontology::OntologyDag;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub code_dim: usize,
    pub demo_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub pool_hidden: usize,
    pub max_visits: usize,
    pub max_codes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            code_dim: 16,
            demo_dim: 4,
            model_dim: 32,
            heads: 2,
            layers: 2,
            ff_dim: 64,
            pool_hidden: 16,
            max_visits: 8,
            max_codes: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("code_dim", self.code_dim),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("pool_hidden", self.pool_hidden),
            ("max_visits", self.max_visits),
            ("max_codes", self.max_codes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(OtcError::Config(format!("{name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(OtcError::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    pub cfg: EncoderConfig,
    visit_pool: AttentionPool,
    input_proj: Linear,
    positions: Tensor,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    instance_pool: AttentionPool,
}

/// Transformer output together with per-layer, per-head attention maps.
pub struct SequenceOutput<'t> {
    pub hidden: Var<'t>,
    /// `attention[layer][head]` is `N×N`, rows are queries.
    pub attention: Vec<Vec<Tensor>>,
}

/// Fixed sinusoidal table, `len × dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, dim, data).expect("positive table shape")
}

/// Appends the demographic vector to every row of `visits`.
pub fn integrate_demographics<'t>(visits: Var<'t>, demographics: &[f64]) -> Result<Var<'t>> {
    if demographics.is_empty() {
        return Ok(visits);
    }
    let (rows, _) = visits.dims2();
    let repeated = Tensor::matrix(rows, demographics.len(), demographics.repeat(rows))?;
    concat_cols(&[visits, visits.tape().constant(repeated)])
}

impl SequenceEncoder {
    pub fn new<R: Rng>(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d_in = cfg.code_dim + cfg.demo_dim;
        let dm = cfg.model_dim;
        let layers = (0..cfg.layers)
            .map(|l| {
                let n = |s: &str| format!("enc.layer{l}.{s}");
                EncoderLayer {
                    norm_attn: LayerNorm::new(&n("norm_attn"), dm, store),
                    query: Linear::new(&n("query"), dm, dm, store, rng),
                    key: Linear::new(&n("key"), dm, dm, store, rng),
                    value: Linear::new(&n("value"), dm, dm, store, rng),
                    out: Linear::new(&n("out"), dm, dm, store, rng),
                    norm_ff: LayerNorm::new(&n("norm_ff"), dm, store),
                    ff_in: Linear::new(&n("ff_in"), dm, cfg.ff_dim, store, rng),
                    ff_out: Linear::new(&n("ff_out"), cfg.ff_dim, dm, store, rng),
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            visit_pool: AttentionPool::new("enc.visit_pool", cfg.code_dim, cfg.pool_hidden, store, rng),
            input_proj: Linear::new("enc.input_proj", d_in, dm, store, rng),
            positions: sinusoidal_positions(cfg.max_visits, dm),
            layers,
            final_norm: LayerNorm::new("enc.final_norm", dm, store),
            instance_pool: AttentionPool::new("enc.instance_pool", dm, cfg.pool_hidden, store, rng),
        })
    }

    /// Pools the `M×d_c` code embeddings of one visit.
    pub fn pool_visit<'t>(
        &self,
        p: &Bound<'t>,
        codes: Var<'t>,
        mask: &[bool],
    ) -> Result<(Var<'t>, Vec<f64>)> {
        if !mask.iter().any(|m| *m) {
            return Err(OtcError::InvalidVisit("visit has no unmasked codes".into()));
        }
        self.visit_pool.forward(p, codes, mask)
    }

    /// Pools the `N×D` transformer output into the patient vector.
    pub fn pool_instance<'t>(
        &self,
        p: &Bound<'t>,
        hidden: Var<'t>,
        mask: &[bool],
    ) -> Result<(Var<'t>, Vec<f64>)> {
        if !mask.iter().any(|m| *m) {
            return Err(OtcError::InvalidInstance("all visits are masked".into()));
        }
        self.instance_pool.forward(p, hidden, mask)
    }

    /// Runs the transformer over `N×(d_c+d_s)` visit features.
    pub fn encode_sequence<'t>(
        &self,
        p: &Bound<'t>,
        features: Var<'t>,
        mask: &[bool],
    ) -> Result<SequenceOutput<'t>> {
        let (n, _) = features.dims2();
        if n > self.cfg.max_visits {
            return Err(OtcError::SequenceLength {
                len: n,
                max: self.cfg.max_visits,
            });
        }
        if mask.len() != n {
            return Err(OtcError::Dimension {
                op: "encode_sequence mask",
                left: vec![n],
                right: vec![mask.len()],
            });
        }
        if !mask.iter().any(|m| *m) {
            return Err(OtcError::InvalidInstance("all visits are masked".into()));
        }
        let tape = p.tape();
        let dm = self.cfg.model_dim;
        let pos = Tensor::matrix(n, dm, self.positions.data()[..n * dm].to_vec())?;
        let mut x = self.input_proj.forward(p, features)?.add(tape.constant(pos))?;

        let key_mask: Vec<bool> = (0..n).flat_map(|_| mask.iter().copied()).collect();
        let head_dim = dm / self.cfg.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = layer.norm_attn.forward(p, x)?;
            let q = layer.query.forward(p, h)?;
            let k = layer.key.forward(p, h)?;
            let v = layer.value.forward(p, h)?;
            let mut heads = Vec::with_capacity(self.cfg.heads);
            let mut maps = Vec::with_capacity(self.cfg.heads);
            for head in 0..self.cfg.heads {
                let start = head * head_dim;
                let qh = q.slice_cols(start, head_dim)?;
                let kh = k.slice_cols(start, head_dim)?;
                let vh = v.slice_cols(start, head_dim)?;
                let weights = qh
                    .matmul(kh.transpose())?
                    .scale(scale)
                    .softmax(Some(&key_mask))?;
                maps.push(weights.value().clone());
                heads.push(weights.matmul(vh)?);
            }
            let mixed = if heads.len() == 1 { heads[0] } else { concat_cols(&heads)? };
            x = x.add(layer.out.forward(p, mixed)?)?;

            let h = layer.norm_ff.forward(p, x)?;
            let ff = layer.ff_out.forward(p, layer.ff_in.forward(p, h)?.relu())?;
            x = x.add(ff)?;
            attention.push(maps);
        }
        Ok(SequenceOutput {
            hidden: self.final_norm.forward(p, x)?,
            attention,
        })
    }
}

/// Attention weights gathered during one patient's forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub patient_id: String,
    pub visits: Vec<VisitAttention>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitAttention {
    /// Zero-based position in the visit sequence.
    pub visit: usize,
    pub weight: f64,
    pub codes: Vec<CodeAttention>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeAttention {
    pub code: String,
    pub weight: f64,
    pub ancestors: Vec<AncestorWeight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AncestorWeight {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub weight: f64,
}

/// Builds the interpretability record from pooled weights.
///
/// `leaf_weights(code)` returns the ancestor attention of a code in closure
/// order.
pub fn export_attention(
    patient_id: &str,
    visits: &[Vec<String>],
    visit_weights: &[f64],
    code_weights: &[Vec<f64>],
    dag: &OntologyDag,
    leaf_weights: impl Fn(&str) -> Result<Vec<f64>>,
) -> Result<AttentionRecord> {
    let mut out = Vec::with_capacity(visits.len());
    for (n, codes) in visits.iter().enumerate() {
        let mut entries = Vec::with_capacity(codes.len());
        for (m, code) in codes.iter().enumerate() {
            let closure = dag.ancestor_closure(code)?;
            let weights = leaf_weights(code)?;
            let ancestors = closure
                .into_iter()
                .zip(weights)
                .map(|(id, weight)| AncestorWeight {
                    label: dag.label(&id).map(str::to_string),
                    id,
                    weight,
                })
                .collect();
            entries.push(CodeAttention {
                code: code.clone(),
                weight: code_weights[n][m],
                ancestors,
            });
        }
        out.push(VisitAttention {
            visit: n,
            weight: visit_weights[n],
            codes: entries,
        });
    }
    Ok(AttentionRecord {
        patient_id: patient_id.to_string(),
        visits: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            code_dim: 3,
            demo_dim: 1,
            model_dim: 4,
            heads: 2,
            layers: 2,
            ff_dim: 6,
            pool_hidden: 3,
            max_visits: 4,
            max_codes: 4,
        }
    }

    fn build() -> (SequenceEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = SequenceEncoder::new(&small_cfg(), &mut store, &mut rng).unwrap();
        (enc, store)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn pool_visit_single_and_identical_codes() {
        let (enc, store) = build();
        let tape = Tape::new();
        let p = Bound::new(&tape, &store);
        let one = tape.constant(Tensor::matrix(1, 3, vec![0.2, -0.4, 0.9]).unwrap());
        let (pooled, w) = enc.pool_visit(&p, one, &[true]).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(pooled.value().data(), &[0.2, -0.4, 0.9]);

        let two = tape.constant(Tensor::from_rows(&[vec![0.5, 0.1, -0.3], vec![0.5, 0.1, -0.3]]).unwrap());
        let (pooled, _) = enc.pool_visit(&p, two, &[true, true]).unwrap();
        for (a, b) in pooled.value().data().iter().zip([0.5, 0.1, -0.3]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            enc.pool_visit(&p, one, &[false]),
            Err(OtcError::InvalidVisit(_))
        ));
    }

    #[test]
    fn pool_visit_matches_hand_evaluation() {
        let (enc, mut store) = build();
        let (w1, b1, w2) = enc.visit_pool.ids();
        let w1v = [[0.3, -0.1, 0.5], [0.2, 0.4, -0.6], [-0.7, 0.1, 0.2]];
        store.value_mut(w1).data_mut().copy_from_slice(&w1v.concat());
        store.value_mut(b1).data_mut().copy_from_slice(&[0.05, -0.1, 0.2]);
        store.value_mut(w2).data_mut().copy_from_slice(&[1.2, -0.8, 0.6]);
        let codes = [[0.9, -0.2, 0.4], [-0.5, 0.7, 0.1], [0.3, 0.3, -0.9]];

        let energy: Vec<f64> = codes
            .iter()
            .map(|c| {
                (0..3)
                    .map(|h| {
                        let pre: f64 =
                            [0.05, -0.1, 0.2][h] + (0..3).map(|i| c[i] * w1v[i][h]).sum::<f64>();
                        [1.2, -0.8, 0.6][h] * pre.max(0.0)
                    })
                    .sum()
            })
            .collect();
        let max = energy.iter().copied().fold(f64::MIN, f64::max);
        let z: f64 = energy.iter().map(|e| (e - max).exp()).sum();
        let alpha: Vec<f64> = energy.iter().map(|e| (e - max).exp() / z).collect();
        let pooled: Vec<f64> = (0..3).map(|d| (0..3).map(|m| alpha[m] * codes[m][d]).sum()).collect();

        let tape = Tape::new();
        let p = Bound::new(&tape, &store);
        let x = tape.constant(Tensor::from_rows(&codes.map(|c| c.to_vec())).unwrap());
        let (got, w) = enc.pool_visit(&p, x, &[true; 3]).unwrap();
        for (a, b) in w.iter().zip(&alpha) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in got.value().data().iter().zip(&pooled) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn demographics_are_replicated() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let f = integrate_demographics(p, &[9.0]).unwrap();
        assert_eq!(f.value().shape(), &[2, 3]);
        assert_eq!(f.value().data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 9.0]);
        let same = integrate_demographics(p, &[]).unwrap();
        assert_eq!(same.value().data(), p.value().data());
        let single = tape.constant(Tensor::matrix(1, 2, vec![5.0, 6.0]).unwrap());
        assert_eq!(
            integrate_demographics(single, &[7.0, 8.0]).unwrap().value().data(),
            &[5.0, 6.0, 7.0, 8.0]
        );
    }

    #[test]
    fn single_visit_attends_to_itself() {
        let (enc, store) = build();
        let tape = Tape::new();
        let p = Bound::new(&tape, &store);
        let f = tape.constant(Tensor::matrix(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let out = enc.encode_sequence(&p, f, &[true]).unwrap();
        for layer in &out.attention {
            for head in layer {
                assert_eq!(head.data(), &[1.0]);
            }
        }
        let again = enc.encode_sequence(&p, f, &[true]).unwrap();
        assert_eq!(out.hidden.value().data(), again.hidden.value().data());
    }

    #[test]
    fn padding_never_leaks_into_unpadded_rows() {
        let (enc, store) = build();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = random_matrix(&mut rng, 2, 4);
        let tape = Tape::new();
        let p = Bound::new(&tape, &store);
        let plain = enc
            .encode_sequence(&p, tape.constant(base.clone()), &[true, true])
            .unwrap();
        let (u_plain, w_plain) = enc.pool_instance(&p, plain.hidden, &[true, true]).unwrap();
        for _ in 0..20 {
            let pad = random_matrix(&mut rng, 2, 4);
            let mut data = base.data().to_vec();
            data.extend_from_slice(pad.data());
            let padded = tape.constant(Tensor::matrix(4, 4, data).unwrap());
            let mask = [true, true, false, false];
            let out = enc.encode_sequence(&p, padded, &mask).unwrap();
            let a = out.hidden.value();
            let b = plain.hidden.value();
            for i in 0..8 {
                let d = (a.data()[i] - b.data()[i]).abs();
                assert!(d < 1e-9, "padded row leaked: {d}");
            }
            for layer in &out.attention {
                for head in layer {
                    for r in 0..4 {
                        let row = head.row(r);
                        assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
                        assert_eq!(row[2], 0.0);
                        assert_eq!(row[3], 0.0);
                    }
                }
            }
            drop((a, b));
            let (u, w) = enc.pool_instance(&p, out.hidden, &mask).unwrap();
            for (x, y) in u.value().data().iter().zip(u_plain.value().data()) {
                assert!((x - y).abs() < 1e-9);
            }
            assert!((w[0] - w_plain[0]).abs() < 1e-9 && w[2] == 0.0 && w[3] == 0.0);
        }
    }

    #[test]
    fn sequence_length_is_bounded() {
        let (enc, store) = build();
        let tape = Tape::new();
        let p = Bound::new(&tape, &store);
        let f = tape.constant(Tensor::zeros(&[5, 4]));
        assert!(matches!(
            enc.encode_sequence(&p, f, &[true; 5]),
            Err(OtcError::SequenceLength { len: 5, max: 4 })
        ));
    }

    #[test]
    fn pool_instance_cases() {
        let (enc, store) = build();
        let tape = Tape::new();
        let p = Bound::new(&tape, &store);
        let one = tape.constant(Tensor::matrix(1, 4, vec![1.0, -1.0, 0.5, 0.0]).unwrap());
        let (u, w) = enc.pool_instance(&p, one, &[true]).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(u.value().data(), &[1.0, -1.0, 0.5, 0.0]);
        let same = tape.constant(Tensor::from_rows(&[vec![0.3; 4], vec![0.3; 4], vec![0.3; 4]]).unwrap());
        let (u, w) = enc.pool_instance(&p, same, &[true; 3]).unwrap();
        assert!(u.value().data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(
            enc.pool_instance(&p, same, &[false; 3]),
            Err(OtcError::InvalidInstance(_))
        ));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut cfg = small_cfg();
        cfg.heads = 3;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(SequenceEncoder::new(&cfg, &mut store, &mut rng).is_err());
    }
}
