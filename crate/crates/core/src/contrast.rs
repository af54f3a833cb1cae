//! Censoring-aware weighted supervised contrastive loss.
//!
//! Pairs are labelled from survival durations: observed partners inside the
//! anchor's window `[t_i - T/2, t_i + T/2)` are positives, observed partners
//! outside it and censored partners at or beyond its upper edge are
//! negatives with temperature `1/|t_i - t_j|`, and censored partners before
//! the upper edge are excluded from both numerator and denominator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{stack_rows, Bound, ParamStore, Var};
use crate::error::{OtcError, Result};
use crate::layers::Linear;
use crate::tensor::Tensor;

/// Smallest duration gap used for a negative temperature.
pub const MIN_GAP: f64 = 1e-6;

const UNIT_NORM_TOL: f64 = 1e-6;

/// Duration label of an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub t: u32,
    pub observed: bool,
}

impl Outcome {
    pub fn new(t: u32, observed: bool) -> Self {
        Self { t, observed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairLabel {
    Positive,
    Negative { temperature: f64 },
    Excluded,
}

pub fn label_pair(anchor: Outcome, other: Outcome, window: f64) -> Result<PairLabel> {
    if !anchor.observed {
        return Err(OtcError::AnchorEligibility(format!(
            "censored instance (t = {}) cannot be an anchor",
            anchor.t
        )));
    }
    if !(window > 0.0 && window.is_finite()) {
        return Err(OtcError::Config(format!("window must be positive, got {window}")));
    }
    let (ti, tj) = (f64::from(anchor.t), f64::from(other.t));
    let upper = ti + window / 2.0;
    let negative = PairLabel::Negative {
        temperature: 1.0 / (ti - tj).abs().max(MIN_GAP),
    };
    Ok(match other.observed {
        true if ti - window / 2.0 <= tj && tj < upper => PairLabel::Positive,
        true => negative,
        false if tj >= upper => negative,
        false => PairLabel::Excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastConfig {
    pub window: f64,
    pub tau_pos: f64,
    pub proj_hidden: usize,
    pub proj_dim: usize,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            window: 2.0,
            tau_pos: 0.5,
            proj_hidden: 32,
            proj_dim: 32,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window > 0.0 && self.window.is_finite()) {
            return Err(OtcError::Config("contrast.window must be positive".into()));
        }
        if !(self.tau_pos > 0.0 && self.tau_pos.is_finite()) {
            return Err(OtcError::Config("contrast.tau_pos must be positive".into()));
        }
        if self.proj_hidden == 0 || self.proj_dim == 0 {
            return Err(OtcError::Config("projection widths must be positive".into()));
        }
        Ok(())
    }
}

/// Training-only two-layer tanh MLP followed by projection onto the unit
/// sphere.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    hidden: Linear,
    out: Linear,
}

/// Parameter-name prefix of the projection head; checkpoints skip it.
pub const PROJECTION_PREFIX: &str = "proj.";

impl ProjectionHead {
    pub fn new<R: Rng>(
        in_dim: usize,
        cfg: &ContrastConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new("proj.hidden", in_dim, cfg.proj_hidden, store, rng),
            out: Linear::new("proj.out", cfg.proj_hidden, cfg.proj_dim, store, rng),
        }
    }

    pub fn project<'t>(&self, p: &Bound<'t>, u: Var<'t>) -> Result<Var<'t>> {
        let z = self.out.forward(p, self.hidden.forward(p, u)?.tanh())?;
        z.l2_normalize().map_err(|_| {
            OtcError::DegenerateInput("projection head produced the zero vector".into())
        })
    }
}

/// Per-batch pair structure: the positive weights and denominator masks
/// for every eligible anchor.
#[derive(Debug, Clone)]
pub struct PairPlan {
    pub anchors: Vec<usize>,
    /// `anchors.len() × B`: `1/|P(i)|` on positives, else `0`.
    pub positive_weight: Vec<f64>,
    /// `anchors.len() × B`: partner enters the denominator.
    pub denominator: Vec<bool>,
    /// `B × B`: reciprocal temperature of every labelled pair.
    pub inv_temperature: Vec<f64>,
}

impl PairPlan {
    pub fn new(outcomes: &[Outcome], tau_pos: f64, window: f64) -> Result<Self> {
        let b = outcomes.len();
        let mut plan = Self {
            anchors: Vec::new(),
            positive_weight: Vec::new(),
            denominator: Vec::new(),
            inv_temperature: vec![0.0; b * b],
        };
        for (i, anchor) in outcomes.iter().enumerate() {
            if !anchor.observed {
                continue;
            }
            let mut pos = vec![0.0; b];
            let mut den = vec![false; b];
            let mut n_pos = 0usize;
            for (j, other) in outcomes.iter().enumerate() {
                if i == j {
                    continue;
                }
                let inv_tau = match label_pair(*anchor, *other, window)? {
                    PairLabel::Positive => {
                        pos[j] = 1.0;
                        n_pos += 1;
                        1.0 / tau_pos
                    }
                    PairLabel::Negative { temperature } => 1.0 / temperature,
                    PairLabel::Excluded => continue,
                };
                den[j] = true;
                plan.inv_temperature[i * b + j] = inv_tau;
            }
            if n_pos == 0 {
                continue;
            }
            pos.iter_mut().for_each(|w| *w /= n_pos as f64);
            plan.anchors.push(i);
            plan.positive_weight.extend(pos);
            plan.denominator.extend(den);
        }
        Ok(plan)
    }
}

/// Sum over eligible anchors of
/// `-(1/|P(i)|) Σ_p log(exp(z_i·z_p/τ) / Σ_a exp(z_i·z_a/τ_ia))`.
///
/// `z` holds one unit-norm projection per batch element. Returns zero when
/// no anchor has both a positive and a denominator partner.
pub fn supwcon_loss<'t>(
    z: &[Var<'t>],
    outcomes: &[Outcome],
    tau_pos: f64,
    window: f64,
) -> Result<Var<'t>> {
    if z.len() != outcomes.len() {
        return Err(OtcError::Dimension {
            op: "supwcon_loss",
            left: vec![z.len()],
            right: vec![outcomes.len()],
        });
    }
    let Some(first) = z.first() else {
        return Err(OtcError::Contract("empty contrastive batch".into()));
    };
    let tape = first.tape();
    for (i, zi) in z.iter().enumerate() {
        let norm = zi.value().norm();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(OtcError::Contract(format!(
                "embedding {i} has norm {norm}, expected unit norm"
            )));
        }
    }
    let plan = PairPlan::new(outcomes, tau_pos, window)?;
    if plan.anchors.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let b = z.len();
    let k = plan.anchors.len();
    let zs = stack_rows(z)?;
    let anchors = zs.gather_rows(&plan.anchors)?;
    let inv_tau: Vec<f64> = plan
        .anchors
        .iter()
        .flat_map(|&i| plan.inv_temperature[i * b..(i + 1) * b].to_vec())
        .collect();
    let logits = anchors
        .matmul(zs.transpose())?
        .mul(tape.constant(Tensor::matrix(k, b, inv_tau)?))?;
    let log_norm = logits.logsumexp(Some(&plan.denominator))?.sum();
    let attraction = logits
        .mul(tape.constant(Tensor::matrix(k, b, plan.positive_weight.clone())?))?
        .sum();
    log_norm.sub(attraction)
}
